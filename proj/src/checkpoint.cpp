// SPDX-License-Identifier: Apache-2.0
#include "texforce/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <sstream>
#include <vector>

#include "texforce/lora.hpp"

namespace texforce {

namespace {

class Writer {
 public:
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  void f32(float f) {
    std::uint32_t v;
    std::memcpy(&v, &f, 4);
    u32(v);
  }
  void raw(const std::string& s) { bytes_.insert(bytes_.end(), s.begin(), s.end()); }
  void string(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    raw(s);
  }
  /// dims then row-major data
  void matrix(const Matrix<float>& m) {
    u32(static_cast<std::uint32_t>(m.rows()));
    u32(static_cast<std::uint32_t>(m.cols()));
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j) f32(m(i, j));
  }
  void flush(const std::filesystem::path& path) const {
    const auto tmp = path.string() + ".tmp";
    {
      std::ofstream out(tmp, std::ios::binary);
      if (!out) throw Error("cannot write " + path.string());
      out.write(bytes_.data(), static_cast<std::streamsize>(bytes_.size()));
      if (!out) throw Error("write failed: " + path.string());
    }
    std::filesystem::rename(tmp, path);
  }

 private:
  std::vector<char> bytes_;
};

class Reader {
 public:
  explicit Reader(const std::filesystem::path& path) : path_(path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open " + path.string());
    bytes_.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  }
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw Error("truncated file: " + path_.string());
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  float f32() {
    const std::uint32_t v = u32();
    float f;
    std::memcpy(&f, &v, 4);
    return f;
  }
  std::string raw(std::size_t n) {
    need(n);
    std::string s(bytes_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  std::string string() { return raw(u32()); }
  Matrix<float> matrix(std::uint32_t rows, std::uint32_t cols) {
    need(static_cast<std::size_t>(rows) * cols * 4);
    Matrix<float> m(rows, cols);
    for (std::uint32_t i = 0; i < rows; ++i)
      for (std::uint32_t j = 0; j < cols; ++j) m(i, j) = f32();
    return m;
  }
  Matrix<float> matrix() {
    const auto rows = u32();
    const auto cols = u32();
    return matrix(rows, cols);
  }
  bool done() const { return pos_ == bytes_.size(); }
  void expect_magic(const char* magic) {
    if (bytes_.size() < 8 || std::memcmp(bytes_.data(), magic, 8) != 0)
      throw Error("bad magic in " + path_.string() + " (expected " + magic + ")");
    pos_ = 8;
  }

 private:
  std::filesystem::path path_;
  std::vector<char> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

void save_checkpoint(const ParameterMap<float>& tensors, const std::filesystem::path& path) {
  Writer w;
  w.raw(std::string(kCheckpointMagic, 8));
  w.u32(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, m] : tensors) {
    w.string(name);
    w.u32(2);
    w.matrix(m);
  }
  w.flush(path);
}

ParameterMap<float> load_checkpoint(const std::filesystem::path& path) {
  Reader r(path);
  r.expect_magic(kCheckpointMagic);
  const auto count = r.u32();
  ParameterMap<float> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    auto name = r.string();
    const auto rank = r.u32();
    if (rank == 0 || rank > 2) throw Error("unsupported tensor rank in " + path.string());
    const auto rows = r.u32();
    const auto cols = rank == 2 ? r.u32() : 1u;
    out[name] = r.matrix(rows, cols);
  }
  if (!r.done()) throw Error("trailing bytes in " + path.string());
  return out;
}

ParameterMap<float> model_tensors(const DiffusionModel<float>& model) {
  ParameterMap<float> out = model.encoder.params;
  for (const auto& [k, v] : model.denoiser.params) out[k] = v;
  const auto& e = model.encoder.config;
  const auto& d = model.denoiser.config;
  Matrix<float> ecfg(1, 6), dcfg(1, 8);
  ecfg << e.vocab_size, e.max_tokens, e.embed_dim, e.heads, e.blocks, e.ff_dim;
  dcfg << d.image_size, d.channels, d.width1, d.width2, d.width3, d.cond_dim, d.time_dim, d.hidden_dim;
  out["config.encoder"] = ecfg;
  out["config.denoiser"] = dcfg;
  return out;
}

void restore_model(DiffusionModel<float>& model, const ParameterMap<float>& tensors) {
  auto ecfg = tensors.find("config.encoder");
  auto dcfg = tensors.find("config.denoiser");
  if (ecfg == tensors.end() || dcfg == tensors.end()) throw Error("checkpoint lacks model configuration");
  auto as_int = [](float v) { return static_cast<int>(v); };
  const auto& e = ecfg->second;
  const auto& d = dcfg->second;
  model.encoder.config = {as_int(e(0)), as_int(e(1)), as_int(e(2)), as_int(e(3)), as_int(e(4)), as_int(e(5))};
  model.denoiser.config = {as_int(d(0)), as_int(d(1)), as_int(d(2)), as_int(d(3)),
                           as_int(d(4)), as_int(d(5)), as_int(d(6)), as_int(d(7))};
  model.encoder.params.clear();
  model.denoiser.params.clear();
  for (const auto& [k, v] : tensors) {
    if (k.rfind("encoder.", 0) == 0) model.encoder.params[k] = v;
    else if (k.rfind("denoiser.", 0) == 0) model.denoiser.params[k] = v;
  }
  if (model.encoder.config.vocab_size != model.vocab.size())
    throw Error("checkpoint vocabulary size does not match the caption grammar");
}

// ---------------------------------------------------------------- adapters

void save_adapters(const AdapterSet<float>& set, const std::filesystem::path& path) {
  Writer w;
  w.raw(std::string(kAdapterMagic, 8));
  std::ostringstream meta;
  for (const auto& [k, v] : set.metadata) {
    if (k.find_first_of("=\n") != std::string::npos || v.find('\n') != std::string::npos)
      throw Error("adapter metadata keys may not contain '=' or newlines");
    meta << k << '=' << v << '\n';
  }
  w.string(meta.str());
  w.u32(static_cast<std::uint32_t>(set.layers.size()));
  for (const auto& [name, a] : set.layers) {
    w.string(name);
    w.u32(static_cast<std::uint32_t>(a.rank()));
    w.f32(a.alpha);
    w.matrix(a.A);
    w.matrix(a.B);
  }
  w.flush(path);
}

AdapterSet<float> load_adapters(const std::filesystem::path& path) {
  Reader r(path);
  r.expect_magic(kAdapterMagic);
  AdapterSet<float> set;
  std::istringstream meta(r.string());
  for (std::string line; std::getline(meta, line);) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw Error("bad metadata line in " + path.string());
    set.metadata[line.substr(0, eq)] = line.substr(eq + 1);
  }
  const auto count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    auto name = r.string();
    LoraAdapter<float> a;
    const auto rank = r.u32();
    a.alpha = r.f32();
    a.A = r.matrix();
    a.B = r.matrix();
    if (a.A.rows() != rank || a.B.cols() != rank)
      throw Error("adapter " + name + ": rank does not match matrix shapes");
    set.layers.emplace(std::move(name), std::move(a));
  }
  if (!r.done()) throw Error("trailing bytes in " + path.string());
  return set;
}

}  // namespace texforce
