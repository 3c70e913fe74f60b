// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <fstream>

#include "support.hpp"

using namespace texforce;

namespace {

const auto kNone = static_cast<const AdapterSet<float>*>(nullptr);

ParameterMap<float> single_layer(Rng& rng, int in, int out) {
  ParameterMap<float> p;
  nn::init_linear(p, "probe", in, out, rng);
  return p;
}

/// Effective delta of one layer, probed through the forward pass.
Matrix<float> probe_delta(const ParameterMap<float>& p, const AdapterSet<float>& set, const std::string& layer,
                          Eigen::Index in) {
  const Matrix<float> eye = Matrix<float>::Identity(in, in);
  return nn::linear(p, &set, layer, eye) - nn::linear(p, kNone, layer, eye);
}

Matrix<float> predict(const DiffusionModel<float>& m, const AdapterSet<float>* set, const Matrix<float>& x,
                      const std::vector<int>& steps, const std::string& prompt) {
  const auto z = encode_prompt(m, set, prompt);
  Matrix<float> cond(z.values.rows(), static_cast<Eigen::Index>(steps.size()));
  for (Eigen::Index j = 0; j < cond.cols(); ++j) cond.col(j) = z.pooled();
  return predict_noise(m.denoiser, set, x, steps, cond);
}

std::vector<char> slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// Minimal standalone reader of the adapter container header.
std::uint32_t header_count(const std::vector<char>& bytes) {
  auto u32 = [&](std::size_t at) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes.at(at + i))) << (8 * i);
    return v;
  };
  const std::uint32_t meta_len = u32(8);
  return u32(12 + meta_len);
}

DiffusionModel<float> model_for_tests(Rng& rng) { return testing::tiny_model<float>(rng, 4, 8); }

}  // namespace

TEST_CASE("zero-initialized adapters are functionally identical to the base model") {
  Rng rng(1);
  const auto m = model_for_tests(rng);
  ParameterMap<float> all = m.encoder.params;
  for (const auto& [k, v] : m.denoiser.params) all.emplace(k, v);
  auto layers = encoder_linear_layers(m.encoder.config);
  for (const auto& l : denoiser_lora_layers()) layers.push_back(l);
  const auto set = make_adapter_set(all, layers, 4, 1.0, rng);
  for (const auto& [name, a] : set.layers) CHECK(a.B.isZero(0));
  double worst = 0;
  for (int i = 0; i < 100; ++i) {
    const Matrix<float> x = gaussian_matrix<float>(3, m.pixels(), 1.0, rng);
    const std::vector<int> steps{1 + i % m.schedule.steps};
    const std::string prompt = prompt_splits(Task::color).seen[static_cast<std::size_t>(i) % 10];
    worst = std::max<double>(worst, (predict(m, &set, x, steps, prompt) - predict(m, kNone, x, steps, prompt))
                                        .cwiseAbs()
                                        .maxCoeff());
  }
  CHECK(worst <= 1e-6);
}

TEST_CASE("alpha zero is the base layer regardless of A and B") {
  Rng rng(2);
  const auto p = single_layer(rng, 7, 5);
  AdapterSet<float> set;
  LoraAdapter<float> a;
  a.A = gaussian_matrix<float>(3, 7, 1.0, rng);
  a.B = gaussian_matrix<float>(5, 3, 1.0, rng);
  a.alpha = 0.0f;
  set.layers.emplace("probe", a);
  const Matrix<float> x = gaussian_matrix<float>(7, 20, 1.0, rng);
  CHECK(nn::linear(p, &set, "probe", x) == nn::linear(p, kNone, "probe", x));
}

TEST_CASE("full-rank factorization reproduces an explicit weight delta") {
  Rng rng(3);
  const auto p = single_layer(rng, 6, 6);
  const Matrix<double> delta = gaussian_matrix<double>(6, 6, 0.5, rng);
  // delta = Q R with Q orthogonal: B = Q, A = R, rank = min(in, out).
  Eigen::HouseholderQR<Matrix<double>> qr(delta);
  const Matrix<double> q = qr.householderQ();
  const Matrix<double> r = qr.matrixQR().triangularView<Eigen::Upper>();
  AdapterSet<float> set;
  set.layers.emplace("probe", LoraAdapter<float>{r.cast<float>(), q.cast<float>(), 1.0f});
  ParameterMap<float> direct = p;
  direct.at("probe.weight") += delta.cast<float>();
  const Matrix<float> x = gaussian_matrix<float>(6, 100, 1.0, rng);
  CHECK((nn::linear(p, &set, "probe", x) - nn::linear(direct, kNone, "probe", x)).cwiseAbs().maxCoeff() <= 1e-5f);
  CHECK((probe_delta(p, set, "probe", 6) - delta.cast<float>()).cwiseAbs().maxCoeff() <= 1e-6f);
}

TEST_CASE("inject rejects unknown layers and shape mismatches") {
  Rng rng(4);
  const auto p = single_layer(rng, 6, 4);
  AdapterSet<float> set;
  set.layers.emplace("missing", make_adapter<float>(6, 4, 2, 1.0, rng));
  CHECK_THROWS_AS(inject(p, set), Error);
  CHECK_THROWS_AS(merge(p, set), Error);
  set.layers.clear();
  set.layers.emplace("probe", make_adapter<float>(5, 4, 2, 1.0, rng));
  CHECK_THROWS_AS(inject(p, set), Error);
  set.layers.clear();
  set.layers.emplace("probe", make_adapter<float>(6, 4, 2, 1.0, rng));
  CHECK_NOTHROW(inject(p, set));
  CHECK_THROWS_AS(make_adapter<float>(6, 4, 0, 1.0, rng), Error);
}

TEST_CASE("merge matches inject and commutes across networks") {
  Rng rng(5);
  auto m = model_for_tests(rng);
  const auto enc_set = testing::random_adapters(m, PolicyTarget::text_encoder, 3, rng);
  const auto den_set = testing::random_adapters(m, PolicyTarget::denoiser, 3, rng);
  const auto both = combine<float>({enc_set, den_set});

  auto merged = m;
  merged.encoder.params = merge(m.encoder.params, enc_set);
  merged.denoiser.params = merge(m.denoiser.params, den_set);
  double worst = 0;
  for (int i = 0; i < 100; ++i) {
    const Matrix<float> x = gaussian_matrix<float>(3, m.pixels(), 1.0, rng);
    const std::vector<int> steps{1 + i % m.schedule.steps};
    const std::string prompt = prompt_splits(Task::count).seen[static_cast<std::size_t>(i) % 10];
    worst = std::max<double>(
        worst, (predict(m, &both, x, steps, prompt) - predict(merged, kNone, x, steps, prompt)).cwiseAbs().maxCoeff());
  }
  CHECK(worst < 1e-5);

  // Zero-init merge is a no-op.
  ParameterMap<float> all = m.encoder.params;
  const auto zero = make_adapter_set(all, encoder_linear_layers(m.encoder.config), 4, 1.0, rng);
  CHECK(merge(m.encoder.params, zero) == m.encoder.params);

  // Merging the encoder set and the denoiser set in either order gives identical parameters.
  ParameterMap<float> full = m.encoder.params;
  for (const auto& [k, v] : m.denoiser.params) full.emplace(k, v);
  const auto ab = merge(merge(full, enc_set), den_set);
  const auto ba = merge(merge(full, den_set), enc_set);
  CHECK(checksum(ab) == checksum(ba));
  CHECK(ab == ba);
}

TEST_CASE("fuse identity, linearity and two-adapter sum") {
  Rng rng(6);
  const auto p = single_layer(rng, 8, 5);
  AdapterSet<float> t1, t2;
  auto a1 = make_adapter<float>(8, 5, 2, 0.7, rng);
  a1.B = gaussian_matrix<float>(5, 2, 1.0, rng);
  auto a2 = make_adapter<float>(8, 5, 3, 1.3, rng);
  a2.B = gaussian_matrix<float>(5, 3, 1.0, rng);
  t1.layers.emplace("probe", a1);
  t2.layers.emplace("probe", a2);
  t1.metadata["task"] = "color";
  t1.metadata["target"] = "text_encoder";
  t2.metadata["task"] = "incompressibility";

  const auto d1 = probe_delta(p, t1, "probe", 8);
  const auto d2 = probe_delta(p, t2, "probe", 8);

  const auto id = fuse<float>({t1}, {1.0});
  CHECK(id.layers.at("probe").alpha == 1.0f);
  CHECK((probe_delta(p, id, "probe", 8) - d1).cwiseAbs().maxCoeff() <= 1e-6f);
  CHECK(id.metadata.at("target") == "text_encoder");

  const auto half = fuse<float>({t1, t1}, {0.5, 0.5});
  CHECK(half.layers.at("probe").rank() == 4);
  CHECK((probe_delta(p, half, "probe", 8) - d1).cwiseAbs().maxCoeff() <= 1e-6f);

  const auto sum = fuse<float>({t1, t2}, {1.0, 1.0});
  CHECK(sum.layers.at("probe").rank() == 5);
  const Matrix<float> explicit_sum = a1.alpha * a1.B * a1.A + a2.alpha * a2.B * a2.A;
  CHECK((probe_delta(p, sum, "probe", 8) - explicit_sum).cwiseAbs().maxCoeff() <= 1e-5f);
  CHECK((sum.layers.at("probe").delta() - (d1 + d2)).cwiseAbs().maxCoeff() <= 1e-5f);

  CHECK_THROWS_AS(fuse<float>({t1, t2}, {1.0}), Error);
  CHECK_THROWS_AS(fuse<float>({}, {}), Error);
  AdapterSet<float> wrong;
  wrong.layers.emplace("probe", make_adapter<float>(7, 5, 2, 1.0, rng));
  CHECK_THROWS_AS(fuse<float>({t1, wrong}, {1.0, 1.0}), Error);
}

TEST_CASE("fuse on disjoint layers scales each delta exactly") {
  Rng rng(7);
  ParameterMap<float> p;
  nn::init_linear(p, "one", 6, 4, rng);
  nn::init_linear(p, "two", 5, 3, rng);
  AdapterSet<float> s1, s2;
  auto a1 = make_adapter<float>(6, 4, 2, 1.0, rng);
  a1.B = gaussian_matrix<float>(4, 2, 1.0, rng);
  auto a2 = make_adapter<float>(5, 3, 2, 0.5, rng);
  a2.B = gaussian_matrix<float>(3, 2, 1.0, rng);
  s1.layers.emplace("one", a1);
  s2.layers.emplace("two", a2);
  const double a = 0.25, b = 2.0;
  const auto f = fuse<float>({s1, s2}, {a, b});
  CHECK(f.layers.at("one").delta() == (static_cast<float>(a) * a1.alpha * a1.B) * a1.A);
  CHECK(f.layers.at("two").delta() == (static_cast<float>(b) * a2.alpha * a2.B) * a2.A);
}

TEST_CASE("adapter files round-trip bitwise and reject corruption") {
  Rng rng(8);
  auto m = model_for_tests(rng);
  auto set = testing::random_adapters(m, PolicyTarget::both, 2, rng);
  set.metadata["task"] = "color";
  set.metadata["seed"] = "17";
  const auto dir = std::filesystem::temp_directory_path() / "texforce_test_lora";
  std::filesystem::create_directories(dir);
  const auto path = dir / "set.lora";
  save_adapters(set, path);
  const auto back = load_adapters(path);
  CHECK(back.metadata == set.metadata);
  REQUIRE(back.layers.size() == set.layers.size());
  for (const auto& [name, a] : set.layers) {
    const auto& b = back.layers.at(name);
    CHECK(b.alpha == a.alpha);
    REQUIRE(b.A.size() == a.A.size());
    REQUIRE(b.B.size() == a.B.size());
    CHECK(std::memcmp(b.A.data(), a.A.data(), sizeof(float) * a.A.size()) == 0);
    CHECK(std::memcmp(b.B.data(), a.B.data(), sizeof(float) * a.B.size()) == 0);
  }
  const auto bytes = slurp(path);
  CHECK(std::string(bytes.data(), 8) == "TFLORA01");
  CHECK(header_count(bytes) == set.layers.size());
  save_adapters(back, dir / "again.lora");
  CHECK(slurp(dir / "again.lora") == bytes);

  auto write = [&](const std::vector<char>& b) {
    std::ofstream out(dir / "bad.lora", std::ios::binary);
    out.write(b.data(), static_cast<std::streamsize>(b.size()));
  };
  auto corrupt = bytes;
  corrupt[3] = 'X';
  write(corrupt);
  CHECK_THROWS_AS(load_adapters(dir / "bad.lora"), Error);
  write(std::vector<char>(bytes.begin(), bytes.begin() + static_cast<long>(bytes.size() / 2)));
  CHECK_THROWS_AS(load_adapters(dir / "bad.lora"), Error);
  CHECK_THROWS_AS(load_adapters(dir / "absent.lora"), Error);

  // Loading into a model with different layer shapes is rejected.
  Rng other_rng(9);
  const auto other = testing::tiny_model<float>(other_rng, 2, 4);
  DiffusionModel<float> wide = other;
  EncoderConfig ec = other.encoder.config;
  ec.embed_dim = 12;
  ec.heads = 3;
  wide.encoder = init_encoder<float>(ec, other_rng);
  CHECK_THROWS_AS(inject(wide.encoder.params, back), Error);
  std::filesystem::remove_all(dir);
}

TEST_CASE("combine rejects overlapping sets") {
  Rng rng(10);
  auto m = model_for_tests(rng);
  const auto e1 = testing::random_adapters(m, PolicyTarget::text_encoder, 2, rng);
  const auto e2 = testing::random_adapters(m, PolicyTarget::text_encoder, 2, rng);
  const auto d = testing::random_adapters(m, PolicyTarget::denoiser, 2, rng);
  CHECK_THROWS_AS(combine<float>({e1, e2}), Error);
  CHECK(combine<float>({e1, d}).layers.size() == e1.layers.size() + d.layers.size());
}
