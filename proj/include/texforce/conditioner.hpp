// SPDX-License-Identifier: Apache-2.0
#pragma once

// Toy text encoder: whitespace tokenizer over the caption grammar plus a small
// pre-norm transformer. Its output z conditions the denoiser, and its linear
// layers are the surface the text-encoder policy adapts.

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "texforce/lora.hpp"
#include "texforce/nn.hpp"
#include "texforce/tensor.hpp"

namespace texforce {

class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kUnk = 3;
  static constexpr int kEmpty = 4;

  /// Specials followed by every word of the caption grammar.
  static Vocabulary from_grammar();
  static Vocabulary load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  int id(const std::string& token) const;
  const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  int size() const { return static_cast<int>(tokens_.size()); }
  bool operator==(const Vocabulary& other) const { return tokens_ == other.tokens_; }

 private:
  explicit Vocabulary(std::vector<std::string> tokens);
  std::vector<std::string> tokens_;
  std::map<std::string, int> ids_;
};

struct TokenizedPrompt {
  std::vector<int> ids;  // always max_tokens long, PAD-filled
  int length = 0;        // non-PAD prefix (BOS ... EOS)
  bool truncated = false;
};

/// Lowercase, whitespace split, BOS/EOS wrap, PAD to max_tokens. Words outside
/// the vocabulary map to UNK; overlong prompts keep their first words.
TokenizedPrompt tokenize(const std::string& text, const Vocabulary& vocab, int max_tokens);
std::string detokenize(const std::vector<int>& ids, const Vocabulary& vocab);
/// Lowercased, single-spaced form of a prompt.
std::string normalize_prompt(const std::string& text);

struct EncoderConfig {
  int vocab_size = 0;
  int max_tokens = 12;
  int embed_dim = 64;
  int heads = 4;
  int blocks = 2;
  int ff_dim = 128;
};

template <typename Scalar>
struct TextEncoder {
  EncoderConfig config;
  ParameterMap<Scalar> params;
};

/// Output of the encoder: one column per token position (embed_dim x max_tokens).
template <typename Scalar>
struct ConditioningEmbedding {
  Matrix<Scalar> values;
  int length = 0;

  /// Mean over the non-PAD positions.
  Vector<Scalar> pooled() const {
    return values.leftCols(length).rowwise().sum() / static_cast<Scalar>(length);
  }
};

std::vector<std::string> encoder_linear_layers(const EncoderConfig& config);

template <typename Scalar>
TextEncoder<Scalar> init_encoder(const EncoderConfig& config, Rng& rng) {
  if (config.embed_dim % config.heads != 0) throw Error("embed_dim must be divisible by heads");
  TextEncoder<Scalar> enc;
  enc.config = config;
  auto& p = enc.params;
  const int d = config.embed_dim;
  p["encoder.token_embedding"] = gaussian_matrix<Scalar>(d, config.vocab_size, 1.0, rng);
  p["encoder.position_embedding"] = gaussian_matrix<Scalar>(d, config.max_tokens, 0.5, rng);
  for (int b = 0; b < config.blocks; ++b) {
    const std::string pre = "encoder.block" + std::to_string(b) + ".";
    nn::init_layer_norm(p, pre + "ln1", d);
    for (const char* n : {"attn.q", "attn.k", "attn.v", "attn.o"}) nn::init_linear(p, pre + n, d, d, rng);
    nn::init_layer_norm(p, pre + "ln2", d);
    nn::init_linear(p, pre + "ff1", d, config.ff_dim, rng);
    nn::init_linear(p, pre + "ff2", config.ff_dim, d, rng);
  }
  nn::init_layer_norm(p, "encoder.ln_final", d);
  nn::init_linear(p, "encoder.proj", d, d, rng);
  return enc;
}

template <typename Scalar>
struct EncoderBlockCache {
  Matrix<Scalar> input;
  nn::LayerNormCache<Scalar> ln1, ln2;
  nn::LinearCache<Scalar> q, k, v, o, ff1, ff2;
  Matrix<Scalar> qm, km, vm;
  std::vector<Matrix<Scalar>> probs;  // per head, (query x key)
  Matrix<Scalar> mid;                 // residual stream after attention
  Matrix<Scalar> ff_pre;              // ff1 output before the activation
};

template <typename Scalar>
struct EncoderCache {
  std::vector<int> ids;
  int length = 0;
  std::vector<EncoderBlockCache<Scalar>> blocks;
  nn::LayerNormCache<Scalar> ln_final;
  nn::LinearCache<Scalar> proj;
};

template <typename Scalar>
ConditioningEmbedding<Scalar> encode(const TextEncoder<Scalar>& enc, const AdapterSet<Scalar>* adapters,
                                     const TokenizedPrompt& prompt, EncoderCache<Scalar>* cache = nullptr) {
  const auto& cfg = enc.config;
  const auto& p = enc.params;
  if (static_cast<int>(prompt.ids.size()) != cfg.max_tokens)
    throw Error("encode: expected " + std::to_string(cfg.max_tokens) + " token ids, got " +
                std::to_string(prompt.ids.size()));
  const int L = cfg.max_tokens, d = cfg.embed_dim, heads = cfg.heads, dh = d / heads;
  const Scalar scale = Scalar(1) / std::sqrt(static_cast<Scalar>(dh));

  Matrix<Scalar> x(d, L);
  const auto& tok = p.at("encoder.token_embedding");
  for (int j = 0; j < L; ++j) {
    const int id = prompt.ids[static_cast<std::size_t>(j)];
    if (id < 0 || id >= tok.cols()) throw Error("encode: token id out of range");
    x.col(j) = tok.col(id) + p.at("encoder.position_embedding").col(j);
  }
  if (cache) {
    cache->ids = prompt.ids;
    cache->length = prompt.length;
    cache->blocks.assign(static_cast<std::size_t>(cfg.blocks), {});
  }

  for (int b = 0; b < cfg.blocks; ++b) {
    const std::string pre = "encoder.block" + std::to_string(b) + ".";
    EncoderBlockCache<Scalar> local;
    EncoderBlockCache<Scalar>& c = cache ? cache->blocks[static_cast<std::size_t>(b)] : local;
    c.input = x;
    Matrix<Scalar> h = nn::layer_norm(p, pre + "ln1", x, &c.ln1);
    c.qm = nn::linear(p, adapters, pre + "attn.q", h, &c.q);
    c.km = nn::linear(p, adapters, pre + "attn.k", h, &c.k);
    c.vm = nn::linear(p, adapters, pre + "attn.v", h, &c.v);
    Matrix<Scalar> attended(d, L);
    c.probs.assign(static_cast<std::size_t>(heads), {});
    for (int hd = 0; hd < heads; ++hd) {
      const auto qh = c.qm.middleRows(hd * dh, dh);
      const auto kh = c.km.middleRows(hd * dh, dh);
      Matrix<Scalar> scores = scale * (qh.transpose() * kh);  // query x key
      Matrix<Scalar>& prob = c.probs[static_cast<std::size_t>(hd)];
      prob = Matrix<Scalar>::Zero(L, L);
      for (int i = 0; i < L; ++i) {
        const Scalar mx = scores.row(i).head(prompt.length).maxCoeff();
        Scalar total = 0;
        for (int j = 0; j < prompt.length; ++j) {
          prob(i, j) = std::exp(scores(i, j) - mx);
          total += prob(i, j);
        }
        prob.row(i) /= total;
      }
      attended.middleRows(hd * dh, dh) = c.vm.middleRows(hd * dh, dh) * prob.transpose();
    }
    x = x + nn::linear(p, adapters, pre + "attn.o", attended, &c.o);
    c.mid = x;
    h = nn::layer_norm(p, pre + "ln2", x, &c.ln2);
    c.ff_pre = nn::linear(p, adapters, pre + "ff1", h, &c.ff1);
    x = x + nn::linear(p, adapters, pre + "ff2", nn::silu(c.ff_pre), &c.ff2);
  }
  Matrix<Scalar> h = nn::layer_norm(p, "encoder.ln_final", x, cache ? &cache->ln_final : nullptr);
  ConditioningEmbedding<Scalar> out;
  out.values = nn::linear(p, adapters, "encoder.proj", h, cache ? &cache->proj : nullptr);
  out.length = prompt.length;
  return out;
}

/// Backpropagates dL/dz (embed_dim x max_tokens) into `grads`.
template <typename Scalar>
void encode_backward(const TextEncoder<Scalar>& enc, const AdapterSet<Scalar>* adapters,
                     const EncoderCache<Scalar>& cache, const Matrix<Scalar>& dz, Gradients<Scalar>* grads) {
  const auto& cfg = enc.config;
  const auto& p = enc.params;
  const int L = cfg.max_tokens, d = cfg.embed_dim, heads = cfg.heads, dh = d / heads;
  const Scalar scale = Scalar(1) / std::sqrt(static_cast<Scalar>(dh));

  Matrix<Scalar> dx = nn::linear_backward(p, adapters, "encoder.proj", cache.proj, dz, grads);
  dx = nn::layer_norm_backward(p, "encoder.ln_final", cache.ln_final, dx, grads);

  for (int b = cfg.blocks - 1; b >= 0; --b) {
    const std::string pre = "encoder.block" + std::to_string(b) + ".";
    const auto& c = cache.blocks[static_cast<std::size_t>(b)];
    // feed-forward residual
    Matrix<Scalar> dg = nn::linear_backward(p, adapters, pre + "ff2", c.ff2, dx, grads);
    Matrix<Scalar> dpre = nn::silu_backward(c.ff_pre, dg);
    Matrix<Scalar> dh2 = nn::linear_backward(p, adapters, pre + "ff1", c.ff1, dpre, grads);
    dx += nn::layer_norm_backward(p, pre + "ln2", c.ln2, dh2, grads);
    // attention residual
    Matrix<Scalar> dattended = nn::linear_backward(p, adapters, pre + "attn.o", c.o, dx, grads);
    Matrix<Scalar> dq(d, L), dk(d, L), dv(d, L);
    for (int hd = 0; hd < heads; ++hd) {
      const auto& prob = c.probs[static_cast<std::size_t>(hd)];
      const auto qh = c.qm.middleRows(hd * dh, dh);
      const auto kh = c.km.middleRows(hd * dh, dh);
      const auto vh = c.vm.middleRows(hd * dh, dh);
      const Matrix<Scalar> dout = dattended.middleRows(hd * dh, dh);
      dv.middleRows(hd * dh, dh) = dout * prob;
      const Matrix<Scalar> dprob = dout.transpose() * vh;  // query x key
      Matrix<Scalar> dscores(L, L);
      for (int i = 0; i < L; ++i) {
        const Scalar inner = prob.row(i).dot(dprob.row(i));
        dscores.row(i) = prob.row(i).array() * (dprob.row(i).array() - inner);
      }
      dscores *= scale;
      dq.middleRows(hd * dh, dh) = kh * dscores.transpose();
      dk.middleRows(hd * dh, dh) = qh * dscores;
    }
    Matrix<Scalar> dh1 = nn::linear_backward(p, adapters, pre + "attn.q", c.q, dq, grads);
    dh1 += nn::linear_backward(p, adapters, pre + "attn.k", c.k, dk, grads);
    dh1 += nn::linear_backward(p, adapters, pre + "attn.v", c.v, dv, grads);
    dx += nn::layer_norm_backward(p, pre + "ln1", c.ln1, dh1, grads);
  }
  if (grads && grads->want_base) {
    Matrix<Scalar> dtok = Matrix<Scalar>::Zero(d, cfg.vocab_size);
    for (int j = 0; j < L; ++j) dtok.col(cache.ids[static_cast<std::size_t>(j)]) += dx.col(j);
    grads->add_base("encoder.token_embedding", dtok);
    grads->add_base("encoder.position_embedding", dx);
  }
}

/// dL/dz for a loss that depends on z only through its pooled mean.
template <typename Scalar>
Matrix<Scalar> pooled_backward(const Vector<Scalar>& dpooled, int length, int max_tokens) {
  Matrix<Scalar> dz = Matrix<Scalar>::Zero(dpooled.rows(), max_tokens);
  for (int j = 0; j < length; ++j) dz.col(j) = dpooled / static_cast<Scalar>(length);
  return dz;
}

}  // namespace texforce
