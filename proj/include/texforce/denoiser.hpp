// SPDX-License-Identifier: Apache-2.0
#pragma once

// Noise predictor: a three-level convolutional encoder-decoder with additive
// skip connections. A shared conditioning vector e = silu(time.fc(t) +
// cond.proj(pooled z)) is projected per level and added as a channel bias.

#include <string>
#include <vector>

#include "texforce/lora.hpp"
#include "texforce/nn.hpp"
#include "texforce/tensor.hpp"

namespace texforce {

struct DenoiserConfig {
  int image_size = 32;
  int channels = 3;
  int width1 = 16;  // full resolution
  int width2 = 32;  // 1/2
  int width3 = 64;  // 1/4
  int cond_dim = 64;
  int time_dim = 32;
  int hidden_dim = 64;
};

template <typename Scalar>
struct Denoiser {
  DenoiserConfig config;
  ParameterMap<Scalar> params;
};

/// Every linear (non-convolutional) layer of the denoiser.
inline std::vector<std::string> denoiser_linear_layers() {
  return {"denoiser.time.fc",  "denoiser.cond.proj", "denoiser.d1.emb",    "denoiser.d2.emb",
          "denoiser.mid.emb",  "denoiser.u2.emb",    "denoiser.u1.emb",    "denoiser.mid.fc1",
          "denoiser.mid.fc2",  "denoiser.u2.lateral", "denoiser.u1.lateral"};
}

/// Default adapter targets: conditioning projections and the mid-block linears.
inline std::vector<std::string> denoiser_lora_layers() {
  return {"denoiser.cond.proj", "denoiser.d1.emb",  "denoiser.d2.emb",  "denoiser.mid.emb",
          "denoiser.u2.emb",    "denoiser.u1.emb",  "denoiser.mid.fc1", "denoiser.mid.fc2"};
}

template <typename Scalar>
Denoiser<Scalar> init_denoiser(const DenoiserConfig& cfg, Rng& rng) {
  if (cfg.image_size % 4 != 0) throw Error("denoiser image size must be divisible by 4");
  Denoiser<Scalar> net;
  net.config = cfg;
  auto& p = net.params;
  nn::init_linear(p, "denoiser.time.fc", cfg.time_dim, cfg.hidden_dim, rng);
  nn::init_linear(p, "denoiser.cond.proj", cfg.cond_dim, cfg.hidden_dim, rng);
  nn::init_conv3x3(p, "denoiser.in.conv", cfg.channels, cfg.width1, rng);
  nn::init_conv3x3(p, "denoiser.d1.conv", cfg.width1, cfg.width1, rng);
  nn::init_linear(p, "denoiser.d1.emb", cfg.hidden_dim, cfg.width1, rng);
  nn::init_conv3x3(p, "denoiser.d2.conv", cfg.width1, cfg.width2, rng);
  nn::init_linear(p, "denoiser.d2.emb", cfg.hidden_dim, cfg.width2, rng);
  nn::init_conv3x3(p, "denoiser.mid.conv", cfg.width2, cfg.width3, rng);
  nn::init_linear(p, "denoiser.mid.emb", cfg.hidden_dim, cfg.width3, rng);
  nn::init_linear(p, "denoiser.mid.fc1", cfg.width3, cfg.width3, rng);
  nn::init_linear(p, "denoiser.mid.fc2", cfg.width3, cfg.width3, rng);
  nn::init_linear(p, "denoiser.u2.lateral", cfg.width3, cfg.width2, rng);
  nn::init_conv3x3(p, "denoiser.u2.conv", cfg.width2, cfg.width2, rng);
  nn::init_linear(p, "denoiser.u2.emb", cfg.hidden_dim, cfg.width2, rng);
  nn::init_linear(p, "denoiser.u1.lateral", cfg.width2, cfg.width1, rng);
  nn::init_conv3x3(p, "denoiser.u1.conv", cfg.width1, cfg.width1, rng);
  nn::init_linear(p, "denoiser.u1.emb", cfg.hidden_dim, cfg.width1, rng);
  nn::init_conv3x3(p, "denoiser.out.conv", cfg.width1, cfg.channels, rng, 0.1);
  return net;
}

template <typename Scalar>
struct DenoiserCache {
  nn::GridShape shape;
  nn::LinearCache<Scalar> time_fc, cond_proj, d1_emb, d2_emb, mid_emb, u2_emb, u1_emb, mid_fc1,
      mid_fc2, u2_lateral, u1_lateral;
  nn::ConvCache<Scalar> in_conv, d1_conv, d2_conv, mid_conv, u2_conv, u1_conv, out_conv;
  Matrix<Scalar> e_pre, a1, a2, a3, f1, a4, a5;
};

/// Predicts the noise for a batch. `x` is (channels x batch*H*W), `steps`
/// and the columns of `cond` (cond_dim x batch) are per sample.
template <typename Scalar>
Matrix<Scalar> predict_noise(const Denoiser<Scalar>& net, const AdapterSet<Scalar>* adapters,
                             const Matrix<Scalar>& x, const std::vector<int>& steps,
                             const Matrix<Scalar>& cond, DenoiserCache<Scalar>* cache = nullptr) {
  const auto& cfg = net.config;
  const auto& p = net.params;
  const int batch = static_cast<int>(steps.size());
  const nn::GridShape s0{batch, cfg.image_size, cfg.image_size};
  const nn::GridShape s1 = s0.half(), s2 = s1.half();
  if (x.rows() != cfg.channels || x.cols() != s0.columns())
    throw Error("predict_noise: input shape does not match the configured image size");
  if (cond.cols() != batch || cond.rows() != cfg.cond_dim)
    throw Error("predict_noise: conditioning shape mismatch");

  DenoiserCache<Scalar> local;
  DenoiserCache<Scalar>& c = cache ? *cache : local;
  c.shape = s0;

  const Matrix<Scalar> temb = nn::timestep_embedding<Scalar>(steps, cfg.time_dim);
  c.e_pre = nn::linear(p, adapters, "denoiser.time.fc", temb, &c.time_fc) +
            nn::linear(p, adapters, "denoiser.cond.proj", cond, &c.cond_proj);
  const Matrix<Scalar> e = nn::silu(c.e_pre);

  const Matrix<Scalar> h0 = nn::conv3x3(p, "denoiser.in.conv", x, s0, &c.in_conv);
  c.a1 = nn::conv3x3(p, "denoiser.d1.conv", h0, s0, &c.d1_conv);
  nn::add_per_sample(c.a1, nn::linear(p, adapters, "denoiser.d1.emb", e, &c.d1_emb), s0);
  const Matrix<Scalar> skip1 = h0 + nn::silu(c.a1);

  c.a2 = nn::conv3x3(p, "denoiser.d2.conv", nn::avg_pool2(skip1, s0), s1, &c.d2_conv);
  nn::add_per_sample(c.a2, nn::linear(p, adapters, "denoiser.d2.emb", e, &c.d2_emb), s1);
  const Matrix<Scalar> skip2 = nn::silu(c.a2);

  c.a3 = nn::conv3x3(p, "denoiser.mid.conv", nn::avg_pool2(skip2, s1), s2, &c.mid_conv);
  nn::add_per_sample(c.a3, nn::linear(p, adapters, "denoiser.mid.emb", e, &c.mid_emb), s2);
  const Matrix<Scalar> m0 = nn::silu(c.a3);
  c.f1 = nn::linear(p, adapters, "denoiser.mid.fc1", m0, &c.mid_fc1);
  const Matrix<Scalar> m2 = m0 + nn::linear(p, adapters, "denoiser.mid.fc2", nn::silu(c.f1), &c.mid_fc2);

  const Matrix<Scalar> up2 =
      nn::upsample2(nn::linear(p, adapters, "denoiser.u2.lateral", m2, &c.u2_lateral), s2) + skip2;
  c.a4 = nn::conv3x3(p, "denoiser.u2.conv", up2, s1, &c.u2_conv);
  nn::add_per_sample(c.a4, nn::linear(p, adapters, "denoiser.u2.emb", e, &c.u2_emb), s1);
  const Matrix<Scalar> s4 = nn::silu(c.a4);

  const Matrix<Scalar> up1 =
      nn::upsample2(nn::linear(p, adapters, "denoiser.u1.lateral", s4, &c.u1_lateral), s1) + skip1;
  c.a5 = nn::conv3x3(p, "denoiser.u1.conv", up1, s0, &c.u1_conv);
  nn::add_per_sample(c.a5, nn::linear(p, adapters, "denoiser.u1.emb", e, &c.u1_emb), s0);
  return nn::conv3x3(p, "denoiser.out.conv", nn::silu(c.a5), s0, &c.out_conv);
}

template <typename Scalar>
struct DenoiserBackward {
  Matrix<Scalar> dx;     // empty unless requested
  Matrix<Scalar> dcond;  // empty unless requested
};

template <typename Scalar>
DenoiserBackward<Scalar> predict_noise_backward(const Denoiser<Scalar>& net,
                                                const AdapterSet<Scalar>* adapters,
                                                const DenoiserCache<Scalar>& c,
                                                const Matrix<Scalar>& d_eps, Gradients<Scalar>* grads,
                                                bool need_dx, bool need_dcond) {
  const auto& p = net.params;
  const nn::GridShape s0 = c.shape, s1 = s0.half(), s2 = s1.half();
  Matrix<Scalar> de = Matrix<Scalar>::Zero(net.config.hidden_dim, s0.batch);

  auto level = [&](const Matrix<Scalar>& pre, const Matrix<Scalar>& dact, const char* emb,
                   const nn::LinearCache<Scalar>& emb_cache, nn::GridShape s) {
    Matrix<Scalar> da = nn::silu_backward(pre, dact);
    de += nn::linear_backward(p, adapters, emb, emb_cache, nn::sum_per_sample(da, s), grads);
    return da;
  };

  Matrix<Scalar> ds5 = nn::conv3x3_backward(p, "denoiser.out.conv", c.out_conv, d_eps, s0, grads);
  Matrix<Scalar> da5 = level(c.a5, ds5, "denoiser.u1.emb", c.u1_emb, s0);
  Matrix<Scalar> dup1 = nn::conv3x3_backward(p, "denoiser.u1.conv", c.u1_conv, da5, s0, grads);
  Matrix<Scalar> dskip1 = dup1;
  Matrix<Scalar> ds4 = nn::linear_backward(p, adapters, "denoiser.u1.lateral", c.u1_lateral,
                                           nn::upsample2_backward(dup1, s1), grads);

  Matrix<Scalar> da4 = level(c.a4, ds4, "denoiser.u2.emb", c.u2_emb, s1);
  Matrix<Scalar> dup2 = nn::conv3x3_backward(p, "denoiser.u2.conv", c.u2_conv, da4, s1, grads);
  Matrix<Scalar> dskip2 = dup2;
  Matrix<Scalar> dm2 = nn::linear_backward(p, adapters, "denoiser.u2.lateral", c.u2_lateral,
                                           nn::upsample2_backward(dup2, s2), grads);

  Matrix<Scalar> dm1 = nn::linear_backward(p, adapters, "denoiser.mid.fc2", c.mid_fc2, dm2, grads);
  Matrix<Scalar> dm0 = dm2 + nn::linear_backward(p, adapters, "denoiser.mid.fc1", c.mid_fc1,
                                                 nn::silu_backward(c.f1, dm1), grads);
  Matrix<Scalar> da3 = level(c.a3, dm0, "denoiser.mid.emb", c.mid_emb, s2);
  dskip2 += nn::avg_pool2_backward(
      nn::conv3x3_backward(p, "denoiser.mid.conv", c.mid_conv, da3, s2, grads), s1);

  Matrix<Scalar> da2 = level(c.a2, dskip2, "denoiser.d2.emb", c.d2_emb, s1);
  dskip1 += nn::avg_pool2_backward(
      nn::conv3x3_backward(p, "denoiser.d2.conv", c.d2_conv, da2, s1, grads), s0);

  Matrix<Scalar> da1 = level(c.a1, dskip1, "denoiser.d1.emb", c.d1_emb, s0);
  Matrix<Scalar> dh0 = dskip1 + nn::conv3x3_backward(p, "denoiser.d1.conv", c.d1_conv, da1, s0, grads);

  DenoiserBackward<Scalar> out;
  Matrix<Scalar> dx = nn::conv3x3_backward(p, "denoiser.in.conv", c.in_conv, dh0, s0, grads, need_dx);
  if (need_dx) out.dx = std::move(dx);

  const Matrix<Scalar> de_pre = nn::silu_backward(c.e_pre, de);
  nn::linear_backward(p, adapters, "denoiser.time.fc", c.time_fc, de_pre, grads, false);
  Matrix<Scalar> dcond =
      nn::linear_backward(p, adapters, "denoiser.cond.proj", c.cond_proj, de_pre, grads, need_dcond);
  if (need_dcond) out.dcond = std::move(dcond);
  return out;
}

}  // namespace texforce
