// SPDX-License-Identifier: Apache-2.0
#pragma once

// Gaussian diffusion in pixel space (images scaled to [-1, 1]): schedule,
// forward marginal, reverse posterior, ancestral sampling with recorded
// per-step log-probabilities, and the denoising pretraining loss.

#include <cmath>
#include <limits>
#include <map>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "texforce/conditioner.hpp"
#include "texforce/denoiser.hpp"
#include "texforce/image.hpp"
#include "texforce/lora.hpp"

namespace texforce {

// ---------------------------------------------------------------- schedule

/// Per-step quantities for t = 1..T, stored at index t - 1.
struct NoiseSchedule {
  int steps = 0;
  std::vector<double> betas;
  std::vector<double> alphas;
  std::vector<double> alpha_bars;
  std::vector<double> sigmas;  // reverse-step std, fixed (not learned)

  double beta(int t) const { return betas.at(static_cast<std::size_t>(t - 1)); }
  double alpha(int t) const { return alphas.at(static_cast<std::size_t>(t - 1)); }
  double alpha_bar(int t) const { return t == 0 ? 1.0 : alpha_bars.at(static_cast<std::size_t>(t - 1)); }
  double sigma(int t) const { return sigmas.at(static_cast<std::size_t>(t - 1)); }
};

/// Linear betas; sigma_t^2 is the DDPM posterior variance for t >= 2 and half
/// the smallest of those for t = 1 (where the posterior variance is zero).
NoiseSchedule build_schedule(int steps, double beta_min, double beta_max);

inline void check_step(const NoiseSchedule& s, int t) {
  if (t < 1 || t > s.steps)
    throw Error("timestep " + std::to_string(t) + " outside [1, " + std::to_string(s.steps) + "]");
}

/// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.
template <typename Scalar>
Matrix<Scalar> forward_diffuse(const Matrix<Scalar>& x0, int t, const Matrix<Scalar>& eps,
                               const NoiseSchedule& sched) {
  if (x0.rows() != eps.rows() || x0.cols() != eps.cols()) throw Error("forward_diffuse: shape mismatch");
  check_step(sched, t);
  const double ab = sched.alpha_bar(t);
  return static_cast<Scalar>(std::sqrt(ab)) * x0 + static_cast<Scalar>(std::sqrt(1.0 - ab)) * eps;
}

/// mu = (x_t - beta_t / sqrt(1 - abar_t) * eps_hat) / sqrt(alpha_t).
template <typename Scalar>
Matrix<Scalar> posterior_mean(const Matrix<Scalar>& x_t, const Matrix<Scalar>& eps_hat, int t,
                              const NoiseSchedule& sched) {
  check_step(sched, t);
  const Scalar c1 = static_cast<Scalar>(1.0 / std::sqrt(sched.alpha(t)));
  const Scalar c2 = static_cast<Scalar>(sched.beta(t) / std::sqrt(1.0 - sched.alpha_bar(t)));
  return c1 * (x_t - c2 * eps_hat);
}

/// d mu / d eps_hat (a scalar multiple of the identity).
inline double mean_noise_coefficient(int t, const NoiseSchedule& sched) {
  return -sched.beta(t) / std::sqrt(1.0 - sched.alpha_bar(t)) / std::sqrt(sched.alpha(t));
}

/// Isotropic Gaussian log-density summed over all elements.
template <typename DerivedX, typename DerivedM>
double gaussian_log_prob(const Eigen::MatrixBase<DerivedX>& x, const Eigen::MatrixBase<DerivedM>& mean,
                         double std) {
  if (!(std > 0.0)) throw Error("gaussian_log_prob: std must be positive");
  if (x.rows() != mean.rows() || x.cols() != mean.cols()) throw Error("gaussian_log_prob: shape mismatch");
  double sq = 0.0;
  for (Eigen::Index j = 0; j < x.cols(); ++j)
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      const double d = static_cast<double>(x(i, j)) - static_cast<double>(mean(i, j));
      sq += d * d;
    }
  const double n = static_cast<double>(x.size());
  return -sq / (2.0 * std * std) - n * std::log(std) - 0.5 * n * std::log(2.0 * std::numbers::pi);
}

// ---------------------------------------------------------------- model bundle

template <typename Scalar>
struct DiffusionModel {
  Vocabulary vocab = Vocabulary::from_grammar();
  TextEncoder<Scalar> encoder;
  Denoiser<Scalar> denoiser;
  NoiseSchedule schedule;

  int pixels() const { return denoiser.config.image_size * denoiser.config.image_size; }
  int channels() const { return denoiser.config.channels; }
};

/// Read-only sampling policy: a model with (optionally) attached adapters.
template <typename Scalar>
struct Policy {
  const DiffusionModel<Scalar>& model;
  const AdapterSet<Scalar>* adapters = nullptr;
  double guidance_scale = 3.0;
};

template <typename Scalar>
ConditioningEmbedding<Scalar> encode_prompt(const DiffusionModel<Scalar>& model,
                                            const AdapterSet<Scalar>* adapters, const std::string& text,
                                            EncoderCache<Scalar>* cache = nullptr) {
  return encode(model.encoder, adapters,
                tokenize(text, model.vocab, model.encoder.config.max_tokens), cache);
}

/// Model-space tensor (channels x H*W, values in [-1, 1]) from an image in [0, 1].
inline Matrix<float> image_to_tensor(const Image& image) {
  Eigen::Map<const Matrix<float>> m(image.data.data(), 3, static_cast<Eigen::Index>(image.pixels()));
  return (2.0f * m.array() - 1.0f).matrix();
}

/// Image in [0, 1] from a model-space tensor; values are clamped to [0, 1]
/// only when `clamp` is set (reward evaluation).
template <typename Scalar>
Image tensor_to_image(const Matrix<Scalar>& x, int size, bool clamp = true) {
  Image image(size, size);
  for (Eigen::Index j = 0; j < x.cols(); ++j)
    for (Eigen::Index c = 0; c < 3; ++c) {
      float v = 0.5f * (static_cast<float>(x(c, j)) + 1.0f);
      if (clamp) v = std::min(1.0f, std::max(0.0f, v));
      image.data[static_cast<std::size_t>(j * 3 + c)] = v;
    }
  return image;
}

// ---------------------------------------------------------------- guidance

template <typename Scalar>
struct GuidedCache {
  DenoiserCache<Scalar> net;
  int batch = 0;
  double guidance = 1.0;
};

/// eps = eps_uncond + g * (eps_cond - eps_uncond); the conditional and
/// unconditional branches run as one stacked batch. g = 1 and g = 0 evaluate
/// only the branch that survives.
template <typename Scalar>
Matrix<Scalar> guided_noise(const Denoiser<Scalar>& net, const AdapterSet<Scalar>* adapters,
                            const Matrix<Scalar>& x, const std::vector<int>& steps,
                            const Matrix<Scalar>& cond, const Matrix<Scalar>& uncond, double guidance,
                            GuidedCache<Scalar>* cache = nullptr) {
  DenoiserCache<Scalar>* net_cache = cache ? &cache->net : nullptr;
  if (cache) {
    cache->batch = static_cast<int>(steps.size());
    cache->guidance = guidance;
  }
  if (guidance == 1.0) return predict_noise(net, adapters, x, steps, cond, net_cache);
  if (guidance == 0.0) return predict_noise(net, adapters, x, steps, uncond, net_cache);
  const Eigen::Index n = x.cols();
  Matrix<Scalar> x2(x.rows(), 2 * n);
  x2 << x, x;
  std::vector<int> steps2 = steps;
  steps2.insert(steps2.end(), steps.begin(), steps.end());
  Matrix<Scalar> c2(cond.rows(), 2 * cond.cols());
  c2 << cond, uncond;
  const Matrix<Scalar> e = predict_noise(net, adapters, x2, steps2, c2, net_cache);
  const Scalar g = static_cast<Scalar>(guidance);
  return e.rightCols(n) + g * (e.leftCols(n) - e.rightCols(n));
}

/// Isotropic Gaussian p(x_{t-1} | x_t, z).
template <typename Scalar>
struct ReverseStep {
  Matrix<Scalar> mean;
  double std = 0.0;
};

/// One reverse step for a single image x_t (channels x pixels) under the
/// policy's guidance scale; the unconditional branch encodes the empty prompt.
template <typename Scalar>
ReverseStep<Scalar> reverse_step(const Policy<Scalar>& policy, const Matrix<Scalar>& x_t, int t,
                                 const ConditioningEmbedding<Scalar>& z) {
  const auto& model = policy.model;
  check_step(model.schedule, t);
  if (x_t.rows() != model.channels() || x_t.cols() != model.pixels())
    throw Error("reverse_step: image shape mismatch");
  const auto empty = encode_prompt(model, policy.adapters, std::string());
  const Matrix<Scalar> cond = z.pooled(), uncond = empty.pooled();
  const Matrix<Scalar> eps =
      guided_noise(model.denoiser, policy.adapters, x_t, {t}, cond, uncond, policy.guidance_scale);
  return {posterior_mean(x_t, eps, t, model.schedule), model.schedule.sigma(t)};
}

template <typename Scalar>
struct GuidedBackward {
  Matrix<Scalar> dx;
  Matrix<Scalar> dcond;    // cond_dim x batch
  Matrix<Scalar> duncond;  // cond_dim x batch
};

template <typename Scalar>
GuidedBackward<Scalar> guided_noise_backward(const Denoiser<Scalar>& net, const AdapterSet<Scalar>* adapters,
                                             const GuidedCache<Scalar>& cache, const Matrix<Scalar>& d_eps,
                                             Gradients<Scalar>* grads, bool need_dx, bool need_dcond) {
  GuidedBackward<Scalar> out;
  const int b = cache.batch;
  const Eigen::Index cond_dim = net.config.cond_dim;
  if (cache.guidance == 1.0 || cache.guidance == 0.0) {
    auto r = predict_noise_backward(net, adapters, cache.net, d_eps, grads, need_dx, need_dcond);
    out.dx = std::move(r.dx);
    Matrix<Scalar> zero = Matrix<Scalar>::Zero(cond_dim, b);
    if (cache.guidance == 1.0) {
      out.dcond = need_dcond ? std::move(r.dcond) : zero;
      out.duncond = zero;
    } else {
      out.dcond = zero;
      out.duncond = need_dcond ? std::move(r.dcond) : zero;
    }
    return out;
  }
  const Scalar g = static_cast<Scalar>(cache.guidance);
  const Eigen::Index n = d_eps.cols();
  Matrix<Scalar> d2(d_eps.rows(), 2 * n);
  d2 << g * d_eps, (Scalar(1) - g) * d_eps;
  auto r = predict_noise_backward(net, adapters, cache.net, d2, grads, need_dx, need_dcond);
  if (need_dx) out.dx = r.dx.leftCols(n) + r.dx.rightCols(n);
  if (need_dcond) {
    out.dcond = r.dcond.leftCols(b);
    out.duncond = r.dcond.rightCols(b);
  }
  return out;
}

// ---------------------------------------------------------------- trajectories

template <typename Scalar>
struct TrajectoryStep {
  int t = 0;
  Matrix<Scalar> x_t;
  Matrix<Scalar> x_prev;
  Matrix<Scalar> mean;
  double std = 0.0;
  double log_prob_old = 0.0;
};

/// One denoising rollout; steps are ordered t = T..1.
template <typename Scalar>
struct Trajectory {
  std::string prompt;
  ConditioningEmbedding<Scalar> z;
  std::vector<TrajectoryStep<Scalar>> steps;
  Matrix<Scalar> x0;
  double reward = std::numeric_limits<double>::quiet_NaN();
  bool valid = true;
  std::uint64_t seed = 0;
};

/// Samples one trajectory per (prompt, seed) pair, batched. Each trajectory
/// draws x_T and all step noise from its own generator, so the noise does not
/// depend on which other trajectories share the batch; the network outputs can
/// differ in the last float bits when the batch width changes.
template <typename Scalar>
std::vector<Trajectory<Scalar>> sample_trajectories(const Policy<Scalar>& policy,
                                                    const std::vector<std::string>& prompts,
                                                    const std::vector<std::uint64_t>& seeds,
                                                    bool record_steps = true) {
  if (prompts.size() != seeds.size()) throw Error("sample_trajectories: prompts and seeds differ in length");
  const auto& model = policy.model;
  const auto& sched = model.schedule;
  const int batch = static_cast<int>(prompts.size());
  const int pixels = model.pixels(), channels = model.channels();
  const Eigen::Index cols = static_cast<Eigen::Index>(pixels);

  std::map<std::string, ConditioningEmbedding<Scalar>> embeddings;
  for (const auto& p : prompts)
    if (!embeddings.count(p)) embeddings.emplace(p, encode_prompt(model, policy.adapters, p));
  const ConditioningEmbedding<Scalar> empty = encode_prompt(model, policy.adapters, std::string());

  std::vector<Trajectory<Scalar>> out(static_cast<std::size_t>(batch));
  Matrix<Scalar> cond(model.denoiser.config.cond_dim, batch), uncond(model.denoiser.config.cond_dim, batch);
  std::vector<Rng> rngs;
  Matrix<Scalar> x(channels, batch * cols);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (int b = 0; b < batch; ++b) {
    auto& tr = out[static_cast<std::size_t>(b)];
    tr.prompt = prompts[static_cast<std::size_t>(b)];
    tr.z = embeddings.at(tr.prompt);
    tr.seed = seeds[static_cast<std::size_t>(b)];
    cond.col(b) = tr.z.pooled();
    uncond.col(b) = empty.pooled();
    rngs.emplace_back(tr.seed);
    for (Eigen::Index j = 0; j < cols; ++j)
      for (int c = 0; c < channels; ++c) x(c, b * cols + j) = static_cast<Scalar>(normal(rngs.back()));
    if (record_steps) tr.steps.reserve(static_cast<std::size_t>(sched.steps));
  }

  for (int t = sched.steps; t >= 1; --t) {
    const std::vector<int> steps(static_cast<std::size_t>(batch), t);
    const Matrix<Scalar> eps = guided_noise(model.denoiser, policy.adapters, x, steps, cond, uncond,
                                            policy.guidance_scale);
    const Matrix<Scalar> mean = posterior_mean(x, eps, t, sched);
    const double sigma = sched.sigma(t);
    Matrix<Scalar> next(channels, batch * cols);
    for (int b = 0; b < batch; ++b) {
      auto& rng = rngs[static_cast<std::size_t>(b)];
      for (Eigen::Index j = 0; j < cols; ++j)
        for (int c = 0; c < channels; ++c)
          next(c, b * cols + j) = mean(c, b * cols + j) + static_cast<Scalar>(sigma * normal(rng));
      if (record_steps) {
        TrajectoryStep<Scalar> step;
        step.t = t;
        step.x_t = x.middleCols(b * cols, cols);
        step.x_prev = next.middleCols(b * cols, cols);
        step.mean = mean.middleCols(b * cols, cols);
        step.std = sigma;
        step.log_prob_old = gaussian_log_prob(step.x_prev, step.mean, sigma);
        out[static_cast<std::size_t>(b)].steps.push_back(std::move(step));
      }
    }
    x = std::move(next);
  }
  for (int b = 0; b < batch; ++b) out[static_cast<std::size_t>(b)].x0 = x.middleCols(b * cols, cols);
  return out;
}

template <typename Scalar>
Trajectory<Scalar> sample_trajectory(const Policy<Scalar>& policy, const std::string& prompt,
                                     std::uint64_t seed) {
  return std::move(sample_trajectories(policy, {prompt}, {seed}).front());
}

// ---------------------------------------------------------------- pretraining loss

/// Mean over the batch of the per-sample squared error sum; fills d_eps_hat.
template <typename Scalar>
double denoising_loss(const Matrix<Scalar>& eps, const Matrix<Scalar>& eps_hat, int batch,
                      Matrix<Scalar>* d_eps_hat = nullptr) {
  if (batch < 1) throw Error("denoising_loss: empty batch");
  const Matrix<Scalar> diff = eps_hat - eps;
  double sq = 0.0;
  for (Eigen::Index i = 0; i < diff.size(); ++i) sq += static_cast<double>(diff(i)) * static_cast<double>(diff(i));
  if (d_eps_hat) *d_eps_hat = (Scalar(2) / static_cast<Scalar>(batch)) * diff;
  return sq / batch;
}

struct TrainingExample {
  const Image* image;
  std::string caption;
};

/// One denoising-objective evaluation on a batch: samples t ~ U{1..T} and
/// eps ~ N(0, I) per example, replaces the caption by the empty prompt with
/// probability `uncond_probability`, and accumulates predictor gradients.
/// The encoder is not differentiated (it stays frozen during pretraining).
template <typename Scalar>
double pretrain_step(const DiffusionModel<Scalar>& model, const std::vector<TrainingExample>& batch, Rng& rng,
                     Gradients<Scalar>* grads, double uncond_probability = 0.1,
                     std::map<std::string, Vector<Scalar>>* embedding_cache = nullptr) {
  if (batch.empty()) throw Error("pretrain_step: empty batch");
  const int b = static_cast<int>(batch.size());
  const int size = model.denoiser.config.image_size;
  const Eigen::Index cols = static_cast<Eigen::Index>(size) * size;
  std::uniform_int_distribution<int> pick_t(1, model.schedule.steps);
  std::bernoulli_distribution drop(uncond_probability);
  std::normal_distribution<double> normal(0.0, 1.0);

  std::map<std::string, Vector<Scalar>> local;
  auto& cache = embedding_cache ? *embedding_cache : local;
  auto pooled = [&](const std::string& text) -> const Vector<Scalar>& {
    auto it = cache.find(text);
    if (it == cache.end()) it = cache.emplace(text, encode_prompt<Scalar>(model, nullptr, text).pooled()).first;
    return it->second;
  };

  Matrix<Scalar> x_t(model.channels(), b * cols), eps(model.channels(), b * cols);
  Matrix<Scalar> cond(model.denoiser.config.cond_dim, b);
  std::vector<int> steps(static_cast<std::size_t>(b));
  for (int i = 0; i < b; ++i) {
    const auto& ex = batch[static_cast<std::size_t>(i)];
    if (ex.image->height != size || ex.image->width != size) throw Error("pretrain_step: image size mismatch");
    const int t = pick_t(rng);
    steps[static_cast<std::size_t>(i)] = t;
    const bool unconditional = drop(rng);
    cond.col(i) = pooled(unconditional ? std::string() : ex.caption);
    Matrix<Scalar> noise(model.channels(), cols);
    for (Eigen::Index j = 0; j < cols; ++j)
      for (int c = 0; c < model.channels(); ++c) noise(c, j) = static_cast<Scalar>(normal(rng));
    const Matrix<Scalar> x0 = image_to_tensor(*ex.image).template cast<Scalar>();
    x_t.middleCols(i * cols, cols) = forward_diffuse(x0, t, noise, model.schedule);
    eps.middleCols(i * cols, cols) = noise;
  }
  DenoiserCache<Scalar> net_cache;
  const Matrix<Scalar> eps_hat = predict_noise(model.denoiser, static_cast<const AdapterSet<Scalar>*>(nullptr), x_t, steps, cond, grads ? &net_cache : nullptr);
  Matrix<Scalar> d_eps;
  const double loss = denoising_loss(eps, eps_hat, b, grads ? &d_eps : nullptr);
  if (grads) predict_noise_backward(model.denoiser, static_cast<const AdapterSet<Scalar>*>(nullptr), net_cache, d_eps, grads, false, false);
  return loss;
}

}  // namespace texforce
