// SPDX-License-Identifier: Apache-2.0
#pragma once

// Denoising policy optimization: the sampling chain is an MDP whose actions
// are the reverse-step draws x_{t-1} ~ N(mu(x_t, t, z), sigma_t^2 I). A terminal
// reward, normalized over the rollout buffer, is the advantage for every step
// of its trajectory; updates maximize the clipped importance-ratio surrogate.

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <numeric>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include "texforce/diffusion.hpp"
#include "texforce/optim.hpp"
#include "texforce/rewards.hpp"

namespace texforce {

enum class PolicyTarget { text_encoder, denoiser, both };

PolicyTarget parse_policy_target(const std::string& name);
std::string to_string(PolicyTarget target);

inline bool targets_encoder(PolicyTarget t) { return t != PolicyTarget::denoiser; }
inline bool targets_denoiser(PolicyTarget t) { return t != PolicyTarget::text_encoder; }

/// Layer-name prefixes whose adapters are trainable under `target`.
inline bool trainable_layer(const std::string& name, PolicyTarget target) {
  if (name.rfind("encoder.", 0) == 0) return targets_encoder(target);
  if (name.rfind("denoiser.", 0) == 0) return targets_denoiser(target);
  return false;
}

struct PPOConfig {
  double clip = 0.1;
  int epochs_per_buffer = 2;
  int rollouts_per_buffer = 64;
  int minibatch_size = 320;  // (trajectory, timestep) samples per optimizer step
  double learning_rate = 1e-3;
  PolicyTarget policy_target = PolicyTarget::text_encoder;
  double grad_clip_norm = 1.0;
  int total_buffers = 30;
  double guidance_scale = 3.0;
  int micro_batch = 16;  // samples per network evaluation
  int workers = 1;

  void validate() const;
};

struct UpdateStats {
  double mean_reward = 0.0;
  double mean_ratio = 0.0;
  double clip_fraction = 0.0;
  double policy_loss = 0.0;
  double grad_norm = 0.0;
  int skipped = 0;
  // Measured on the first minibatch of the epoch, before its optimizer step.
  double first_max_ratio_deviation = 0.0;
  double first_clip_fraction = 0.0;
};

/// (r - mean) / population std; all zeros when the std is below 1e-8.
std::vector<double> normalize_advantages(const std::vector<double>& rewards);

/// min(r A, clip(r, 1 - clip, 1 + clip) A).
double ppo_objective(double ratio, double advantage, double clip);

/// d objective / d log r: r A while the unclipped term is the minimum, else 0.
double ppo_objective_log_ratio_gradient(double ratio, double advantage, double clip);

template <typename Scalar>
struct RolloutBuffer {
  std::vector<Trajectory<Scalar>> trajectories;  // valid trajectories only
  std::vector<double> advantages;
  int invalid = 0;
  double mean_reward = 0.0;
  double std_reward = 0.0;
};

namespace detail {

/// Runs fn(chunk) for chunk in [0, chunks) over up to `workers` threads.
/// Chunk boundaries are fixed by the caller, so results do not depend on the
/// worker count.
inline void parallel_chunks(int chunks, int workers, const std::function<void(int)>& fn) {
  workers = std::max(1, std::min(workers, chunks));
  if (workers == 1) {
    for (int c = 0; c < chunks; ++c) fn(c);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(workers));
  for (int w = 0; w < workers; ++w)
    pool.emplace_back([&, w] {
      try {
        for (int c = w; c < chunks; c += workers) fn(c);
      } catch (...) {
        errors[static_cast<std::size_t>(w)] = std::current_exception();
      }
    });
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace detail

/// Samples n trajectories (prompts round-robin, trajectory i seeded from
/// (seed, i)), scores each clamped x0 with `reward`, and normalizes the
/// rewards of the valid trajectories into advantages.
template <typename Scalar>
RolloutBuffer<Scalar> collect_rollouts(const Policy<Scalar>& policy, const std::vector<std::string>& prompts,
                                       const RewardSpec& reward, int n, std::uint64_t seed, int micro_batch = 16,
                                       int workers = 1) {
  if (n < 1) throw Error("collect_rollouts: need at least one rollout");
  if (prompts.empty()) throw Error("collect_rollouts: empty prompt list");
  if (!reward.fn) throw Error("collect_rollouts: no reward attached");
  micro_batch = std::max(1, micro_batch);
  std::vector<Trajectory<Scalar>> all(static_cast<std::size_t>(n));
  const int chunks = (n + micro_batch - 1) / micro_batch;
  const int size = policy.model.denoiser.config.image_size;
  detail::parallel_chunks(chunks, workers, [&](int c) {
    const int begin = c * micro_batch, end = std::min(n, begin + micro_batch);
    std::vector<std::string> ps;
    std::vector<std::uint64_t> seeds;
    for (int i = begin; i < end; ++i) {
      ps.push_back(prompts[static_cast<std::size_t>(i) % prompts.size()]);
      seeds.push_back(derive_seed(seed, 7, static_cast<std::uint64_t>(i)));
    }
    auto batch = sample_trajectories(policy, ps, seeds);
    for (int i = begin; i < end; ++i) {
      auto& tr = all[static_cast<std::size_t>(i)];
      tr = std::move(batch[static_cast<std::size_t>(i - begin)]);
      try {
        tr.reward = reward(tensor_to_image(tr.x0, size, true), tr.prompt);
        tr.valid = std::isfinite(tr.reward);
      } catch (const Error&) {
        tr.valid = false;
      }
    }
  });

  RolloutBuffer<Scalar> buffer;
  for (auto& tr : all) {
    if (tr.valid)
      buffer.trajectories.push_back(std::move(tr));
    else
      ++buffer.invalid;
  }
  if (2 * static_cast<int>(buffer.trajectories.size()) < n)
    throw Error("collect_rollouts: fewer than half of the rollouts produced a valid reward (" +
                std::to_string(buffer.invalid) + " of " + std::to_string(n) + " invalid)");
  std::vector<double> rewards;
  for (const auto& tr : buffer.trajectories) rewards.push_back(tr.reward);
  buffer.advantages = normalize_advantages(rewards);
  const double mean = std::accumulate(rewards.begin(), rewards.end(), 0.0) / static_cast<double>(rewards.size());
  double var = 0.0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  buffer.mean_reward = mean;
  buffer.std_reward = std::sqrt(var / static_cast<double>(rewards.size()));
  return buffer;
}

struct StepRef {
  int trajectory = 0;
  int step = 0;
};

/// Recomputes log p(x_{t-1} | x_t, z) under the current policy for each
/// referenced step. When `coefficient` is set, it is called with
/// (index into refs, new log-prob) and the gradient of
/// sum_i coefficient_i * log p_i is accumulated into `grads` for the adapters
/// selected by `target`.
template <typename Scalar>
std::vector<double> evaluate_steps(const Policy<Scalar>& policy, const std::vector<Trajectory<Scalar>>& trajectories,
                                   const std::vector<StepRef>& refs,
                                   const std::function<double(std::size_t, double)>& coefficient,
                                   Gradients<Scalar>* grads, PolicyTarget target, int micro_batch = 16) {
  const auto& model = policy.model;
  const auto& sched = model.schedule;
  const Eigen::Index cols = model.pixels();
  const int channels = model.channels();
  const bool backward = grads && coefficient;
  const bool encoder_grads = backward && targets_encoder(target);
  std::vector<double> log_probs(refs.size());
  micro_batch = std::max(1, micro_batch);

  for (std::size_t begin = 0; begin < refs.size(); begin += static_cast<std::size_t>(micro_batch)) {
    const std::size_t end = std::min(refs.size(), begin + static_cast<std::size_t>(micro_batch));
    const int k = static_cast<int>(end - begin);

    // Conditioning for the prompts in this chunk (and the empty prompt).
    std::map<std::string, std::pair<ConditioningEmbedding<Scalar>, EncoderCache<Scalar>>> enc;
    auto embed = [&](const std::string& p) -> const ConditioningEmbedding<Scalar>& {
      auto it = enc.find(p);
      if (it == enc.end()) {
        EncoderCache<Scalar> cache;
        auto z = encode_prompt(model, policy.adapters, p, encoder_grads ? &cache : nullptr);
        it = enc.emplace(p, std::make_pair(std::move(z), std::move(cache))).first;
      }
      return it->second.first;
    };
    const Vector<Scalar> empty_pooled = embed(std::string()).pooled();

    Matrix<Scalar> x(channels, k * cols), cond(model.denoiser.config.cond_dim, k),
        uncond(model.denoiser.config.cond_dim, k);
    std::vector<int> steps(static_cast<std::size_t>(k));
    for (int i = 0; i < k; ++i) {
      const auto& ref = refs[begin + static_cast<std::size_t>(i)];
      const auto& tr = trajectories.at(static_cast<std::size_t>(ref.trajectory));
      const auto& st = tr.steps.at(static_cast<std::size_t>(ref.step));
      x.middleCols(i * cols, cols) = st.x_t;
      steps[static_cast<std::size_t>(i)] = st.t;
      cond.col(i) = embed(tr.prompt).pooled();
      uncond.col(i) = empty_pooled;
    }
    GuidedCache<Scalar> cache;
    const Matrix<Scalar> eps = guided_noise(model.denoiser, policy.adapters, x, steps, cond, uncond,
                                            policy.guidance_scale, backward ? &cache : nullptr);

    Matrix<Scalar> d_eps;
    bool any = false;
    if (backward) d_eps = Matrix<Scalar>::Zero(channels, k * cols);
    for (int i = 0; i < k; ++i) {
      const auto& ref = refs[begin + static_cast<std::size_t>(i)];
      const auto& st = trajectories[static_cast<std::size_t>(ref.trajectory)].steps[static_cast<std::size_t>(ref.step)];
      const Matrix<Scalar> mean = posterior_mean<Scalar>(x.middleCols(i * cols, cols), eps.middleCols(i * cols, cols),
                                                          st.t, sched);
      const double lp = gaussian_log_prob(st.x_prev, mean, st.std);
      log_probs[begin + static_cast<std::size_t>(i)] = lp;
      if (!backward) continue;
      const double coef = coefficient(begin + static_cast<std::size_t>(i), lp);
      if (coef == 0.0) continue;
      any = true;
      // d logp / d mean = (x_prev - mean) / sigma^2; d mean / d eps = mean_noise_coefficient.
      const double scale = coef * mean_noise_coefficient(st.t, sched) / (st.std * st.std);
      d_eps.middleCols(i * cols, cols) = static_cast<Scalar>(scale) * (st.x_prev - mean);
    }
    if (!any) continue;

    auto back = guided_noise_backward(model.denoiser, policy.adapters, cache, d_eps, grads, false, encoder_grads);
    if (!encoder_grads) continue;
    std::map<std::string, Vector<Scalar>> dpooled;
    for (int i = 0; i < k; ++i) {
      const auto& ref = refs[begin + static_cast<std::size_t>(i)];
      const auto& prompt = trajectories[static_cast<std::size_t>(ref.trajectory)].prompt;
      auto add = [&](const std::string& p, const auto& g) {
        auto it = dpooled.find(p);
        if (it == dpooled.end()) dpooled.emplace(p, g);
        else it->second += g;
      };
      add(prompt, back.dcond.col(i));
      add(std::string(), back.duncond.col(i));
    }
    for (const auto& [p, g] : dpooled) {
      const auto& [z, ecache] = enc.at(p);
      encode_backward(model.encoder, policy.adapters, ecache,
                      pooled_backward<Scalar>(g, z.length, model.encoder.config.max_tokens), grads);
    }
  }
  return log_probs;
}

/// exp(log p_new - log p_old) for one stored step.
template <typename Scalar>
double ppo_ratio(const Policy<Scalar>& policy, const Trajectory<Scalar>& trajectory, int step) {
  std::vector<Trajectory<Scalar>> one;
  one.push_back(trajectory);
  const auto lp = evaluate_steps(policy, one, {{0, step}}, {}, static_cast<Gradients<Scalar>*>(nullptr),
                                 PolicyTarget::text_encoder);
  return std::exp(lp.front() - trajectory.steps.at(static_cast<std::size_t>(step)).log_prob_old);
}

/// Keeps only adapter gradients that `target` trains.
template <typename Scalar>
ParameterMap<Scalar> trainable_gradients(const Gradients<Scalar>& grads, PolicyTarget target) {
  ParameterMap<Scalar> out;
  for (const auto& [name, g] : grads.adapters) {
    const auto layer = name.substr(0, name.size() - 2);  // strip ".A" / ".B"
    if (trainable_layer(layer, target)) out.emplace(name, g);
  }
  return out;
}

struct MinibatchStats {
  double ratio_sum = 0.0;
  double objective_sum = 0.0;
  double max_ratio_deviation = 0.0;
  int clipped = 0;
  int counted = 0;
  int skipped = 0;
};

/// Gradient of the negated mean clipped surrogate over `refs`, restricted to
/// the trainable adapters. With all ratios equal to one this is the
/// advantage-weighted score-function (REINFORCE) gradient.
template <typename Scalar>
ParameterMap<Scalar> ppo_gradient(const Policy<Scalar>& policy, const RolloutBuffer<Scalar>& buffer,
                                  const std::vector<StepRef>& refs, double clip, PolicyTarget target,
                                  int micro_batch = 16, MinibatchStats* stats = nullptr) {
  MinibatchStats local;
  MinibatchStats& s = stats ? *stats : local;
  const double inv = 1.0 / static_cast<double>(refs.size());
  auto coefficient = [&](std::size_t i, double lp) {
    const auto& ref = refs[i];
    const auto& tr = buffer.trajectories[static_cast<std::size_t>(ref.trajectory)];
    const double advantage = buffer.advantages[static_cast<std::size_t>(ref.trajectory)];
    const double ratio = std::exp(lp - tr.steps[static_cast<std::size_t>(ref.step)].log_prob_old);
    if (!std::isfinite(ratio)) {
      ++s.skipped;
      return 0.0;
    }
    ++s.counted;
    s.ratio_sum += ratio;
    s.objective_sum += ppo_objective(ratio, advantage, clip);
    s.max_ratio_deviation = std::max(s.max_ratio_deviation, std::abs(ratio - 1.0));
    if (std::abs(ratio - 1.0) > clip) ++s.clipped;
    // minimize -mean objective
    return -inv * ppo_objective_log_ratio_gradient(ratio, advantage, clip);
  };
  Gradients<Scalar> grads;
  grads.want_base = false;
  evaluate_steps<Scalar>(policy, buffer.trajectories, refs, coefficient, &grads, target, micro_batch);
  return trainable_gradients(grads, target);
}

/// Raised when an update produces a non-finite loss or gradient.
class NonFiniteUpdate : public Error {
 public:
  using Error::Error;
};

/// Owns the optimizer state for the trainable adapters across buffers.
template <typename Scalar>
class PpoTrainer {
 public:
  PpoTrainer(const DiffusionModel<Scalar>& model, AdapterSet<Scalar>& adapters, PPOConfig config)
      : model_(model), adapters_(adapters), config_(config),
        optimizer_(typename Adam<Scalar>::Options{config.learning_rate}) {
    config_.validate();
  }

  std::vector<UpdateStats> update(const RolloutBuffer<Scalar>& buffer, Rng& rng) {
    const Policy<Scalar> policy{model_, &adapters_, config_.guidance_scale};
    auto params = trainable_parameters();
    std::vector<StepRef> all;
    for (std::size_t i = 0; i < buffer.trajectories.size(); ++i)
      for (std::size_t s = 0; s < buffer.trajectories[i].steps.size(); ++s)
        all.push_back({static_cast<int>(i), static_cast<int>(s)});

    std::vector<UpdateStats> out;
    for (int epoch = 0; epoch < config_.epochs_per_buffer; ++epoch) {
      std::shuffle(all.begin(), all.end(), rng);
      UpdateStats st;
      st.mean_reward = buffer.mean_reward;
      double ratio_sum = 0.0, objective_sum = 0.0, norm_sum = 0.0;
      int clipped = 0, counted = 0, minibatches = 0;
      for (std::size_t begin = 0; begin < all.size(); begin += static_cast<std::size_t>(config_.minibatch_size)) {
        const std::size_t end = std::min(all.size(), begin + static_cast<std::size_t>(config_.minibatch_size));
        const std::vector<StepRef> refs(all.begin() + static_cast<std::ptrdiff_t>(begin),
                                        all.begin() + static_cast<std::ptrdiff_t>(end));
        MinibatchStats mb;
        auto grads = ppo_gradient(policy, buffer, refs, config_.clip, config_.policy_target, config_.micro_batch, &mb);
        const double norm = clip_global_norm(grads, config_.grad_clip_norm);
        const double loss = mb.counted ? -mb.objective_sum / mb.counted : 0.0;
        if (!std::isfinite(norm) || !std::isfinite(loss))
          throw NonFiniteUpdate("non-finite policy loss or gradient (epoch " + std::to_string(epoch) +
                                ", loss " + std::to_string(loss) + ", grad norm " + std::to_string(norm) + ")");
        if (minibatches == 0) {
          st.first_max_ratio_deviation = mb.max_ratio_deviation;
          st.first_clip_fraction = mb.counted ? static_cast<double>(mb.clipped) / mb.counted : 0.0;
        }
        optimizer_.step(params, grads);
        ratio_sum += mb.ratio_sum;
        objective_sum += mb.objective_sum;
        clipped += mb.clipped;
        counted += mb.counted;
        st.skipped += mb.skipped;
        norm_sum += norm;
        ++minibatches;
      }
      st.mean_ratio = counted ? ratio_sum / counted : 1.0;
      st.clip_fraction = counted ? static_cast<double>(clipped) / counted : 0.0;
      st.policy_loss = counted ? -objective_sum / counted : 0.0;
      st.grad_norm = minibatches ? norm_sum / minibatches : 0.0;
      out.push_back(st);
    }
    return out;
  }

  std::map<std::string, Matrix<Scalar>*> trainable_parameters() {
    std::map<std::string, Matrix<Scalar>*> out;
    for (auto& [layer, a] : adapters_.layers) {
      if (!trainable_layer(layer, config_.policy_target)) continue;
      out[layer + ".A"] = &a.A;
      out[layer + ".B"] = &a.B;
    }
    return out;
  }

  Adam<Scalar>& optimizer() { return optimizer_; }
  const PPOConfig& config() const { return config_; }

 private:
  const DiffusionModel<Scalar>& model_;
  AdapterSet<Scalar>& adapters_;
  PPOConfig config_;
  Adam<Scalar> optimizer_;
};

// ---------------------------------------------------------------- direct backpropagation

/// Reverse transitions t in [first, last] contribute parameter gradients;
/// first == last + 1 is the empty window.
struct BackpropWindow {
  int first = 1;
  int last = 1;
  int length() const { return std::max(0, last - first + 1); }
};

/// Differentiates -mean R(x0) through the sampling chain. The data gradient
/// flows back from x0 through transitions 1..last (never past x_last);
/// parameter gradients are collected only inside the window. Returns the loss.
template <typename Scalar>
double direct_backprop_step(const Policy<Scalar>& policy, PolicyTarget target, const std::vector<std::string>& prompts,
                            const RewardSpec& reward, BackpropWindow window, std::uint64_t seed,
                            Gradients<Scalar>* grads) {
  if (!reward.differentiable || !reward.gradient)
    throw Error("direct backpropagation needs a differentiable reward; '" + reward.name + "' is not");
  const auto& model = policy.model;
  const auto& sched = model.schedule;
  if (window.first < 1 || window.last > sched.steps || window.first > window.last + 1)
    throw Error("direct_backprop_step: window must satisfy 1 <= first <= last + 1 and last <= T");
  if (prompts.empty()) throw Error("direct_backprop_step: no prompts");

  const int b = static_cast<int>(prompts.size());
  const int size = model.denoiser.config.image_size;
  const Eigen::Index cols = model.pixels();
  std::vector<std::uint64_t> seeds;
  for (int i = 0; i < b; ++i) seeds.push_back(derive_seed(seed, 11, static_cast<std::uint64_t>(i)));
  auto trajectories = sample_trajectories(policy, prompts, seeds);

  double loss = 0.0;
  Matrix<Scalar> g(model.channels(), b * cols);  // dLoss / dx_{t-1}, starting at x0
  for (int i = 0; i < b; ++i) {
    const auto& tr = trajectories[static_cast<std::size_t>(i)];
    const Image image = tensor_to_image(tr.x0, size, false);
    loss -= reward(image, tr.prompt) / b;
    const Image dimage = reward.gradient(image, tr.prompt);
    for (Eigen::Index j = 0; j < cols; ++j)
      for (int c = 0; c < model.channels(); ++c)
        g(c, i * cols + j) = static_cast<Scalar>(-0.5 * dimage.data[static_cast<std::size_t>(j * 3 + c)] / b);
  }
  if (!grads || window.length() == 0) return loss;

  const bool encoder_grads = targets_encoder(target);
  std::map<std::string, std::pair<ConditioningEmbedding<Scalar>, EncoderCache<Scalar>>> enc;
  for (const auto& p : prompts) {
    if (enc.count(p)) continue;
    EncoderCache<Scalar> cache;
    auto z = encode_prompt(model, policy.adapters, p, &cache);
    enc.emplace(p, std::make_pair(std::move(z), std::move(cache)));
  }
  {
    EncoderCache<Scalar> cache;
    auto z = encode_prompt(model, policy.adapters, std::string(), &cache);
    enc.emplace(std::string(), std::make_pair(std::move(z), std::move(cache)));
  }
  Matrix<Scalar> cond(model.denoiser.config.cond_dim, b), uncond(model.denoiser.config.cond_dim, b);
  for (int i = 0; i < b; ++i) {
    cond.col(i) = enc.at(prompts[static_cast<std::size_t>(i)]).first.pooled();
    uncond.col(i) = enc.at(std::string()).first.pooled();
  }
  std::map<std::string, Vector<Scalar>> dpooled;

  Gradients<Scalar> data_only;
  data_only.want_base = false;
  data_only.want_adapters = false;
  for (int t = 1; t <= window.last; ++t) {
    const std::size_t s = static_cast<std::size_t>(sched.steps - t);  // steps stored T..1
    Matrix<Scalar> x(model.channels(), b * cols);
    for (int i = 0; i < b; ++i) x.middleCols(i * cols, cols) = trajectories[static_cast<std::size_t>(i)].steps[s].x_t;
    const std::vector<int> steps(static_cast<std::size_t>(b), t);
    GuidedCache<Scalar> cache;
    guided_noise(model.denoiser, policy.adapters, x, steps, cond, uncond, policy.guidance_scale, &cache);
    const bool in_window = t >= window.first;
    const Matrix<Scalar> d_eps = static_cast<Scalar>(mean_noise_coefficient(t, sched)) * g;
    Gradients<Scalar> step_grads;
    step_grads.want_base = false;
    auto back = guided_noise_backward(model.denoiser, policy.adapters, cache, d_eps,
                                      in_window ? &step_grads : &data_only, t < window.last,
                                      in_window && encoder_grads);
    if (in_window) {
      for (const auto& [name, gm] : trainable_gradients(step_grads, target)) grads->add_adapter(name, gm);
      if (encoder_grads)
        for (int i = 0; i < b; ++i) {
          auto add = [&](const std::string& p, const auto& v) {
            auto it = dpooled.find(p);
            if (it == dpooled.end()) dpooled.emplace(p, v);
            else it->second += v;
          };
          add(prompts[static_cast<std::size_t>(i)], back.dcond.col(i));
          add(std::string(), back.duncond.col(i));
        }
    }
    if (t < window.last) g = static_cast<Scalar>(1.0 / std::sqrt(sched.alpha(t))) * g + back.dx;
  }
  if (encoder_grads) {
    Gradients<Scalar> enc_grads;
    enc_grads.want_base = false;
    for (const auto& [p, v] : dpooled) {
      const auto& [z, ecache] = enc.at(p);
      encode_backward(model.encoder, policy.adapters, ecache,
                      pooled_backward<Scalar>(v, z.length, model.encoder.config.max_tokens), &enc_grads);
    }
    for (const auto& [name, gm] : trainable_gradients(enc_grads, target)) grads->add_adapter(name, gm);
  }
  return loss;
}

}  // namespace texforce
