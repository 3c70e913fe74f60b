// SPDX-License-Identifier: Apache-2.0
#include "texforce/rl.hpp"

namespace texforce {

PolicyTarget parse_policy_target(const std::string& name) {
  if (name == "text_encoder" || name == "encoder") return PolicyTarget::text_encoder;
  if (name == "denoiser") return PolicyTarget::denoiser;
  if (name == "both") return PolicyTarget::both;
  throw Error("unknown policy target '" + name + "' (expected text_encoder, denoiser or both)");
}

std::string to_string(PolicyTarget target) {
  switch (target) {
    case PolicyTarget::text_encoder: return "text_encoder";
    case PolicyTarget::denoiser: return "denoiser";
    case PolicyTarget::both: return "both";
  }
  return "?";
}

void PPOConfig::validate() const {
  if (!(clip > 0.0 && clip < 1.0)) throw Error("ppo clip must lie in (0, 1)");
  if (epochs_per_buffer < 1 || rollouts_per_buffer < 1 || minibatch_size < 1 || total_buffers < 1 || micro_batch < 1 ||
      workers < 1)
    throw Error("ppo counts must be >= 1");
  if (!(learning_rate > 0.0)) throw Error("learning rate must be positive");
  if (!(grad_clip_norm > 0.0)) throw Error("grad clip norm must be positive");
}

std::vector<double> normalize_advantages(const std::vector<double>& rewards) {
  std::vector<double> out(rewards.size(), 0.0);
  if (rewards.empty()) return out;
  const double n = static_cast<double>(rewards.size());
  const double mean = std::accumulate(rewards.begin(), rewards.end(), 0.0) / n;
  double var = 0.0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  const double std = std::sqrt(var / n);
  if (std < 1e-8) return out;
  for (std::size_t i = 0; i < rewards.size(); ++i) out[i] = (rewards[i] - mean) / std;
  return out;
}

double ppo_objective(double ratio, double advantage, double clip) {
  const double clipped = std::clamp(ratio, 1.0 - clip, 1.0 + clip);
  return std::min(ratio * advantage, clipped * advantage);
}

double ppo_objective_log_ratio_gradient(double ratio, double advantage, double clip) {
  const double clipped = std::clamp(ratio, 1.0 - clip, 1.0 + clip);
  // The clipped branch is constant in r wherever it is strictly smaller.
  if (clipped * advantage < ratio * advantage) return 0.0;
  return ratio * advantage;
}

}  // namespace texforce
