// SPDX-License-Identifier: Apache-2.0
#pragma once

// Flat `key = value` run configuration. Lines starting with '#' are comments;
// unknown keys are rejected.

#include <filesystem>
#include <string>
#include <vector>

#include "texforce/conditioner.hpp"
#include "texforce/denoiser.hpp"
#include "texforce/rewards.hpp"
#include "texforce/rl.hpp"

namespace texforce {

struct RunConfig {
  // schedule
  int diffusion_steps = 50;
  double beta_min = 0.002;
  double beta_max = 0.4;
  double guidance_scale = 3.0;

  // model
  int image_size = 32;
  int max_tokens = 12;
  int encoder_dim = 64;
  int encoder_heads = 4;
  int encoder_blocks = 2;
  int encoder_ff_dim = 128;
  int denoiser_width1 = 16;
  int denoiser_width2 = 32;
  int denoiser_width3 = 64;
  int denoiser_time_dim = 32;
  int denoiser_hidden_dim = 64;

  // pretraining
  int dataset_size = 2000;
  int pretrain_epochs = 20;
  int pretrain_batch = 16;
  double pretrain_learning_rate = 2e-3;
  double uncond_probability = 0.1;
  double ema_decay = 0.999;
  int pretrain_checkpoint_every = 5;

  // adapters
  int lora_rank = 4;
  double lora_alpha = 1.0;

  // policy optimization
  std::string policy = "text_encoder";
  double ppo_clip = 0.1;
  int ppo_epochs = 2;
  int rollouts_per_buffer = 64;
  int minibatch_size = 320;
  double learning_rate = 1e-3;
  double grad_clip_norm = 1.0;
  int total_buffers = 30;
  int micro_batch = 4;
  int checkpoint_every = 5;

  // reward
  std::string reward = "incompressibility";
  double foreground_threshold = 0.15;
  int min_component_area = 8;
  int jpeg_quality = 95;
  double external_timeout = 30.0;

  // prompts and evaluation
  std::string task = "color";
  int eval_samples = 50;
  int sample_count = 16;
  std::string prompt;

  // seeds and paths
  std::uint64_t seed = 0;
  std::string out_dir = "runs/default";
  std::string base_checkpoint;
  std::string fuse_weights;

  void set(const std::string& key, const std::string& value);
  std::string get(const std::string& key) const;
  void validate() const;
  /// Every key with its resolved value, in documentation order.
  std::string to_text() const;
};

struct ConfigKeyInfo {
  std::string name;
  std::string default_value;
  std::string description;
};

/// All recognized keys with defaults and one-line descriptions.
std::vector<ConfigKeyInfo> config_keys();

RunConfig parse_config(const std::string& text, const std::string& source = "<config>");
RunConfig load_config(const std::filesystem::path& path);

EncoderConfig encoder_config(const RunConfig& config, int vocab_size);
DenoiserConfig denoiser_config(const RunConfig& config);
PPOConfig ppo_config(const RunConfig& config);
RewardConfig reward_config(const RunConfig& config);
std::vector<double> parse_weights(const std::string& text);

}  // namespace texforce
