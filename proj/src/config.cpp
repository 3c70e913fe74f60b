// SPDX-License-Identifier: Apache-2.0
#include "texforce/config.hpp"

#include <charconv>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <variant>

namespace texforce {
namespace {

using Field = std::variant<int RunConfig::*, double RunConfig::*, std::string RunConfig::*,
                           std::uint64_t RunConfig::*>;

struct Entry {
  const char* name;
  Field field;
  const char* description;
};

const std::vector<Entry>& entries() {
  static const std::vector<Entry> table = {
      {"diffusion_steps", &RunConfig::diffusion_steps, "number of diffusion steps T"},
      {"beta_min", &RunConfig::beta_min, "first beta of the linear schedule"},
      {"beta_max", &RunConfig::beta_max, "last beta of the linear schedule"},
      {"guidance_scale", &RunConfig::guidance_scale, "classifier-free guidance scale"},
      {"image_size", &RunConfig::image_size, "image side in pixels (multiple of 4)"},
      {"max_tokens", &RunConfig::max_tokens, "prompt length including BOS/EOS"},
      {"encoder_dim", &RunConfig::encoder_dim, "text encoder width (also the conditioning size)"},
      {"encoder_heads", &RunConfig::encoder_heads, "attention heads per encoder block"},
      {"encoder_blocks", &RunConfig::encoder_blocks, "encoder transformer blocks"},
      {"encoder_ff_dim", &RunConfig::encoder_ff_dim, "encoder feed-forward width"},
      {"denoiser_width1", &RunConfig::denoiser_width1, "denoiser channels at full resolution"},
      {"denoiser_width2", &RunConfig::denoiser_width2, "denoiser channels at 1/2 resolution"},
      {"denoiser_width3", &RunConfig::denoiser_width3, "denoiser channels at 1/4 resolution"},
      {"denoiser_time_dim", &RunConfig::denoiser_time_dim, "sinusoidal timestep feature size"},
      {"denoiser_hidden_dim", &RunConfig::denoiser_hidden_dim, "shared time/prompt embedding size"},
      {"dataset_size", &RunConfig::dataset_size, "toy-world images generated for pretraining"},
      {"pretrain_epochs", &RunConfig::pretrain_epochs, "pretraining passes over the dataset"},
      {"pretrain_batch", &RunConfig::pretrain_batch, "images per pretraining step"},
      {"pretrain_learning_rate", &RunConfig::pretrain_learning_rate, "Adam learning rate for pretraining"},
      {"uncond_probability", &RunConfig::uncond_probability, "caption dropout rate during pretraining"},
      {"ema_decay", &RunConfig::ema_decay, "weight averaging for the saved model (0 disables)"},
      {"pretrain_checkpoint_every", &RunConfig::pretrain_checkpoint_every, "epochs between resumable checkpoints"},
      {"lora_rank", &RunConfig::lora_rank, "adapter rank"},
      {"lora_alpha", &RunConfig::lora_alpha, "adapter scale"},
      {"policy", &RunConfig::policy, "trained adapters: text_encoder, denoiser or both"},
      {"ppo_clip", &RunConfig::ppo_clip, "ratio clip range"},
      {"ppo_epochs", &RunConfig::ppo_epochs, "update passes per rollout buffer"},
      {"rollouts_per_buffer", &RunConfig::rollouts_per_buffer, "trajectories per buffer"},
      {"minibatch_size", &RunConfig::minibatch_size, "timestep samples per optimizer step"},
      {"learning_rate", &RunConfig::learning_rate, "Adam learning rate for adapters"},
      {"grad_clip_norm", &RunConfig::grad_clip_norm, "global gradient norm limit"},
      {"total_buffers", &RunConfig::total_buffers, "rollout buffers per run"},
      {"micro_batch", &RunConfig::micro_batch, "samples per network evaluation"},
      {"checkpoint_every", &RunConfig::checkpoint_every, "buffers between resumable checkpoints"},
      {"reward", &RunConfig::reward,
       "incompressibility, compressibility, color, count, composition, location or external:<command>"},
      {"foreground_threshold", &RunConfig::foreground_threshold, "per-channel distance from the background"},
      {"min_component_area", &RunConfig::min_component_area, "smallest counted object in pixels"},
      {"jpeg_quality", &RunConfig::jpeg_quality, "JPEG quality for the compression rewards"},
      {"external_timeout", &RunConfig::external_timeout, "external scorer timeout in seconds"},
      {"task", &RunConfig::task, "prompt set: color, count, composition or location"},
      {"eval_samples", &RunConfig::eval_samples, "samples per prompt in eval"},
      {"sample_count", &RunConfig::sample_count, "images drawn by sample"},
      {"prompt", &RunConfig::prompt, "prompt for sample (empty: the task's seen prompts)"},
      {"seed", &RunConfig::seed, "master seed"},
      {"out_dir", &RunConfig::out_dir, "output directory"},
      {"base_checkpoint", &RunConfig::base_checkpoint, "pretrained model (rl-finetune, sample, eval)"},
      {"fuse_weights", &RunConfig::fuse_weights, "comma-separated weights for fuse"},
  };
  return table;
}

const Entry& find_entry(const std::string& key) {
  for (const auto& e : entries())
    if (key == e.name) return e;
  throw Error("unknown config key '" + key + "'");
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& value) {
  T out{};
  const char* end = value.data() + value.size();
  auto [ptr, ec] = std::from_chars(value.data(), end, out);
  if (ec != std::errc() || ptr != end) throw Error("config key '" + key + "': cannot parse '" + value + "'");
  return out;
}

std::string format_double(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

}  // namespace

void RunConfig::set(const std::string& key, const std::string& value) {
  const Entry& e = find_entry(key);
  std::visit(
      [&](auto member) {
        using T = std::remove_reference_t<decltype(this->*member)>;
        if constexpr (std::is_same_v<T, std::string>) this->*member = value;
        else this->*member = parse_number<T>(key, value);
      },
      e.field);
}

std::string RunConfig::get(const std::string& key) const {
  const Entry& e = find_entry(key);
  return std::visit(
      [&](auto member) -> std::string {
        using T = std::remove_cv_t<std::remove_reference_t<decltype(this->*member)>>;
        if constexpr (std::is_same_v<T, std::string>) return this->*member;
        else if constexpr (std::is_same_v<T, double>) return format_double(this->*member);
        else return std::to_string(this->*member);
      },
      e.field);
}

void RunConfig::validate() const {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw Error("invalid config: " + what);
  };
  require(diffusion_steps >= 1, "diffusion_steps >= 1");
  require(beta_min > 0 && beta_max < 1 && beta_min <= beta_max, "0 < beta_min <= beta_max < 1");
  require(image_size >= 4 && image_size % 4 == 0, "image_size must be a positive multiple of 4");
  require(max_tokens >= 3, "max_tokens >= 3");
  require(encoder_dim >= 1 && encoder_heads >= 1 && encoder_dim % encoder_heads == 0,
          "encoder_dim must be divisible by encoder_heads");
  require(encoder_blocks >= 1 && encoder_ff_dim >= 1, "encoder sizes >= 1");
  require(denoiser_width1 >= 1 && denoiser_width2 >= 1 && denoiser_width3 >= 1 && denoiser_hidden_dim >= 1,
          "denoiser widths >= 1");
  require(denoiser_time_dim >= 2 && denoiser_time_dim % 2 == 0, "denoiser_time_dim must be even");
  require(dataset_size >= 0 && pretrain_epochs >= 1 && pretrain_batch >= 1, "pretraining counts");
  require(pretrain_learning_rate > 0, "pretrain_learning_rate > 0");
  require(uncond_probability >= 0 && uncond_probability <= 1, "uncond_probability in [0, 1]");
  require(ema_decay >= 0 && ema_decay < 1, "ema_decay in [0, 1)");
  require(pretrain_checkpoint_every >= 1 && checkpoint_every >= 1, "checkpoint intervals >= 1");
  require(lora_rank >= 1, "lora_rank >= 1");
  require(eval_samples >= 1 && sample_count >= 1, "sample counts >= 1");
  require(jpeg_quality >= 1 && jpeg_quality <= 100, "jpeg_quality in [1, 100]");
  require(external_timeout > 0, "external_timeout > 0");
  parse_task(task);
  ppo_config(*this).validate();
}

std::string RunConfig::to_text() const {
  std::ostringstream os;
  for (const auto& e : entries()) os << e.name << " = " << get(e.name) << "\n";
  return os.str();
}

std::vector<ConfigKeyInfo> config_keys() {
  const RunConfig defaults;
  std::vector<ConfigKeyInfo> out;
  for (const auto& e : entries()) out.push_back({e.name, defaults.get(e.name), e.description});
  return out;
}

RunConfig parse_config(const std::string& text, const std::string& source) {
  RunConfig config;
  std::istringstream in(text);
  std::string line;
  int number = 0;
  while (std::getline(in, line)) {
    ++number;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw Error(source + ":" + std::to_string(number) + ": expected 'key = value'");
    try {
      config.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    } catch (const Error& e) {
      throw Error(source + ":" + std::to_string(number) + ": " + e.what());
    }
  }
  return config;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read config " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return parse_config(os.str(), path.string());
}

EncoderConfig encoder_config(const RunConfig& c, int vocab_size) {
  EncoderConfig e;
  e.vocab_size = vocab_size;
  e.max_tokens = c.max_tokens;
  e.embed_dim = c.encoder_dim;
  e.heads = c.encoder_heads;
  e.blocks = c.encoder_blocks;
  e.ff_dim = c.encoder_ff_dim;
  return e;
}

DenoiserConfig denoiser_config(const RunConfig& c) {
  DenoiserConfig d;
  d.image_size = c.image_size;
  d.width1 = c.denoiser_width1;
  d.width2 = c.denoiser_width2;
  d.width3 = c.denoiser_width3;
  d.cond_dim = c.encoder_dim;
  d.time_dim = c.denoiser_time_dim;
  d.hidden_dim = c.denoiser_hidden_dim;
  return d;
}

PPOConfig ppo_config(const RunConfig& c) {
  PPOConfig p;
  p.clip = c.ppo_clip;
  p.epochs_per_buffer = c.ppo_epochs;
  p.rollouts_per_buffer = c.rollouts_per_buffer;
  p.minibatch_size = c.minibatch_size;
  p.learning_rate = c.learning_rate;
  p.policy_target = parse_policy_target(c.policy);
  p.grad_clip_norm = c.grad_clip_norm;
  p.total_buffers = c.total_buffers;
  p.guidance_scale = c.guidance_scale;
  p.micro_batch = c.micro_batch;
  return p;
}

RewardConfig reward_config(const RunConfig& c) {
  RewardConfig r;
  r.foreground_threshold = static_cast<float>(c.foreground_threshold);
  r.min_component_area = c.min_component_area;
  r.jpeg_quality = c.jpeg_quality;
  r.external_timeout_seconds = c.external_timeout;
  return r;
}

std::vector<double> parse_weights(const std::string& text) {
  std::vector<double> out;
  std::istringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    item = trim(item);
    if (item.empty()) continue;
    out.push_back(parse_number<double>("fuse_weights", item));
  }
  return out;
}

}  // namespace texforce
