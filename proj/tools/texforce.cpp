// SPDX-License-Identifier: Apache-2.0
// texforce pretrain|rl-finetune|sample|eval|fuse --config PATH [options]

#include <iostream>

#include <CLI11.hpp>

#include "texforce/pipeline.hpp"

using namespace texforce;

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"Text-conditioned toy diffusion with policy-gradient adapter finetuning"};
  app.require_subcommand(1);

  std::string config_path;
  std::uint64_t seed = 0;
  std::string out, policy, reward, checkpoint, task, prompt, weights;
  std::vector<std::string> adapters, overrides;

  auto common = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "run config (key = value lines)");
    cmd->add_option("--seed", seed, "master seed");
    cmd->add_option("--out", out, "output directory");
    cmd->add_option("--set", overrides, "extra key=value config overrides");
  };
  auto* pretrain = app.add_subcommand("pretrain", "train the base denoiser on toy-world images");
  auto* finetune = app.add_subcommand("rl-finetune", "optimize adapters against a reward");
  auto* sample = app.add_subcommand("sample", "draw an image grid with per-image rewards");
  auto* eval = app.add_subcommand("eval", "score seen and unseen prompts per model variant");
  auto* fuse_cmd = app.add_subcommand("fuse", "weighted sum of adapter files");
  auto* keys = app.add_subcommand("config-keys", "list config keys with defaults");
  for (auto* c : {pretrain, finetune, sample, eval, fuse_cmd}) common(c);
  for (auto* c : {finetune, sample, eval}) {
    c->add_option("--checkpoint", checkpoint, "pretrained base checkpoint");
    c->add_option("--reward", reward, "reward name");
    c->add_option("--task", task, "prompt task");
  }
  finetune->add_option("--policy", policy, "text_encoder | denoiser | both");
  for (auto* c : {sample, eval, fuse_cmd}) c->add_option("--adapters", adapters, "adapter files");
  sample->add_option("--prompt", prompt, "prompt to sample");
  fuse_cmd->add_option("--weights", weights, "comma-separated weights, one per adapter file");

  CLI11_PARSE(app, argc, argv);

  try {
    if (keys->parsed()) {
      for (const auto& k : config_keys()) std::cout << k.name << " = " << k.default_value << "  # " << k.description << "\n";
      return 0;
    }
    RunConfig config = config_path.empty() ? RunConfig{} : load_config(config_path);
    for (const auto& kv : overrides) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw Error("--set expects key=value, got '" + kv + "'");
      config.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
    auto* cmd = app.get_subcommands().front();
    if (cmd->count("--seed")) config.seed = seed;
    if (!out.empty()) config.out_dir = out;
    if (!policy.empty()) config.policy = policy;
    if (!reward.empty()) config.reward = reward;
    if (!checkpoint.empty()) config.base_checkpoint = checkpoint;
    if (!task.empty()) config.task = task;
    if (!prompt.empty()) config.prompt = prompt;
    if (!weights.empty()) config.fuse_weights = weights;
    config.validate();
    const int workers = workers_from_environment();
    std::vector<fs::path> files(adapters.begin(), adapters.end());

    if (pretrain->parsed()) {
      const auto r = run_pretrain(config, std::cout);
      std::cout << "checkpoint " << r.checkpoint.string() << "\n";
    } else if (finetune->parsed()) {
      const auto r = run_rl_finetune(config, std::cout, workers);
      for (const auto& f : r.adapter_files) std::cout << "adapters " << f.string() << "\n";
    } else if (sample->parsed()) {
      run_sample(config, files, std::cout, workers);
    } else if (eval->parsed()) {
      run_eval(config, default_variants(files), std::cout, workers);
    } else if (fuse_cmd->parsed()) {
      run_fuse(config, files, parse_weights(config.fuse_weights), std::cout);
    }
  } catch (const std::exception& e) {
    std::cerr << "texforce: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
