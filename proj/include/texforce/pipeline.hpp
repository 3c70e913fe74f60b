// SPDX-License-Identifier: Apache-2.0
#pragma once

// Command implementations shared by the CLI and the acceptance runs. Each
// command writes into its own output directory: the resolved config, its
// artifacts, and a manifest of input and artifact hashes.

#include <filesystem>
#include <ostream>
#include <string>
#include <vector>

#include "texforce/config.hpp"
#include "texforce/diffusion.hpp"
#include "texforce/rl.hpp"

namespace texforce {

namespace fs = std::filesystem;

/// Keeps large activation buffers in the heap instead of fresh mappings.
void tune_allocator();

/// Worker count from TEXFORCE_WORKERS (default 1).
int workers_from_environment();

/// 64-bit FNV-1a of a file's bytes, as 16 hex digits.
std::string file_hash(const fs::path& path);

DiffusionModel<float> build_model(const RunConfig& config, Rng& rng);
/// Loads the weights of a pretrained checkpoint; the schedule comes from `config`.
DiffusionModel<float> load_model(const RunConfig& config, const fs::path& checkpoint);

std::vector<std::string> policy_layers(const DiffusionModel<float>& model, PolicyTarget target);

/// Reward used to judge prompts of a capability task (color -> color_consistency, ...).
std::string task_reward_name(Task task);

struct PretrainReport {
  std::vector<double> epoch_losses;  // mean per-sample loss of each epoch
  double initial_loss = 0.0;         // mean over the first steps of epoch 0
  fs::path checkpoint;
};

PretrainReport run_pretrain(const RunConfig& config, std::ostream& log);

struct RlReport {
  std::vector<double> mean_rewards;  // per buffer
  std::vector<fs::path> adapter_files;
};

RlReport run_rl_finetune(const RunConfig& config, std::ostream& log, int workers = 1);

/// Loads the given adapter files and attaches them together; adapters for
/// the same layer in two files are rejected.
AdapterSet<float> load_adapter_files(const std::vector<fs::path>& files, const DiffusionModel<float>& model,
                                     std::ostream* log = nullptr);

void run_sample(const RunConfig& config, const std::vector<fs::path>& adapters, std::ostream& log, int workers = 1);

struct EvalVariant {
  std::string name;
  std::vector<fs::path> adapters;
};

struct EvalRow {
  std::string variant;
  std::string split;
  std::string reward;
  double mean = 0.0;
  double std = 0.0;
  int count = 0;
};

/// Scores `eval_samples` images per prompt of the task's seen and unseen
/// splits. Every variant uses the same seeds, so comparisons are paired.
std::vector<EvalRow> run_eval(const RunConfig& config, const std::vector<EvalVariant>& variants, std::ostream& log,
                              int workers = 1);

/// Default variants for a list of adapter files: base, each file alone, and
/// all files combined when there is more than one.
std::vector<EvalVariant> default_variants(const std::vector<fs::path>& adapters);

void run_fuse(const RunConfig& config, const std::vector<fs::path>& inputs, const std::vector<double>& weights,
              std::ostream& log);

}  // namespace texforce
