// SPDX-License-Identifier: Apache-2.0
#include "texforce/pipeline.hpp"

#include <malloc.h>

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "texforce/checkpoint.hpp"
#include "texforce/optim.hpp"
#include "texforce/toy_world.hpp"

namespace texforce {
namespace {

using json = nlohmann::ordered_json;
using Clock = std::chrono::steady_clock;

std::string hex(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

void write_text(const fs::path& path, const std::string& text) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw Error("cannot write " + path.string());
    out << text;
    if (!out) throw Error("write failed for " + path.string());
  }
  fs::rename(tmp, path);
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

/// Records what a command read and wrote.
class Manifest {
 public:
  Manifest(std::string command, const RunConfig& config) : command_(std::move(command)), config_(config) {}

  void input(const fs::path& path) { inputs_[path.string()] = file_hash(path); }
  void artifact(const fs::path& path) { artifacts_[fs::relative(path, config_.out_dir).string()] = file_hash(path); }
  void note(const std::string& key, const std::string& value) { notes_[key] = value; }

  void write() const {
    json j;
    j["command"] = command_;
    j["config"] = json::object();
    for (const auto& k : config_keys()) j["config"][k.name] = config_.get(k.name);
    j["inputs"] = inputs_;
    j["artifacts"] = artifacts_;
    if (!notes_.empty()) j["notes"] = notes_;
    write_text(fs::path(config_.out_dir) / "manifest.json", j.dump(2) + "\n");
  }

 private:
  std::string command_;
  const RunConfig& config_;
  std::map<std::string, std::string> inputs_, artifacts_, notes_;
};

/// Creates the output directory and echoes the resolved config into it.
void prepare_output(const RunConfig& config) {
  fs::create_directories(config.out_dir);
  write_text(fs::path(config.out_dir) / "config.resolved", config.to_text());
}

fs::path require_checkpoint(const RunConfig& config) {
  if (config.base_checkpoint.empty()) throw Error("base_checkpoint is not set");
  if (!fs::exists(config.base_checkpoint)) throw Error("base checkpoint not found: " + config.base_checkpoint);
  return config.base_checkpoint;
}

double elapsed(Clock::time_point since) { return std::chrono::duration<double>(Clock::now() - since).count(); }

AdapterSet<float> subset(const AdapterSet<float>& set, const std::string& prefix) {
  AdapterSet<float> out;
  out.metadata = set.metadata;
  for (const auto& [layer, a] : set.layers)
    if (layer.rfind(prefix, 0) == 0) out.layers.emplace(layer, a);
  return out;
}

}  // namespace

void tune_allocator() {
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
}

int workers_from_environment() {
  const char* v = std::getenv("TEXFORCE_WORKERS");
  if (!v || !*v) return 1;
  char* end = nullptr;
  const long n = std::strtol(v, &end, 10);
  if (*end != '\0' || n < 1) throw Error(std::string("TEXFORCE_WORKERS must be a positive integer, got '") + v + "'");
  return static_cast<int>(n);
}

std::string file_hash(const fs::path& path) {
  const std::string bytes = read_text(path);
  return hex(fnv1a(bytes.data(), bytes.size()));
}

DiffusionModel<float> build_model(const RunConfig& config, Rng& rng) {
  config.validate();
  DiffusionModel<float> model;
  model.encoder = init_encoder<float>(encoder_config(config, model.vocab.size()), rng);
  model.denoiser = init_denoiser<float>(denoiser_config(config), rng);
  model.schedule = build_schedule(config.diffusion_steps, config.beta_min, config.beta_max);
  return model;
}

DiffusionModel<float> load_model(const RunConfig& config, const fs::path& checkpoint) {
  DiffusionModel<float> model;
  restore_model(model, load_checkpoint(checkpoint));
  if (model.denoiser.config.image_size != config.image_size)
    throw Error("checkpoint image size " + std::to_string(model.denoiser.config.image_size) +
                " differs from config image_size " + std::to_string(config.image_size));
  model.schedule = build_schedule(config.diffusion_steps, config.beta_min, config.beta_max);
  return model;
}

std::vector<std::string> policy_layers(const DiffusionModel<float>& model, PolicyTarget target) {
  std::vector<std::string> layers;
  if (targets_encoder(target)) layers = encoder_linear_layers(model.encoder.config);
  if (targets_denoiser(target))
    for (const auto& l : denoiser_lora_layers()) layers.push_back(l);
  return layers;
}

std::string task_reward_name(Task task) {
  switch (task) {
    case Task::color: return "color";
    case Task::count: return "count";
    case Task::composition: return "composition";
    case Task::location: return "location";
  }
  return "color";
}

// ---------------------------------------------------------------- pretrain

/// Doubles kept in the float32 state container as (hi, lo) rows.
Matrix<float> pack_doubles(const std::vector<double>& values) {
  Matrix<float> m(2, static_cast<Eigen::Index>(values.size()));
  for (std::size_t i = 0; i < values.size(); ++i) {
    const auto j = static_cast<Eigen::Index>(i);
    m(0, j) = static_cast<float>(values[i]);
    m(1, j) = static_cast<float>(values[i] - static_cast<double>(m(0, j)));
  }
  return m;
}

std::vector<double> unpack_doubles(const Matrix<float>& m) {
  if (m.rows() != 2) throw Error("malformed packed values in resume state");
  std::vector<double> out;
  for (Eigen::Index j = 0; j < m.cols(); ++j) out.push_back(static_cast<double>(m(0, j)) + static_cast<double>(m(1, j)));
  return out;
}

PretrainReport run_pretrain(const RunConfig& config, std::ostream& log) {
  config.validate();
  if (config.dataset_size < 1) throw Error("pretraining needs a non-empty dataset (dataset_size >= 1)");
  prepare_output(config);
  const fs::path out(config.out_dir);
  Manifest manifest("pretrain", config);

  const auto data = make_dataset(config.dataset_size, config.seed, config.image_size);
  Rng init_rng(derive_seed(config.seed, 2));
  DiffusionModel<float> model = build_model(config, init_rng);
  typename Adam<float>::Options options;
  options.learning_rate = config.pretrain_learning_rate;
  Adam<float> adam(options);

  const int n = static_cast<int>(data.size());
  const int steps_per_epoch = (n + config.pretrain_batch - 1) / config.pretrain_batch;
  const long long total_steps = static_cast<long long>(steps_per_epoch) * config.pretrain_epochs;
  const fs::path state_path = out / "pretrain_state.ckpt";

  PretrainReport report;
  int start_epoch = 0;
  if (fs::exists(state_path)) {
    const auto state = load_checkpoint(state_path);
    restore_model(model, state);
    adam.load_state(state);
    start_epoch = static_cast<int>(state.at("pretrain.epoch")(0, 0));
    report.epoch_losses = unpack_doubles(state.at("pretrain.losses"));
    report.initial_loss = unpack_doubles(state.at("pretrain.initial_loss")).at(0);
    log << "resuming pretraining at epoch " << start_epoch << "\n";
  }

  // Exponential moving average of the denoiser weights; the saved model uses it.
  ParameterMap<float> ema = model.denoiser.params;
  long long ema_updates = 0;
  auto ema_name = [](const std::string& k) { return "ema." + k; };
  if (fs::exists(state_path)) {
    const auto state = load_checkpoint(state_path);
    for (auto& [k, v] : ema) v = state.at(ema_name(k));
    ema_updates = static_cast<long long>(state.at("pretrain.ema_updates")(0, 0));
  }
  std::map<std::string, Vector<float>> embeddings;  // the encoder is frozen
  auto params = parameter_pointers(model.denoiser.params);
  std::ofstream timing(out / "timing.tsv", start_epoch ? std::ios::app : std::ios::trunc);
  for (int epoch = start_epoch; epoch < config.pretrain_epochs; ++epoch) {
    const auto t0 = Clock::now();
    std::vector<int> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle_rng(derive_seed(config.seed, 20, static_cast<std::uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double loss_sum = 0.0, first_sum = 0.0;
    int first_count = 0;
    for (int step = 0; step < steps_per_epoch; ++step) {
      std::vector<TrainingExample> batch;
      for (int i = step * config.pretrain_batch; i < std::min(n, (step + 1) * config.pretrain_batch); ++i) {
        const auto& item = data[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])];
        batch.push_back({&item.image, item.caption});
      }
      const long long global = static_cast<long long>(epoch) * steps_per_epoch + step;
      // cosine decay to 10% of the base rate
      const double progress = static_cast<double>(global) / static_cast<double>(std::max(1LL, total_steps));
      adam.set_learning_rate(config.pretrain_learning_rate *
                             (0.1 + 0.45 * (1.0 + std::cos(std::numbers::pi * progress))));
      Rng rng(derive_seed(derive_seed(config.seed, 21, static_cast<std::uint64_t>(epoch)), 0,
                          static_cast<std::uint64_t>(step)));
      Gradients<float> grads;
      grads.want_adapters = false;
      const double loss = pretrain_step(model, batch, rng, &grads, config.uncond_probability, &embeddings);
      if (!std::isfinite(loss)) throw Error("pretraining loss is not finite at epoch " + std::to_string(epoch));
      adam.step(params, grads.base);
      ++ema_updates;
      const float decay = static_cast<float>(
          std::min(config.ema_decay, (1.0 + static_cast<double>(ema_updates)) / (10.0 + static_cast<double>(ema_updates))));
      for (auto& [k, v] : ema) v = decay * v + (1.0f - decay) * model.denoiser.params.at(k);
      loss_sum += loss * static_cast<double>(batch.size());
      if (epoch == 0 && step < 10) {
        first_sum += loss;
        ++first_count;
      }
    }
    if (epoch == 0) report.initial_loss = first_sum / first_count;
    report.epoch_losses.push_back(loss_sum / n);
    log << "epoch " << epoch << " loss " << report.epoch_losses.back() << "\n";
    timing << epoch << "\t" << elapsed(t0) << std::endl;
    log.flush();

    if ((epoch + 1) % config.pretrain_checkpoint_every == 0 && epoch + 1 < config.pretrain_epochs) {
      auto state = model_tensors(model);
      for (auto& [k, v] : adam.state()) state.emplace(k, std::move(v));
      state["pretrain.epoch"] = Matrix<float>::Constant(1, 1, static_cast<float>(epoch + 1));
      state["pretrain.losses"] = pack_doubles(report.epoch_losses);
      state["pretrain.initial_loss"] = pack_doubles({report.initial_loss});
      for (const auto& [k, v] : ema) state[ema_name(k)] = v;
      state["pretrain.ema_updates"] = Matrix<float>::Constant(1, 1, static_cast<float>(ema_updates));
      save_checkpoint(state, state_path);
    }
  }

  std::ostringstream curve;
  curve << "epoch\tloss\n";
  for (std::size_t i = 0; i < report.epoch_losses.size(); ++i) curve << i << "\t" << report.epoch_losses[i] << "\n";
  write_text(out / "loss.tsv", curve.str());
  report.checkpoint = out / "base.ckpt";
  if (config.ema_decay > 0.0) model.denoiser.params = ema;
  save_checkpoint(model_tensors(model), report.checkpoint);
  if (fs::exists(state_path)) fs::remove(state_path);
  manifest.note("initial_loss", std::to_string(report.initial_loss));
  manifest.artifact(out / "loss.tsv");
  manifest.artifact(report.checkpoint);
  manifest.write();
  return report;
}

// ---------------------------------------------------------------- rl-finetune

RlReport run_rl_finetune(const RunConfig& config, std::ostream& log, int workers) {
  config.validate();
  const fs::path checkpoint = require_checkpoint(config);
  prepare_output(config);
  const fs::path out(config.out_dir);
  Manifest manifest("rl-finetune", config);
  manifest.input(checkpoint);

  const DiffusionModel<float> model = load_model(config, checkpoint);
  PPOConfig ppo = ppo_config(config);
  ppo.workers = workers;
  const Task task = parse_task(config.task);
  const auto prompts = prompt_splits(task).seen;
  const RewardSpec reward = make_reward(config.reward, reward_config(config));

  Rng adapter_rng(derive_seed(config.seed, 3));
  ParameterMap<float> base = model.encoder.params;
  for (const auto& [k, v] : model.denoiser.params) base.emplace(k, v);
  AdapterSet<float> adapters =
      make_adapter_set(base, policy_layers(model, ppo.policy_target), config.lora_rank, config.lora_alpha, adapter_rng);
  adapters.metadata = {{"task", config.task},
                       {"reward", config.reward},
                       {"rank", std::to_string(config.lora_rank)},
                       {"seed", std::to_string(config.seed)}};
  const std::uint64_t frozen_before = checksum(model.denoiser.params) ^ checksum(model.encoder.params);

  PpoTrainer<float> trainer(model, adapters, ppo);
  const fs::path state_path = out / "rl_state.ckpt";
  const fs::path metrics_path = out / "metrics.jsonl";
  int start = 0;
  std::vector<std::string> rows;
  RlReport report;
  if (fs::exists(state_path)) {
    const auto state = load_checkpoint(state_path);
    for (auto& [layer, a] : adapters.layers) {
      a.A = state.at("lora." + layer + ".A");
      a.B = state.at("lora." + layer + ".B");
    }
    trainer.optimizer().load_state(state);
    start = static_cast<int>(state.at("rl.buffer")(0, 0));
    std::istringstream in(read_text(metrics_path));
    std::string line;
    while (static_cast<int>(rows.size()) < start && std::getline(in, line)) {
      rows.push_back(line);
      report.mean_rewards.push_back(json::parse(line).at("mean_reward").get<double>());
    }
    if (static_cast<int>(rows.size()) != start) throw Error("metrics file shorter than the resume checkpoint");
    log << "resuming rl-finetune at buffer " << start << "\n";
  }
  auto flush_metrics = [&] {
    std::string text;
    for (const auto& r : rows) text += r + "\n";
    write_text(metrics_path, text);
  };
  std::ofstream timing(out / "timing.tsv", start ? std::ios::app : std::ios::trunc);

  for (int b = start; b < ppo.total_buffers; ++b) {
    const auto t0 = Clock::now();
    const Policy<float> policy{model, &adapters, ppo.guidance_scale};
    const auto buffer = collect_rollouts(policy, prompts, reward, ppo.rollouts_per_buffer,
                                         derive_seed(config.seed, 5, static_cast<std::uint64_t>(b)), ppo.micro_batch,
                                         workers);
    const double sample_seconds = elapsed(t0);
    Rng rng(derive_seed(config.seed, 6, static_cast<std::uint64_t>(b)));
    json row;
    row["buffer"] = b;
    row["mean_reward"] = buffer.mean_reward;
    row["std_reward"] = buffer.std_reward;
    row["invalid"] = buffer.invalid;
    const auto snapshot = adapters;
    const auto adam_snapshot = trainer.optimizer().state();
    try {
      const auto stats = trainer.update(buffer, rng);
      const auto& last = stats.back();
      row["clip_fraction"] = last.clip_fraction;
      row["mean_ratio"] = last.mean_ratio;
      row["policy_loss"] = last.policy_loss;
      row["grad_norm"] = last.grad_norm;
      row["skipped"] = last.skipped;
      row["first_max_ratio_deviation"] = stats.front().first_max_ratio_deviation;
      row["first_clip_fraction"] = stats.front().first_clip_fraction;
      json epochs = json::array();
      for (const auto& s : stats)
        epochs.push_back({{"clip_fraction", s.clip_fraction},
                          {"mean_ratio", s.mean_ratio},
                          {"policy_loss", s.policy_loss},
                          {"grad_norm", s.grad_norm}});
      row["epochs"] = epochs;
    } catch (const NonFiniteUpdate& e) {
      adapters = snapshot;
      trainer.optimizer().load_state(adam_snapshot);
      json diag;
      diag["buffer"] = b;
      diag["error"] = e.what();
      diag["rewards"] = json::array();
      for (const auto& tr : buffer.trajectories) diag["rewards"].push_back(tr.reward);
      diag["adapter_checksum"] = hex(checksum(adapters.parameters()));
      write_text(out / ("diagnostics_buffer" + std::to_string(b) + ".json"), diag.dump(2) + "\n");
      row["aborted"] = true;
      log << "buffer " << b << " aborted: " << e.what() << "\n";
    }
    rows.push_back(row.dump());
    report.mean_rewards.push_back(buffer.mean_reward);
    flush_metrics();
    timing << b << "\t" << sample_seconds << "\t" << elapsed(t0) << std::endl;
    log << "buffer " << b << " reward " << buffer.mean_reward << " +- " << buffer.std_reward << std::endl;

    if ((b + 1) % config.checkpoint_every == 0 && b + 1 < ppo.total_buffers) {
      ParameterMap<float> state = trainer.optimizer().state();
      for (const auto& [layer, a] : adapters.layers) {
        state["lora." + layer + ".A"] = a.A;
        state["lora." + layer + ".B"] = a.B;
      }
      state["rl.buffer"] = Matrix<float>::Constant(1, 1, static_cast<float>(b + 1));
      save_checkpoint(state, state_path);
    }
  }

  if (checksum(model.denoiser.params) ^ checksum(model.encoder.params) ^ frozen_before)
    throw Error("base weights changed during policy optimization");
  if (targets_encoder(ppo.policy_target)) {
    auto set = subset(adapters, "encoder.");
    set.metadata["target"] = "text_encoder";
    report.adapter_files.push_back(out / "encoder.lora");
    save_adapters(set, report.adapter_files.back());
  }
  if (targets_denoiser(ppo.policy_target)) {
    auto set = subset(adapters, "denoiser.");
    set.metadata["target"] = "denoiser";
    report.adapter_files.push_back(out / "denoiser.lora");
    save_adapters(set, report.adapter_files.back());
  }
  if (fs::exists(state_path)) fs::remove(state_path);
  manifest.note("base_checksum", hex(frozen_before));
  manifest.artifact(metrics_path);
  for (const auto& f : report.adapter_files) manifest.artifact(f);
  manifest.write();
  return report;
}

// ---------------------------------------------------------------- sample / eval

AdapterSet<float> load_adapter_files(const std::vector<fs::path>& files, const DiffusionModel<float>& model,
                                     std::ostream* log) {
  std::vector<AdapterSet<float>> sets;
  ParameterMap<float> all = model.encoder.params;
  for (const auto& [k, v] : model.denoiser.params) all.emplace(k, v);
  for (const auto& f : files) {
    sets.push_back(load_adapters(f));
    check_compatible(all, sets.back());
    if (log) {
      auto target = sets.back().metadata.find("target");
      *log << "attached " << f.string() << " (" << sets.back().layers.size() << " layers, target "
           << (target == sets.back().metadata.end() ? std::string("unspecified") : target->second) << ")\n";
    }
  }
  return combine(sets);
}

namespace {

/// Samples the clamped images for (prompt, seed) pairs in fixed chunks.
std::vector<Image> sample_images(const Policy<float>& policy, const std::vector<std::string>& prompts,
                                 const std::vector<std::uint64_t>& seeds, int micro_batch, int workers) {
  const int n = static_cast<int>(prompts.size());
  std::vector<Image> images(static_cast<std::size_t>(n));
  const int chunk = std::max(1, micro_batch);
  const int size = policy.model.denoiser.config.image_size;
  detail::parallel_chunks((n + chunk - 1) / chunk, workers, [&](int c) {
    const int begin = c * chunk, end = std::min(n, begin + chunk);
    const std::vector<std::string> ps(prompts.begin() + begin, prompts.begin() + end);
    const std::vector<std::uint64_t> ss(seeds.begin() + begin, seeds.begin() + end);
    auto tr = sample_trajectories(policy, ps, ss, false);
    for (int i = begin; i < end; ++i)
      images[static_cast<std::size_t>(i)] = tensor_to_image(tr[static_cast<std::size_t>(i - begin)].x0, size, true);
  });
  return images;
}

std::string score_text(const RewardSpec& reward, const Image& image, const std::string& prompt) {
  try {
    std::ostringstream os;
    os << std::setprecision(10) << reward(image, prompt);
    return os.str();
  } catch (const Error& e) {
    return "error";
  }
}

}  // namespace

void run_sample(const RunConfig& config, const std::vector<fs::path>& adapter_files, std::ostream& log,
                int workers) {
  config.validate();
  const fs::path checkpoint = require_checkpoint(config);
  prepare_output(config);
  const fs::path out(config.out_dir);
  Manifest manifest("sample", config);
  manifest.input(checkpoint);
  for (const auto& f : adapter_files) manifest.input(f);

  const DiffusionModel<float> model = load_model(config, checkpoint);
  const AdapterSet<float> adapters = load_adapter_files(adapter_files, model, &log);
  const Policy<float> policy{model, adapters.empty() ? nullptr : &adapters, config.guidance_scale};

  const auto pool = config.prompt.empty() ? prompt_splits(parse_task(config.task)).seen
                                          : std::vector<std::string>{config.prompt};
  std::vector<std::string> prompts;
  std::vector<std::uint64_t> seeds;
  for (int i = 0; i < config.sample_count; ++i) {
    prompts.push_back(pool[static_cast<std::size_t>(i) % pool.size()]);
    seeds.push_back(derive_seed(config.seed, 41, static_cast<std::uint64_t>(i)));
  }
  const auto images = sample_images(policy, prompts, seeds, config.micro_batch, workers);

  const RewardConfig rc = reward_config(config);
  const RewardSpec primary = make_reward(config.reward, rc);
  const RewardSpec oracle = make_reward(task_reward_name(parse_task(config.task)), rc);
  std::ostringstream table;
  table << "index\tprompt\t" << primary.name << "\t" << oracle.name << "\n";
  for (std::size_t i = 0; i < images.size(); ++i)
    table << i << "\t" << prompts[i] << "\t" << score_text(primary, images[i], prompts[i]) << "\t"
          << score_text(oracle, images[i], prompts[i]) << "\n";
  write_text(out / "rewards.tsv", table.str());
  const int columns = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(images.size()))));
  write_png(make_grid(images, columns), out / "grid.png");
  manifest.artifact(out / "rewards.tsv");
  manifest.artifact(out / "grid.png");
  manifest.write();
  log << "wrote " << images.size() << " samples to " << out.string() << "\n";
}

std::vector<EvalVariant> default_variants(const std::vector<fs::path>& adapters) {
  std::vector<EvalVariant> out{{"base", {}}};
  for (const auto& f : adapters) out.push_back({f.stem().string(), {f}});
  if (adapters.size() > 1) out.push_back({"combined", adapters});
  return out;
}

std::vector<EvalRow> run_eval(const RunConfig& config, const std::vector<EvalVariant>& variants, std::ostream& log,
                              int workers) {
  config.validate();
  const fs::path checkpoint = require_checkpoint(config);
  prepare_output(config);
  const fs::path out(config.out_dir);
  Manifest manifest("eval", config);
  manifest.input(checkpoint);
  const DiffusionModel<float> model = load_model(config, checkpoint);

  const Task task = parse_task(config.task);
  const auto splits = prompt_splits(task);
  const RewardConfig rc = reward_config(config);
  std::vector<RewardSpec> rewards{make_reward(task_reward_name(task), rc)};
  if (config.reward != rewards.front().name) rewards.push_back(make_reward(config.reward, rc));

  std::vector<EvalRow> rows;
  std::ostringstream samples;
  samples << "variant\tsplit\tprompt\tsample";
  for (const auto& r : rewards) samples << "\t" << r.name;
  samples << "\n";
  for (const auto& variant : variants) {
    for (const auto& f : variant.adapters) manifest.input(f);
    const AdapterSet<float> adapters = load_adapter_files(variant.adapters, model, &log);
    const Policy<float> policy{model, adapters.empty() ? nullptr : &adapters, config.guidance_scale};
    for (const auto& [split, prompts] :
         {std::pair{std::string("seen"), splits.seen}, std::pair{std::string("unseen"), splits.unseen}}) {
      std::vector<std::string> ps;
      std::vector<std::uint64_t> seeds;
      const std::uint64_t split_tag = split == "seen" ? 51 : 52;
      for (std::size_t p = 0; p < prompts.size(); ++p)
        for (int j = 0; j < config.eval_samples; ++j) {
          ps.push_back(prompts[p]);
          seeds.push_back(derive_seed(config.seed, split_tag, p * 100003 + static_cast<std::uint64_t>(j)));
        }
      const auto images = sample_images(policy, ps, seeds, config.micro_batch, workers);
      std::vector<std::vector<double>> scores(rewards.size());
      for (std::size_t i = 0; i < images.size(); ++i) {
        samples << variant.name << "\t" << split << "\t" << ps[i] << "\t" << (i % config.eval_samples);
        for (std::size_t r = 0; r < rewards.size(); ++r) {
          const double v = rewards[r](images[i], ps[i]);
          scores[r].push_back(v);
          samples << "\t" << std::setprecision(10) << v;
        }
        samples << "\n";
      }
      for (std::size_t r = 0; r < rewards.size(); ++r) {
        EvalRow row{variant.name, split, rewards[r].name, 0.0, 0.0, static_cast<int>(scores[r].size())};
        for (double v : scores[r]) row.mean += v;
        row.mean /= row.count;
        for (double v : scores[r]) row.std += (v - row.mean) * (v - row.mean);
        row.std = std::sqrt(row.std / row.count);
        log << row.variant << " " << row.split << " " << row.reward << " " << row.mean << " +- " << row.std << "\n";
        rows.push_back(row);
      }
    }
  }

  std::ostringstream tsv, md;
  tsv << "variant\tsplit\treward\tmean\tstd\tcount\n";
  md << "| variant | split | reward | mean | std | n |\n|---|---|---|---|---|---|\n";
  for (const auto& r : rows) {
    tsv << r.variant << "\t" << r.split << "\t" << r.reward << "\t" << std::setprecision(10) << r.mean << "\t"
        << r.std << "\t" << r.count << "\n";
    md << "| " << r.variant << " | " << r.split << " | " << r.reward << " | " << std::fixed << std::setprecision(4)
       << r.mean << " | " << r.std << " | " << r.count << " |\n"
       << std::defaultfloat;
  }
  write_text(out / "eval.tsv", tsv.str());
  write_text(out / "report.md", md.str());
  write_text(out / "eval_samples.tsv", samples.str());
  manifest.artifact(out / "eval.tsv");
  manifest.artifact(out / "report.md");
  manifest.artifact(out / "eval_samples.tsv");
  manifest.write();
  return rows;
}

// ---------------------------------------------------------------- fuse

void run_fuse(const RunConfig& config, const std::vector<fs::path>& inputs, const std::vector<double>& weights,
              std::ostream& log) {
  if (inputs.empty()) throw Error("fuse needs at least one adapter file");
  if (inputs.size() != weights.size())
    throw Error("fuse: " + std::to_string(inputs.size()) + " adapter files but " + std::to_string(weights.size()) +
                " weights");
  prepare_output(config);
  const fs::path out(config.out_dir);
  Manifest manifest("fuse", config);
  std::vector<AdapterSet<float>> sets;
  for (const auto& f : inputs) {
    manifest.input(f);
    sets.push_back(load_adapters(f));
  }
  const auto fused = fuse(sets, weights);
  const fs::path path = out / "fused.lora";
  save_adapters(fused, path);
  manifest.artifact(path);
  manifest.write();
  log << "fused " << inputs.size() << " adapter files into " << path.string() << " (" << fused.layers.size()
      << " layers)\n";
}

}  // namespace texforce
