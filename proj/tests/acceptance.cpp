// SPDX-License-Identifier: Apache-2.0
// Acceptance runs. Prints one PASS/FAIL line per criterion; details go to
// <work>/acceptance.log. Criteria 4-7 train real models with the default
// configuration and take about an hour on one CPU core.
#include <CLI11.hpp>

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>

#include <sys/wait.h>

#include "texforce/pipeline.hpp"

using namespace texforce;

namespace {

struct Outcome {
  bool pass = false;
  std::string summary;
};

std::ofstream details;

int run_shell(const std::string& command) {
  details << "$ " << command << std::endl;
  const int status = std::system(command.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string fmt(double v, int precision = 4) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(precision) << v;
  return os.str();
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

/// Per-sample scores of one reward column in eval_samples.tsv, keyed by (variant, split).
std::map<std::pair<std::string, std::string>, std::vector<double>> sample_scores(const fs::path& tsv,
                                                                                 const std::string& reward) {
  std::istringstream in(slurp(tsv));
  std::string line;
  std::getline(in, line);
  std::vector<std::string> header;
  {
    std::istringstream h(line);
    std::string col;
    while (std::getline(h, col, '\t')) header.push_back(col);
  }
  const auto it = std::find(header.begin(), header.end(), reward);
  if (it == header.end()) throw Error("no column " + reward + " in " + tsv.string());
  const auto column = static_cast<std::size_t>(it - header.begin());
  std::map<std::pair<std::string, std::string>, std::vector<double>> out;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::istringstream r(line);
    std::string cell;
    while (std::getline(r, cell, '\t')) cells.push_back(cell);
    out[{cells.at(0), cells.at(1)}].push_back(std::stod(cells.at(column)));
  }
  return out;
}

double mean_of(const std::vector<EvalRow>& rows, const std::string& variant, const std::string& reward,
               const std::set<std::string>& splits) {
  double sum = 0.0;
  int n = 0;
  for (const auto& r : rows)
    if (r.variant == variant && r.reward == reward && splits.count(r.split)) {
      sum += r.mean * r.count;
      n += r.count;
    }
  if (n == 0) throw Error("no eval rows for " + variant + " / " + reward);
  return sum / n;
}

class Acceptance {
 public:
  Acceptance(fs::path work, std::string tests, std::string cli)
      : work_(std::move(work)), tests_(std::move(tests)), cli_(std::move(cli)) {}

  Outcome unit_suite(const std::string& cases, int expected) {
    const std::string filter = " --test-case=\"" + cases + "\"";
    std::string listing;
    if (FILE* pipe = popen((tests_ + filter + " --count").c_str(), "r")) {
      char buf[256];
      while (std::fgets(buf, sizeof buf, pipe)) listing += buf;
      pclose(pipe);
    }
    const auto colon = listing.find("filters: ");
    const int matched = colon == std::string::npos ? -1 : std::atoi(listing.c_str() + colon + 9);
    if (matched != expected)
      return {false, "expected " + std::to_string(expected) + " unit cases, filter matched " + std::to_string(matched)};
    const int code = run_shell(tests_ + filter + " >> " + (work_ / "acceptance.log").string() +
                               " 2>&1");
    return {code == 0, std::to_string(expected) + (code == 0 ? " unit cases passed" : " unit cases, some failed")};
  }

  Outcome c4() {
    const auto& report = pretrain();
    double best = report.epoch_losses.front();
    int epoch = -1;
    for (std::size_t e = 0; e < report.epoch_losses.size(); ++e) {
      best = std::min(best, report.epoch_losses[e]);
      if (epoch < 0 && report.epoch_losses[e] < 0.5 * report.initial_loss) epoch = static_cast<int>(e);
    }
    RunConfig c = with_base(work_ / "c4_eval");
    c.task = "color";
    c.reward = "color";
    c.eval_samples = 10;
    run_eval(c, {{"base", {}}}, log("c4_eval"));
    const auto scores = sample_scores(work_ / "c4_eval" / "eval_samples.tsv", "color");
    int good = 0, total = 0;
    for (const auto& [key, values] : scores)
      for (double v : values) {
        good += v >= 0.5;
        ++total;
      }
    const double fraction = static_cast<double>(good) / total;
    const bool pass = epoch >= 0 && fraction >= 0.6;
    return {pass, "loss " + fmt(report.initial_loss, 1) + " -> " + fmt(best, 1) + " (ratio " +
                      fmt(best / report.initial_loss, 3) + ", first below 50% at epoch " + std::to_string(epoch) +
                      "); color >= 0.5 on " + std::to_string(good) + "/" + std::to_string(total) + " = " +
                      fmt(fraction, 3) + " (need 0.6)"};
  }

  Outcome c5() {
    const auto enc = finetune("rl_inc_encoder", "text_encoder", "incompressibility", "color");
    const auto den = finetune("rl_inc_denoiser", "denoiser", "incompressibility", "color");
    RunConfig c = with_base(work_ / "c5_eval");
    c.task = "color";
    c.reward = "incompressibility";
    c.eval_samples = 16;
    const auto rows = run_eval(c,
                               {{"base", {}},
                                {"encoder", enc.adapter_files},
                                {"denoiser", den.adapter_files},
                                {"combined", {enc.adapter_files.front(), den.adapter_files.front()}}},
                               log("c5_eval"));
    const std::set<std::string> seen{"seen"};
    const double base = mean_of(rows, "base", "incompressibility", seen);
    const double e = mean_of(rows, "encoder", "incompressibility", seen);
    const double d = mean_of(rows, "denoiser", "incompressibility", seen);
    const double both = mean_of(rows, "combined", "incompressibility", seen);
    const bool pass = e >= 1.2 * base && d > base && both >= 0.95 * std::max(e, d);
    return {pass, "kB base " + fmt(base) + ", encoder " + fmt(e) + " (" + fmt(100 * (e / base - 1), 1) +
                      "%, need 20%), denoiser " + fmt(d) + " (" + fmt(100 * (d / base - 1), 1) + "%), combined " +
                      fmt(both) + " (need >= " + fmt(0.95 * std::max(e, d)) + ")" +
                      (both > std::max(e, d) ? ", combined is best" : ", combined is not best") +
                      "; non-decreasing buffer pairs " + fmt(non_decreasing(enc.mean_rewards), 2) + " encoder / " +
                      fmt(non_decreasing(den.mean_rewards), 2) + " denoiser"};
  }

  Outcome c6() {
    const auto& color = color_run();
    RunConfig c = with_base(work_ / "c6_eval");
    c.task = "color";
    c.reward = "color";
    c.eval_samples = 16;
    const auto rows = run_eval(c, {{"base", {}}, {"color", color.adapter_files}}, log("c6_eval"));
    const double seen_base = mean_of(rows, "base", "color", {"seen"});
    const double seen_rl = mean_of(rows, "color", "color", {"seen"});
    const double unseen_base = mean_of(rows, "base", "color", {"unseen"});
    const double unseen_rl = mean_of(rows, "color", "color", {"unseen"});
    const bool pass = seen_rl - seen_base >= 0.15 && unseen_rl >= unseen_base - 0.02;
    return {pass, "seen " + fmt(seen_base) + " -> " + fmt(seen_rl) + " (+" + fmt(seen_rl - seen_base) +
                      ", need 0.15); unseen " + fmt(unseen_base) + " -> " + fmt(unseen_rl) + " (floor " +
                      fmt(unseen_base - 0.02) + ")"};
  }

  Outcome c7() {
    const auto& color = color_run();
    const fs::path inc = work_ / "rl_inc_encoder" / "encoder.lora";
    if (!fs::exists(inc)) finetune("rl_inc_encoder", "text_encoder", "incompressibility", "color");
    RunConfig f = defaults(work_ / "c7_fuse");
    run_fuse(f, {color.adapter_files.front(), inc}, {0.5, 0.5}, log("c7_fuse"));
    RunConfig c = with_base(work_ / "c7_eval");
    c.task = "color";
    c.reward = "incompressibility";
    c.eval_samples = 16;
    const auto rows = run_eval(c, {{"base", {}}, {"fused", {work_ / "c7_fuse" / "fused.lora"}}}, log("c7_eval"));
    const std::set<std::string> all{"seen", "unseen"};
    const double color_base = mean_of(rows, "base", "color", all);
    const double color_fused = mean_of(rows, "fused", "color", all);
    const double kb_base = mean_of(rows, "base", "incompressibility", all);
    const double kb_fused = mean_of(rows, "fused", "incompressibility", all);
    const bool pass = color_fused >= color_base && kb_fused >= kb_base;
    return {pass, "color " + fmt(color_base) + " -> " + fmt(color_fused) + ", kB " + fmt(kb_base) + " -> " +
                      fmt(kb_fused)};
  }

  Outcome c8() {
    const fs::path root = work_ / "c8";
    fs::remove_all(root);
    fs::create_directories(root);
    const fs::path cfg = root / "run.cfg";
    {
      std::ofstream out(cfg);
      out << "dataset_size = 64\npretrain_epochs = 2\ndiffusion_steps = 10\nrollouts_per_buffer = 8\n"
             "total_buffers = 2\nminibatch_size = 40\neval_samples = 2\nsample_count = 4\nseed = 3\n";
    }
    const std::map<std::string, std::vector<std::string>> outputs{
        {"pretrain", {"loss.tsv", "base.ckpt"}},
        {"rl-finetune", {"metrics.jsonl", "encoder.lora", "denoiser.lora"}},
        {"sample", {"rewards.tsv", "grid.png"}},
        {"eval", {"eval.tsv", "eval_samples.tsv"}},
        {"fuse", {"fused.lora"}}};
    const std::string logfile = (work_ / "c8.log").string();
    for (const std::string run : {"a", "b"}) {
      const fs::path d = root / run;
      const std::string common = " --config " + cfg.string() + " ";
      const std::string ck = " --checkpoint " + (d / "pretrain" / "base.ckpt").string();
      const std::string ad = " --adapters " + (d / "rl-finetune" / "encoder.lora").string() + " " +
                             (d / "rl-finetune" / "denoiser.lora").string();
      for (const auto& cmd : {"pretrain" + common, "rl-finetune" + common + "--policy both" + ck,
                              "sample" + common + ck + ad, "eval" + common + ck + ad,
                              "fuse" + common + "--weights 0.5,0.5" + ad}) {
        const std::string name = cmd.substr(0, cmd.find(' '));
        if (run_shell("env -u TEXFORCE_WORKERS " + cli_ + " " + cmd + " --out " + (d / name).string() + " >> " +
                      logfile + " 2>&1") != 0)
          return {false, name + " failed, see " + logfile};
      }
    }
    int compared = 0;
    std::vector<std::string> differing;
    for (const auto& [command, files] : outputs)
      for (const auto& f : files) {
        ++compared;
        if (slurp(root / "a" / command / f) != slurp(root / "b" / command / f)) differing.push_back(command + "/" + f);
      }
    if (!differing.empty()) {
      std::string list;
      for (const auto& d : differing) list += " " + d;
      return {false, "differing outputs:" + list};
    }
    return {true, std::to_string(compared) + " output files byte-identical across reruns of 5 commands"};
  }

 private:
  RunConfig defaults(const fs::path& out) const {
    RunConfig c;
    c.out_dir = out.string();
    return c;
  }

  RunConfig with_base(const fs::path& out) {
    RunConfig c = defaults(out);
    c.base_checkpoint = pretrain().checkpoint.string();
    return c;
  }

  std::ostream& log(const std::string& stage) {
    details << "== " << stage << std::endl;
    return details;
  }

  const PretrainReport& pretrain() {
    if (!pretrain_) pretrain_ = run_pretrain(defaults(work_ / "pretrain"), log("pretrain"));
    return *pretrain_;
  }

  RlReport finetune(const std::string& name, const std::string& policy, const std::string& reward,
                    const std::string& task) {
    RunConfig c = with_base(work_ / name);
    c.policy = policy;
    c.reward = reward;
    c.task = task;
    return run_rl_finetune(c, log(name));
  }

  const RlReport& color_run() {
    if (!color_) color_ = finetune("rl_color", "text_encoder", "color", "color");
    return *color_;
  }

  static double non_decreasing(const std::vector<double>& rewards) {
    if (rewards.size() < 2) return 1.0;
    int up = 0;
    for (std::size_t i = 1; i < rewards.size(); ++i) up += rewards[i] >= rewards[i - 1];
    return static_cast<double>(up) / static_cast<double>(rewards.size() - 1);
  }

  fs::path work_;
  std::string tests_, cli_;
  std::optional<PretrainReport> pretrain_;
  std::optional<RlReport> color_;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"texforce acceptance runs"};
  std::string work = "acceptance_runs";
  std::vector<int> only;
  app.add_option("--work", work, "directory for run outputs");
  app.add_option("--only", only, "criteria to run (default: all)")->delimiter(',')->check(CLI::Range(1, 8));
  CLI11_PARSE(app, argc, argv);

  tune_allocator();
  fs::create_directories(work);
  details.open(fs::path(work) / "acceptance.log", std::ios::app);
  Acceptance acceptance(fs::absolute(work), TEXFORCE_TESTS, TEXFORCE_CLI);

  const std::vector<std::pair<int, std::function<Outcome()>>> criteria{
      {1,
       [&] {
         return acceptance.unit_suite(
             "gaussian_log_prob examples,clipped objective examples,advantage normalization examples,"
             "zero-initialized adapters*,merge matches inject*,fuse identity*,adapter files round-trip*",
             7);
       }},
      {2,
       [&] {
         return acceptance.unit_suite(
             "pretraining loss gradient*,log-probability gradient*,direct backpropagation matches*", 3);
       }},
      {3,
       [&] {
         return acceptance.unit_suite(
             "first PPO gradient equals*,probability ratio examples,updates touch only the trainable*", 3);
       }},
      {4, [&] { return acceptance.c4(); }},
      {5, [&] { return acceptance.c5(); }},
      {6, [&] { return acceptance.c6(); }},
      {7, [&] { return acceptance.c7(); }},
      {8, [&] { return acceptance.c8(); }},
  };

  int failures = 0;
  for (const auto& [id, check] : criteria) {
    if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
    Outcome o;
    try {
      o = check();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    failures += !o.pass;
    std::cout << "criterion " << id << ": " << (o.pass ? "PASS" : "FAIL") << "  " << o.summary << std::endl;
    details << "criterion " << id << ": " << (o.pass ? "PASS" : "FAIL") << "  " << o.summary << std::endl;
  }
  return failures == 0 ? 0 : 1;
}
