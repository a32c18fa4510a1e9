// SPDX-License-Identifier: Apache-2.0
// Command-line entry point: training, datasets, theory checks and evaluation.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "loop/harness.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace loop;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = "out";
  bool single_thread = false;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "JSON experiment config");
  cmd->add_option("--seed", c.seed, "overrides the config seed");
  cmd->add_option("--out", c.out, "output directory");
  cmd->add_flag("--single-thread", c.single_thread, "serial execution, bit-exact reruns");
}

ExperimentConfig resolve(const Common& c, const std::optional<std::string>& mode = std::nullopt) {
  json j = json::object();
  if (!c.config.empty()) {
    std::ifstream in(c.config);
    if (!in) throw std::runtime_error("cannot open config: " + c.config);
    in >> j;
  }
  if (mode && !j.contains("mode")) j["mode"] = *mode;
  if (c.seed) j["seed"] = *c.seed;
  if (c.single_thread) j["single_thread"] = true;
  return config_from_json(j);
}

void write_resolved(const ExperimentConfig& cfg, const fs::path& out) {
  fs::create_directories(out);
  std::ofstream(out / "config.resolved.json") << to_json(cfg).dump(2) << '\n';
}

int train_online(const Common& c, const std::string& resume) {
  const ExperimentConfig cfg = resolve(c);
  const fs::path out(c.out);
  write_resolved(cfg, out);
  OnlineTrainer tr(cfg);
  if (!resume.empty()) tr.load_state(resume);
  MetricsWriter metrics(out / "metrics.jsonl", !resume.empty());
  const fs::path ckpt = out / "checkpoints";
  if (cfg.checkpoint_interval > 0) {
    while (!tr.finished()) {
      const long long next = (tr.step() / cfg.checkpoint_interval + 1) * cfg.checkpoint_interval;
      tr.run_until(next, &metrics);
      tr.save_state(ckpt / ("step_" + std::to_string(tr.step())));
    }
  }
  tr.run(&metrics);
  tr.save_state(ckpt / "final");
  const auto& last = tr.history().back();
  std::cout << "steps " << tr.step() << " eval_return " << last["eval_return"] << '\n';
  if (tr.threshold_step()) std::cout << "threshold reached at step " << *tr.threshold_step() << '\n';
  return 0;
}

int train_offline_cmd(const Common& c, const std::string& dataset) {
  ExperimentConfig cfg = resolve(c, std::string("loop-offline"));
  if (!dataset.empty()) cfg.offline.dataset = dataset;
  if (cfg.offline.dataset.empty()) throw std::invalid_argument("no dataset given (--dataset or offline.dataset)");
  if (!fs::exists(cfg.offline.dataset)) throw std::runtime_error("dataset not found: " + cfg.offline.dataset);
  const fs::path out(c.out);
  write_resolved(cfg, out);
  const ReplayBuffer data = ReplayBuffer::load(cfg.offline.dataset);
  MetricsWriter metrics(out / "metrics.jsonl");
  const OfflineResult r = train_offline(cfg, data, &metrics, out / "checkpoints" / "final");
  std::cout << "base_return " << r.base_return << " loop_return " << r.loop_return << '\n';
  return 0;
}

int make_dataset_cmd(const Common& c) {
  const ExperimentConfig cfg = resolve(c);
  const fs::path out(c.out);
  write_resolved(cfg, out);
  const ReplayBuffer data = make_dataset(cfg);
  json prov = {{"env", cfg.env},
               {"behavior", cfg.dataset.behavior},
               {"random_fraction", cfg.dataset.random_fraction},
               {"seed", cfg.seed},
               {"size", cfg.dataset.size}};
  data.save(out / "dataset.bin", prov);
  std::cout << "wrote " << data.size() << " transitions to " << (out / "dataset.bin").string() << '\n';
  return 0;
}

int theory_cmd(const Common& c) {
  const ExperimentConfig cfg = resolve(c);
  const fs::path out(c.out);
  write_resolved(cfg, out);
  std::ofstream report(out / "theory_report.jsonl");
  const TheoryResult r = theory_check(cfg, report);
  std::cout << "rows " << r.rows << " violations " << r.violations << '\n';
  return r.holds ? 0 : 1;
}

int eval_cmd(const Common& c, const std::string& checkpoint, int episodes) {
  if (checkpoint.empty()) throw std::invalid_argument("eval needs --checkpoint");
  ExperimentConfig cfg = resolve(c);
  std::ifstream in(fs::path(checkpoint) / "trainer.json");
  if (!in) throw std::runtime_error("not an online checkpoint: " + checkpoint);
  if (c.config.empty()) {
    // The checkpoint carries its own configuration.
    json state;
    in >> state;
    json j = state.at("config");
    if (c.seed) j["seed"] = *c.seed;
    if (c.single_thread) j["single_thread"] = true;
    cfg = config_from_json(j);
  }
  OnlineTrainer tr(cfg);
  tr.load_state(checkpoint);
  const EvalResult r = tr.evaluate(episodes > 0 ? episodes : cfg.eval_episodes, 0);
  const json rec = {{"step", tr.step()}, {"eval_return", r.mean_return}, {"eval_returns", r.returns},
                    {"eval_cost", r.mean_cost}, {"eval_costs", r.costs}};
  const fs::path out(c.out);
  fs::create_directories(out);
  MetricsWriter(out / "eval.jsonl").write(rec);
  std::cout << rec.dump() << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Lookahead planning with learned models and value functions"};
  app.require_subcommand(1);

  Common online, offline, dataset, theory, eval;
  std::string resume, dataset_path, checkpoint;
  int episodes = 0;

  auto* c_online = app.add_subcommand("train-online", "online training");
  add_common(c_online, online);
  c_online->add_option("--resume", resume, "checkpoint directory to continue from");
  auto* c_offline = app.add_subcommand("train-offline", "offline training on a fixed dataset");
  add_common(c_offline, offline);
  c_offline->add_option("--dataset", dataset_path, "dataset archive (overrides offline.dataset)");
  auto* c_dataset = app.add_subcommand("make-dataset", "roll a behavior policy into a dataset");
  add_common(c_dataset, dataset);
  auto* c_theory = app.add_subcommand("theory-check", "tabular bound checks");
  add_common(c_theory, theory);
  auto* c_eval = app.add_subcommand("eval", "evaluate an online checkpoint");
  add_common(c_eval, eval);
  c_eval->add_option("--checkpoint", checkpoint, "checkpoint directory")->required();
  c_eval->add_option("--episodes", episodes, "episodes (default: eval_episodes)");

  CLI11_PARSE(app, argc, argv);
  try {
    if (*c_online) return train_online(online, resume);
    if (*c_offline) return train_offline_cmd(offline, dataset_path);
    if (*c_dataset) return make_dataset_cmd(dataset);
    if (*c_theory) return theory_cmd(theory);
    if (*c_eval) return eval_cmd(eval, checkpoint, episodes);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
