// SPDX-License-Identifier: Apache-2.0
#pragma once

// Experiment orchestration: configuration, online and offline training loops,
// evaluation, metrics and checkpoints.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "loop/arc.hpp"
#include "loop/dynamics.hpp"
#include "loop/envs.hpp"
#include "loop/mdp.hpp"
#include "loop/sac.hpp"

namespace loop {

enum class Mode { kLoopSac, kSacOnly, kPetsRestricted, kLoopSarsa, kLoopOffline, kSafeLoop };

std::string to_string(Mode m);
Mode mode_from_string(const std::string& s);

struct OfflineConfig {
  std::string dataset;    // path to a replay-buffer archive
  int learner_steps = 20000;
  double bc_weight = 1.0;
  int eval_interval = 0;  // learner updates between records (0: only at the end)
};

struct DatasetConfig {
  std::string behavior = "medium";
  int size = 50000;
  double random_fraction = 0.5;
};

struct TheoryConfig {
  int mdps = 100;
  int states = 6;
  int actions = 3;
  double gamma = 0.9;
  double r_max = 1.0;
  std::vector<double> eps_m{0.0, 0.05, 0.1};
  std::vector<double> eps_v{0.0, 0.5, 1.0};
  std::vector<int> horizons{1, 2, 3};
  std::vector<double> tv_kl{0.005, 0.02};
  std::vector<int> tv_steps{1, 5};
};

struct ExperimentConfig {
  Mode mode = Mode::kLoopSac;
  std::uint64_t seed = 0;
  nlohmann::json env = {{"id", "pendulum"}};
  long long total_steps = 30000;
  long long seed_steps = 1000;
  long long eval_interval = 1000;
  int eval_episodes = 5;
  /// Stop once the mean evaluation return reaches this value.
  std::optional<double> stop_return;
  int updates_per_step = 1;
  std::size_t buffer_capacity = 100000;
  /// Actor branch of the planner prior: "sample" draws from the policy, "mean" uses its mode.
  std::string actor_branch = "sample";
  long long checkpoint_interval = 0;  // 0: final checkpoint only
  bool single_thread = false;
  PlannerConfig planner;
  SafeConfig safe;
  SacConfig sac;
  EnsembleConfig model;
  OfflineConfig offline;
  DatasetConfig dataset;
  TheoryConfig theory;

  /// Throws std::invalid_argument on inconsistent settings.
  void validate() const;
  bool uses_planner() const;
  bool uses_model() const;
  bool uses_sac() const;
};

/// Defaults overlaid with the given document; unknown keys are rejected.
ExperimentConfig config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const ExperimentConfig& c);
ExperimentConfig load_config(const std::filesystem::path& path);

/// Append-only JSON-lines writer, flushed per record.
class MetricsWriter {
 public:
  MetricsWriter() = default;
  explicit MetricsWriter(const std::filesystem::path& path, bool append = false);
  void write(const nlohmann::json& record);
  const std::vector<nlohmann::json>& records() const { return records_; }

 private:
  std::ofstream out_;
  std::vector<nlohmann::json> records_;
};

std::vector<nlohmann::json> read_metrics(const std::filesystem::path& path);

/// Mean Euclidean distance between paired columns.
double actor_divergence(const Eigen::MatrixXd& actor_actions, const Eigen::MatrixXd& planner_actions);

struct Counters {
  long long planner_calls = 0;
  long long model_trains = 0;
  long long critic_updates = 0;
  long long actor_updates = 0;
  long long env_steps = 0;

  nlohmann::json to_json() const;
};

struct EvalResult {
  std::vector<double> returns;
  std::vector<double> costs;
  double mean_return = 0.0;
  double mean_cost = 0.0;
};

/// Online training (random seeding, acting, model retraining, value learning, evaluation).
class OnlineTrainer {
 public:
  explicit OnlineTrainer(ExperimentConfig cfg);

  /// Runs until `step` environment steps (clamped to total_steps) or early stop.
  void run_until(long long step, MetricsWriter* metrics = nullptr);
  void run(MetricsWriter* metrics = nullptr) { run_until(cfg_.total_steps, metrics); }

  long long step() const { return step_; }
  bool finished() const { return stopped_ || step_ >= cfg_.total_steps; }
  std::optional<long long> threshold_step() const { return threshold_step_; }
  const Counters& counters() const { return counters_; }
  const ExperimentConfig& config() const { return cfg_; }
  const ReplayBuffer& buffer() const { return buffer_; }
  double training_cost() const { return train_cost_; }
  const std::vector<nlohmann::json>& history() const { return history_; }
  const ActorCritic* actor_critic() const { return ac_ ? &*ac_ : nullptr; }
  const DynamicsEnsemble* ensemble() const { return model_ ? &*model_ : nullptr; }

  /// Evaluates the deployment policy of the configured mode.
  EvalResult evaluate(int episodes, std::uint64_t stream);

  void save_state(const std::filesystem::path& path) const;
  void load_state(const std::filesystem::path& path);

 private:
  ActionVec act(const StateVec& obs, SequenceDistribution& prev, Rng& rng, bool training);
  PlanContext context(int nominal_member) const;
  void end_episode();
  void learn();
  nlohmann::json record(long long step);

  ExperimentConfig cfg_;
  std::unique_ptr<Env> env_;
  std::unique_ptr<Env> eval_env_;
  ReplayBuffer buffer_;
  std::optional<ActorCritic> ac_;
  std::optional<DynamicsEnsemble> model_;
  Rng env_rng_, act_rng_, learn_rng_, model_rng_;
  SequenceDistribution prev_;
  StateVec obs_;
  int episode_t_ = 0;
  double episode_return_ = 0.0, episode_cost_ = 0.0;
  int nominal_member_ = 0;
  std::optional<Transition> pending_;  // SARSA: waits for its next action
  long long step_ = 0;
  bool stopped_ = false;
  std::optional<long long> threshold_step_;
  double train_cost_ = 0.0;
  std::vector<double> recent_returns_;
  // accumulators between records
  double critic_loss_sum_ = 0.0, actor_loss_sum_ = 0.0, alpha_last_ = 0.0, entropy_sum_ = 0.0;
  long long loss_count_ = 0;
  double divergence_sum_ = 0.0;
  long long divergence_count_ = 0;
  double model_loss_last_ = 0.0;
  Counters counters_;
  std::vector<nlohmann::json> history_;
};

struct OfflineResult {
  double base_return = 0.0;
  double loop_return = 0.0;
  std::vector<double> base_returns, loop_returns;
};

/// Ensemble + behavior-regularized SAC on a fixed dataset, then evaluation of
/// the base actor and of the planner with an actor-only prior.
OfflineResult train_offline(const ExperimentConfig& cfg, const ReplayBuffer& dataset, MetricsWriter* metrics = nullptr,
                            const std::filesystem::path& checkpoint_dir = {});

/// Rolls the configured behavior policy and returns the dataset.
ReplayBuffer make_dataset(const ExperimentConfig& cfg);

struct TheoryResult {
  bool holds = true;
  long long rows = 0;
  long long violations = 0;
};

/// Tabular bound checks; one JSON line per trial into `report`.
TheoryResult theory_check(const ExperimentConfig& cfg, std::ostream& report);

}  // namespace loop
