// SPDX-License-Identifier: Apache-2.0
#pragma once

// Soft actor-critic with twin critics, polyak-averaged targets and a learned
// entropy temperature. Also supports SARSA-style policy evaluation targets and
// a behavior-cloning term for the offline pipeline.

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "loop/archive.hpp"
#include "loop/mdp.hpp"
#include "loop/nn.hpp"
#include "loop/rng.hpp"

namespace loop {

struct SacConfig {
  std::vector<int> hidden{256, 256};
  double actor_lr = 3e-4;
  double critic_lr = 3e-4;
  double alpha_lr = 3e-4;
  double gamma = 0.99;
  double polyak = 0.995;  // target <- polyak * target + (1 - polyak) * critic
  int batch_size = 256;
  double init_alpha = 1.0;
  bool learn_alpha = true;
  std::optional<double> target_entropy;  // defaults to -action_dim
  /// Weight of -log pi(a_data | s) added to the actor loss (offline mode).
  double bc_weight = 0.0;

  void validate() const;
};

enum class CriticTarget { kSoft, kSarsa };

struct CriticStats {
  double loss = 0.0;  // mean over both critics of 0.5 (Q - y)^2
  double mean_q = 0.0;
};

struct ActorStats {
  double loss = 0.0;
  double entropy = 0.0;  // -mean log pi of the reparameterized samples
  double alpha = 0.0;    // temperature after the step
  double bc_nll = 0.0;
};

struct PolicySample {
  Eigen::MatrixXd action;    // action_dim x B
  Eigen::VectorXd log_prob;  // B
};

class ActorCritic {
 public:
  ActorCritic() = default;
  ActorCritic(int state_dim, ActionBounds bounds, SacConfig cfg, Rng& rng);

  int state_dim() const { return state_dim_; }
  int action_dim() const { return bounds_.dim(); }
  const ActionBounds& bounds() const { return bounds_; }
  const SacConfig& config() const { return cfg_; }
  double alpha() const;
  double log_alpha() const { return log_alpha_; }
  void set_log_alpha(double v) { log_alpha_ = v; }
  double target_entropy() const;

  PolicySample sample(const Eigen::MatrixXd& states, Rng& rng) const;
  Eigen::MatrixXd mode(const Eigen::MatrixXd& states) const;
  ActionVec act(const StateVec& s, Rng& rng) const;

  /// Critic i in {0, 1}; `target` selects the averaged copy.
  Eigen::VectorXd q(int i, const Eigen::MatrixXd& s, const Eigen::MatrixXd& a, bool target = false) const;
  /// min(Q1, Q2) of the online critics.
  Eigen::VectorXd q_min(const Eigen::MatrixXd& s, const Eigen::MatrixXd& a) const;

  /// r + (1 - done) gamma (min target Q(s', a') - alpha log pi(a'|s')), a' ~ pi(.|s').
  Eigen::VectorXd soft_target(const Batch& batch, Rng& rng) const;
  /// r + (1 - done) gamma min target Q(s', a_next). Throws without a_next.
  Eigen::VectorXd sarsa_target(const Batch& batch) const;

  /// One optimizer step on each critic toward the shared target, then polyak.
  CriticStats update_critics(const Batch& batch, Rng& rng, CriticTarget kind = CriticTarget::kSoft);
  /// One actor step on alpha log pi - min Q (+ bc term), then one temperature step.
  ActorStats update_actor(const Batch& batch, Rng& rng);

  const nn::DenseNet& actor() const { return actor_; }
  nn::DenseNet& actor() { return actor_; }
  const nn::DenseNet& critic(int i) const { return critics_.at(static_cast<std::size_t>(i)); }
  nn::DenseNet& critic(int i) { return critics_.at(static_cast<std::size_t>(i)); }
  const nn::DenseNet& target_critic(int i) const { return targets_.at(static_cast<std::size_t>(i)); }
  nn::DenseNet& target_critic(int i) { return targets_.at(static_cast<std::size_t>(i)); }

  void save(ArchiveWriter& w, const std::string& prefix) const;
  void load(const ArchiveReader& r, const std::string& prefix);
  void save(const std::filesystem::path& path) const;
  static ActorCritic load(const std::filesystem::path& path);

 private:
  Eigen::MatrixXd critic_input(const Eigen::MatrixXd& s, const Eigen::MatrixXd& a) const;
  void check_states(const Eigen::MatrixXd& s) const;

  int state_dim_ = 0;
  ActionBounds bounds_;
  SacConfig cfg_;
  nn::DenseNet actor_;
  std::vector<nn::DenseNet> critics_;
  std::vector<nn::DenseNet> targets_;
  nn::Adam actor_opt_;
  std::vector<nn::Adam> critic_opts_;
  nn::Adam alpha_opt_;
  double log_alpha_ = 0.0;
};

nlohmann::json to_json(const SacConfig& cfg);
SacConfig sac_config_from_json(const nlohmann::json& j);

}  // namespace loop
