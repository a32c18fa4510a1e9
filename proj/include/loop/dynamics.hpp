// SPDX-License-Identifier: Apache-2.0
#pragma once

// Bootstrap ensemble of probabilistic one-step models.
//
// Each member maps normalized (s, a) to a diagonal Gaussian over the
// normalized state delta s' - s plus a scalar reward. Members share the data
// and differ only in their random initialization.

#include <filesystem>
#include <vector>

#include <Eigen/Dense>

#include "loop/mdp.hpp"
#include "loop/nn.hpp"
#include "loop/rng.hpp"

namespace loop {

struct EnsembleConfig {
  int members = 5;
  std::vector<int> hidden{200, 200, 200, 200};
  double lr = 1e-3;
  int batch_size = 256;
  double holdout_fraction = 0.1;
  int patience = 5;
  int max_epochs = 200;
  /// Optional cap on gradient steps per member per train() call (0 = none).
  int max_updates = 0;
  int retrain_period = 250;  // environment steps between retrains
  /// Per-element NLL terms are weighted by a detached sigma^(2 beta). 0 is the
  /// plain NLL; larger values keep near-deterministic state dims from drowning
  /// out the reward regression in the shared trunk.
  double nll_beta = 0.5;

  void validate() const;
};

/// Affine normalization x -> (x - mean) / std.
struct Normalizer {
  Eigen::VectorXd mean;
  Eigen::VectorXd std;

  static Normalizer identity(int dim);
  static Normalizer fit(const Eigen::MatrixXd& columns);
  Eigen::MatrixXd apply(const Eigen::MatrixXd& x) const;
  Eigen::MatrixXd invert(const Eigen::MatrixXd& z) const;
};

struct MemberPrediction {
  Eigen::MatrixXd mean;    // next-state mean, raw units (state_dim x B)
  Eigen::MatrixXd std;     // next-state std, raw units
  Eigen::VectorXd reward;  // raw units
};

struct EnsembleTrainReport {
  /// Mean holdout loss across members after each epoch (members that stopped
  /// early contribute their final value).
  std::vector<double> holdout_loss;
  std::vector<double> train_loss;
  std::vector<int> epochs_per_member;
  std::vector<std::vector<double>> member_holdout_loss;
};

class DynamicsEnsemble {
 public:
  DynamicsEnsemble() = default;
  DynamicsEnsemble(int state_dim, int action_dim, EnsembleConfig cfg, Rng& rng);

  int state_dim() const { return state_dim_; }
  int action_dim() const { return action_dim_; }
  int size() const { return static_cast<int>(members_.size()); }
  const EnsembleConfig& config() const { return cfg_; }

  /// Refits normalization and trains every member on the whole buffer until
  /// its holdout loss stops improving for `patience` epochs.
  EnsembleTrainReport train(const ReplayBuffer& buffer, Rng& rng);

  MemberPrediction predict_batch(int member, const Eigen::MatrixXd& s, const Eigen::MatrixXd& a) const;
  MemberPrediction predict(int member, const StateVec& s, const ActionVec& a) const;
  /// Draws s' from the member's Gaussian (aleatoric noise); reward is the head mean.
  std::pair<StateVec, double> sample_next(int member, const StateVec& s, const ActionVec& a, Rng& rng) const;

  /// Per-batch training loss of one member on raw (s, a, r, s') columns:
  /// Gaussian NLL of the normalized delta plus squared error of the normalized reward.
  /// `weighted` applies the nll_beta weighting used for gradient steps; the
  /// holdout monitor uses the plain objective.
  double member_loss(int member, const Batch& batch, nn::NetGrad* grad = nullptr, bool weighted = true) const;

  const nn::DenseNet& member_net(int member) const { return members_.at(static_cast<std::size_t>(member)); }
  nn::DenseNet& member_net(int member) { return members_.at(static_cast<std::size_t>(member)); }
  const Normalizer& input_normalizer() const { return input_norm_; }
  const Normalizer& delta_normalizer() const { return delta_norm_; }
  const Normalizer& reward_normalizer() const { return reward_norm_; }
  void set_normalizers(Normalizer input, Normalizer delta, Normalizer reward);

  void save(const std::filesystem::path& path) const;
  static DynamicsEnsemble load(const std::filesystem::path& path);

 private:
  void check_member(int member) const;

  int state_dim_ = 0;
  int action_dim_ = 0;
  EnsembleConfig cfg_;
  std::vector<nn::DenseNet> members_;
  std::vector<nn::Adam> optimizers_;
  Normalizer input_norm_;
  Normalizer delta_norm_;
  Normalizer reward_norm_;
};

}  // namespace loop
