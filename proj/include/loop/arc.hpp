// SPDX-License-Identifier: Apache-2.0
#pragma once

// Actor-regularized trajectory optimization over a learned model.
//
// Action sequences are stored column-wise: a population of N sequences over a
// horizon H is an (action_dim * H) x N matrix whose rows are time-major
// (rows t*action_dim .. t*action_dim + action_dim - 1 hold a_t).

#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "loop/dynamics.hpp"
#include "loop/mdp.hpp"
#include "loop/rng.hpp"

namespace loop {

/// Per-timestep diagonal Gaussian over an action sequence.
struct SequenceDistribution {
  Eigen::MatrixXd mean;  // action_dim x H
  Eigen::MatrixXd std;   // action_dim x H

  int horizon() const { return static_cast<int>(mean.cols()); }
  int action_dim() const { return static_cast<int>(mean.rows()); }

  static SequenceDistribution initial(int horizon, const ActionBounds& bounds, double sigma);
  /// Drops the first step, pads the tail with the bounds center, and resets
  /// every std to `sigma`.
  SequenceDistribution shifted(const ActionBounds& bounds, double sigma) const;
  void validate() const;
};

enum class Dispersion { kVariance, kStd };
enum class PlanOptimizer { kArc, kCem };

struct PlannerConfig {
  int horizon = 3;
  int population = 100;
  int particles = 4;
  int iterations = 5;
  double alpha = 0.1;
  double beta = 0.05;
  double kappa = 1.0;
  double sigma_prior = 0.5;
  double sigma_floor = 1e-3;
  double lambda_pess = 0.0;
  Dispersion dispersion = Dispersion::kVariance;
  double gamma = 0.99;
  /// Score the last step with the terminal value (false: model reward).
  bool terminal_value = true;
  PlanOptimizer optimizer = PlanOptimizer::kArc;
  double elite_frac = 0.1;
  int threads = 1;

  void validate() const;
};

struct SafeConfig {
  double d0 = 0.0;
  int min_safe = 1;

  void validate() const;
};

nlohmann::json to_json(const PlannerConfig& c);
PlannerConfig planner_config_from_json(const nlohmann::json& j, PlannerConfig base = {});

/// Learned model as seen by the planner.
class PlanModel {
 public:
  virtual ~PlanModel() = default;
  virtual int members() const = 0;
  /// One step of member k for every column. With rng, s' is drawn from the
  /// member's Gaussian; without, its mean is returned.
  virtual void step(int member, const Eigen::MatrixXd& s, const Eigen::MatrixXd& a, Rng* rng, Eigen::MatrixXd& s_next,
                    Eigen::VectorXd& reward) const = 0;
};

class EnsembleModel : public PlanModel {
 public:
  explicit EnsembleModel(const DynamicsEnsemble& ensemble) : ensemble_(&ensemble) {}
  int members() const override { return ensemble_->size(); }
  void step(int member, const Eigen::MatrixXd& s, const Eigen::MatrixXd& a, Rng* rng, Eigen::MatrixXd& s_next,
            Eigen::VectorXd& reward) const override;

 private:
  const DynamicsEnsemble* ensemble_;
};

using PolicyFn = std::function<Eigen::MatrixXd(const Eigen::MatrixXd& states, Rng& rng)>;
using ValueFn = std::function<Eigen::VectorXd(const Eigen::MatrixXd& states, const Eigen::MatrixXd& actions)>;
/// Per-column cost of the transition (s_t, a_t, s_{t+1}).
using CostFn = std::function<Eigen::VectorXd(const Eigen::MatrixXd& s, const Eigen::MatrixXd& a,
                                             const Eigen::MatrixXd& s_next)>;

struct Population {
  Eigen::MatrixXd actions;                      // (action_dim * H) x N
  Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic> from_actor;  // H x N
};

struct SequenceScores {
  Eigen::MatrixXd returns;  // N x K, particle-averaged per member
  Eigen::VectorXd costs;    // N, worst case over members and particles (empty if no cost)
};

/// Replaces model scoring; used for synthetic objectives.
using Scorer = std::function<SequenceScores(const Population&, Rng&)>;

struct PlanContext {
  ActionBounds bounds;
  const PlanModel* model = nullptr;
  PolicyFn actor;
  ValueFn terminal;
  CostFn cost;
  int nominal_member = 0;
  Scorer scorer;
};

Population sample_prior(const StateVec& s, const PlanContext& ctx, const SequenceDistribution& dist,
                        const PlannerConfig& cfg, Rng& rng);

SequenceScores score_sequences(const StateVec& s, const Population& pop, const PlanContext& ctx,
                               const PlannerConfig& cfg, bool with_costs, Rng& rng);

/// mean over members minus lambda times the across-member dispersion.
Eigen::VectorXd aggregate(const Eigen::MatrixXd& returns, double lambda_pess, Dispersion dispersion = Dispersion::kVariance);

/// Normalized exp(kappa * (score - max)) weights over the selected columns.
Eigen::VectorXd importance_weights(const Eigen::VectorXd& scores, double kappa);

/// Weighted mean/variance update with alpha smoothing and std floor. When
/// `subset` is given only those columns take part.
SequenceDistribution is_update(const Population& pop, const Eigen::VectorXd& scores, const SequenceDistribution& dist,
                               const PlannerConfig& cfg, const std::vector<int>* subset = nullptr);

/// Elite refit: mean/variance of the top elite_frac sequences, alpha smoothed.
SequenceDistribution cem_update(const Population& pop, const Eigen::VectorXd& scores, const SequenceDistribution& dist,
                                const PlannerConfig& cfg);

/// KL(p || q) between diagonal Gaussians summed over all entries.
double sequence_kl(const SequenceDistribution& p, const SequenceDistribution& q);

struct PlanResult {
  ActionVec action;
  SequenceDistribution final;
  SequenceDistribution next;  // shifted for the following environment step
  double actor_fraction = 0.0;
  double best_score = -std::numeric_limits<double>::infinity();
  double mean_score = 0.0;
  int safe_count = -1;  // last iteration, safe planning only
  std::vector<double> kl_per_iteration;
  /// iterations * sqrt(max KL / 2), the chained total-variation envelope.
  double tv_bound = 0.0;
  /// Sequence rollouts scored (N * K * P per iteration, N with a scorer).
  long long rollouts = 0;
};

PlanResult arc_plan(const StateVec& s, const PlanContext& ctx, const PlannerConfig& cfg,
                    const SequenceDistribution& prev, Rng& rng);

PlanResult safe_arc_plan(const StateVec& s, const PlanContext& ctx, const PlannerConfig& cfg, const SafeConfig& safe,
                         const SequenceDistribution& prev, Rng& rng);

}  // namespace loop
