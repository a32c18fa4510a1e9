// SPDX-License-Identifier: Apache-2.0
#pragma once

// Exact dynamic-programming laboratory for H-step lookahead policies.
//
// Everything here is computed exactly on small finite MDPs so that the
// performance bound of the lookahead policy (and its 1-step special case) can
// be checked against ground truth rather than estimated.

#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "loop/rng.hpp"

namespace loop::tabular {

using ValueTable = Eigen::VectorXd;

struct TabularMDP {
  int n_states = 0;
  int n_actions = 0;
  std::vector<double> P;  // P[(s * n_actions + a) * n_states + s']
  Eigen::MatrixXd R;      // n_states x n_actions, entries in [0, R_max]
  double gamma = 0.9;

  double p(int s, int a, int s2) const { return P[row(s, a) + static_cast<std::size_t>(s2)]; }
  double& p(int s, int a, int s2) { return P[row(s, a) + static_cast<std::size_t>(s2)]; }
  std::size_t row(int s, int a) const {
    return (static_cast<std::size_t>(s) * static_cast<std::size_t>(n_actions) + static_cast<std::size_t>(a)) *
           static_cast<std::size_t>(n_states);
  }
  /// Expected next value: sum_s' P[s][a][s'] V[s'].
  double expect(int s, int a, const ValueTable& v) const;

  /// Throws unless rows sum to 1 within 1e-12, probabilities are nonnegative,
  /// rewards lie in [0, r_max] and gamma in (0, 1).
  void validate(double r_max) const;

  /// Random MDP with Dirichlet(1)-distributed rows and uniform rewards in [0, r_max].
  static TabularMDP random(int n_states, int n_actions, double gamma, Rng& rng, double r_max = 1.0);
};

/// Deterministic policy: one action index per state.
struct TabularPolicy {
  std::vector<int> action;
};

/// Inputs of the lookahead performance bound.
struct BoundInputs {
  double eps_m = 0.0;  // max TV distance between true and approximate model rows
  double eps_v = 0.0;  // max abs error of the approximate value function
  int H = 1;
  double gamma = 0.9;
  double r_max = 1.0;
  double v_max = 10.0;

  void validate() const;
};

/// Iterates the Bellman optimality operator until the sup-norm residual is <= tol.
ValueTable value_iteration(const TabularMDP& mdp, double tol);
/// Greedy policy w.r.t. V (ties -> lowest action index).
TabularPolicy greedy_policy(const TabularMDP& mdp, const ValueTable& v);
/// Exact value of a stationary policy: solves (I - gamma P_pi) V = R_pi.
ValueTable policy_value(const TabularMDP& mdp, const TabularPolicy& pi);

/// TV distance 0.5 * sum |p - q|.
double total_variation(const double* p, const double* q, int n);
/// Largest row-wise TV distance between the transition tables of two MDPs.
double max_row_tv(const TabularMDP& a, const TabularMDP& b);

/// Mixes every row with a random distribution: P_hat = (1 - eps_m) P + eps_m U.
TabularMDP perturb_model(const TabularMDP& mdp, double eps_m, Rng& rng);
/// Adds uniform noise in [-eps_v, eps_v] per state, then clamps into [0, v_max].
ValueTable perturb_values(const ValueTable& v, double eps_v, double v_max, Rng& rng);

/// Optimal decision rules d_0..d_{H-1} of the H-step problem whose terminal
/// reward is V_hat, solved by backward induction under `mdp_hat`.
std::vector<TabularPolicy> lookahead_plan(const TabularMDP& mdp_hat, const ValueTable& v_hat, int H);
/// First decision rule of lookahead_plan: the replanning (MPC) lookahead policy.
TabularPolicy exact_lookahead_policy(const TabularMDP& mdp_hat, const ValueTable& v_hat, int H);
/// Value, at block start, of executing the H decision rules open-loop in blocks
/// of H steps (no replanning inside a block) in the true MDP.
ValueTable periodic_policy_value(const TabularMDP& mdp, const std::vector<TabularPolicy>& plan);

/// C(eps_m, H, gamma) = R_max sum_{t<H} gamma^t t eps_m + gamma^H H eps_m V_max.
double model_error_constant(const BoundInputs& b);
/// 2 / (1 - gamma^H) * (C + gamma^H eps_v).
double lookahead_bound(const BoundInputs& b);

struct TrialRecord {
  int trial = 0;
  double eps_m = 0.0;
  double eps_v = 0.0;
  int H = 1;
  double gap = 0.0;       // max_s V*(s) - V^{pi_H}(s), no-replanning policy
  double mpc_gap = 0.0;   // same for the replanning policy (informational)
  double measured_tv = 0.0;
  double measured_value_error = 0.0;
  double bound = 0.0;
  double slack = 0.0;     // bound - gap
  bool holds = true;
};

struct BoundReport {
  std::vector<TrialRecord> trials;
  bool holds = true;
  double max_gap = 0.0;
  double mean_gap = 0.0;
};

/// Per trial: perturb model and values, plan exactly, measure the gap.
BoundReport verify_bound(const TabularMDP& mdp, const BoundInputs& b, int trials, Rng& rng);

nlohmann::json to_json(const TrialRecord& r);

// Gaussian trust-region chains.

double gaussian_kl(double mu1, double sigma1, double mu2, double sigma2);
/// TV distance between two 1-D Gaussians by adaptive Gauss-Kronrod quadrature
/// split at the density crossings. `error` receives the quadrature error estimate.
double gaussian_tv_numeric(double mu1, double sigma1, double mu2, double sigma2, double* error = nullptr);

struct TvChainReport {
  int steps = 0;
  double kl_step = 0.0;
  std::vector<double> step_kl;
  std::vector<double> step_tv;
  double total_tv = 0.0;        // TV(p_0, p_M)
  double bound = 0.0;           // M sqrt(kl_step / 2)
  double per_step_bound = 0.0;  // sqrt(kl_step / 2)
  double max_quadrature_error = 0.0;
  bool holds = true;
};

/// Builds N(0,1) -> N(d,1) -> ... -> N(M d,1) with per-step KL = kl_step and
/// checks the chained TV bound numerically.
TvChainReport trust_region_tv_check(double kl_step, int steps);

nlohmann::json to_json(const TvChainReport& r);

}  // namespace loop::tabular
