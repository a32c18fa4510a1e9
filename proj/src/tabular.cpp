// SPDX-License-Identifier: Apache-2.0
#include "loop/tabular.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>

#include <boost/math/quadrature/gauss_kronrod.hpp>

namespace loop::tabular {

double TabularMDP::expect(int s, int a, const ValueTable& v) const {
  const double* row_p = P.data() + row(s, a);
  double acc = 0.0;
  for (int s2 = 0; s2 < n_states; ++s2) acc += row_p[s2] * v(s2);
  return acc;
}

void TabularMDP::validate(double r_max) const {
  if (n_states <= 0 || n_actions <= 0) throw std::invalid_argument("TabularMDP: empty state or action set");
  if (P.size() != static_cast<std::size_t>(n_states) * n_actions * n_states)
    throw std::invalid_argument("TabularMDP: transition tensor has wrong size");
  if (R.rows() != n_states || R.cols() != n_actions) throw std::invalid_argument("TabularMDP: reward table has wrong shape");
  if (!(gamma > 0.0 && gamma < 1.0)) throw std::invalid_argument("TabularMDP: gamma must lie in (0, 1)");
  for (int s = 0; s < n_states; ++s)
    for (int a = 0; a < n_actions; ++a) {
      double sum = 0.0;
      for (int s2 = 0; s2 < n_states; ++s2) {
        if (p(s, a, s2) < 0.0) throw std::invalid_argument("TabularMDP: negative probability");
        sum += p(s, a, s2);
      }
      if (std::abs(sum - 1.0) > 1e-12) throw std::invalid_argument("TabularMDP: row does not sum to 1");
      if (R(s, a) < 0.0 || R(s, a) > r_max) throw std::invalid_argument("TabularMDP: reward outside [0, R_max]");
    }
}

namespace {

void normalize_row(double* row_p, int n) {
  double sum = 0.0;
  for (int i = 0; i < n; ++i) sum += row_p[i];
  for (int i = 0; i < n; ++i) row_p[i] /= sum;
}

std::vector<double> random_distribution(int n, Rng& rng) {
  std::vector<double> d(static_cast<std::size_t>(n));
  for (auto& x : d) {
    double u = rng.uniform();
    while (u <= 0.0) u = rng.uniform();
    x = -std::log(u);
  }
  normalize_row(d.data(), n);
  return d;
}

}  // namespace

TabularMDP TabularMDP::random(int n_states, int n_actions, double gamma, Rng& rng, double r_max) {
  TabularMDP m;
  m.n_states = n_states;
  m.n_actions = n_actions;
  m.gamma = gamma;
  m.P.resize(static_cast<std::size_t>(n_states) * n_actions * n_states);
  m.R.resize(n_states, n_actions);
  for (int s = 0; s < n_states; ++s)
    for (int a = 0; a < n_actions; ++a) {
      const auto d = random_distribution(n_states, rng);
      std::copy(d.begin(), d.end(), m.P.begin() + static_cast<std::ptrdiff_t>(m.row(s, a)));
      m.R(s, a) = rng.uniform(0.0, r_max);
    }
  return m;
}

void BoundInputs::validate() const {
  if (H < 1) throw std::invalid_argument("BoundInputs: H must be >= 1");
  if (eps_m < 0.0 || eps_v < 0.0 || r_max < 0.0 || v_max < 0.0)
    throw std::invalid_argument("BoundInputs: all quantities must be nonnegative");
  if (!(gamma > 0.0 && gamma < 1.0)) throw std::invalid_argument("BoundInputs: gamma must lie in (0, 1)");
}

ValueTable value_iteration(const TabularMDP& mdp, double tol) {
  if (!(tol > 0.0)) throw std::invalid_argument("value_iteration: tol must be positive");
  ValueTable v = ValueTable::Zero(mdp.n_states);
  ValueTable next(mdp.n_states);
  for (;;) {
    for (int s = 0; s < mdp.n_states; ++s) {
      double best = -std::numeric_limits<double>::infinity();
      for (int a = 0; a < mdp.n_actions; ++a) best = std::max(best, mdp.R(s, a) + mdp.gamma * mdp.expect(s, a, v));
      next(s) = best;
    }
    const double residual = (next - v).cwiseAbs().maxCoeff();
    v.swap(next);
    // The residual measured here is of the previous iterate; one more
    // contraction step shrinks the current residual below it.
    if (mdp.gamma * residual <= tol) return v;
  }
}

TabularPolicy greedy_policy(const TabularMDP& mdp, const ValueTable& v) {
  TabularPolicy pi;
  pi.action.resize(static_cast<std::size_t>(mdp.n_states));
  for (int s = 0; s < mdp.n_states; ++s) {
    int best_a = 0;
    double best = -std::numeric_limits<double>::infinity();
    for (int a = 0; a < mdp.n_actions; ++a) {
      const double q = mdp.R(s, a) + mdp.gamma * mdp.expect(s, a, v);
      if (q > best) {
        best = q;
        best_a = a;
      }
    }
    pi.action[static_cast<std::size_t>(s)] = best_a;
  }
  return pi;
}

namespace {

Eigen::MatrixXd policy_matrix(const TabularMDP& mdp, const TabularPolicy& pi) {
  Eigen::MatrixXd p(mdp.n_states, mdp.n_states);
  for (int s = 0; s < mdp.n_states; ++s) {
    const int a = pi.action.at(static_cast<std::size_t>(s));
    if (a < 0 || a >= mdp.n_actions) throw std::out_of_range("policy action index out of range");
    for (int s2 = 0; s2 < mdp.n_states; ++s2) p(s, s2) = mdp.p(s, a, s2);
  }
  return p;
}

Eigen::VectorXd policy_reward(const TabularMDP& mdp, const TabularPolicy& pi) {
  Eigen::VectorXd r(mdp.n_states);
  for (int s = 0; s < mdp.n_states; ++s) r(s) = mdp.R(s, pi.action.at(static_cast<std::size_t>(s)));
  return r;
}

}  // namespace

ValueTable policy_value(const TabularMDP& mdp, const TabularPolicy& pi) {
  const Eigen::MatrixXd a =
      Eigen::MatrixXd::Identity(mdp.n_states, mdp.n_states) - mdp.gamma * policy_matrix(mdp, pi);
  return a.partialPivLu().solve(policy_reward(mdp, pi));
}

double total_variation(const double* p, const double* q, int n) {
  double acc = 0.0;
  for (int i = 0; i < n; ++i) acc += std::abs(p[i] - q[i]);
  return 0.5 * acc;
}

double max_row_tv(const TabularMDP& a, const TabularMDP& b) {
  double worst = 0.0;
  for (int s = 0; s < a.n_states; ++s)
    for (int act = 0; act < a.n_actions; ++act)
      worst = std::max(worst, total_variation(a.P.data() + a.row(s, act), b.P.data() + b.row(s, act), a.n_states));
  return worst;
}

TabularMDP perturb_model(const TabularMDP& mdp, double eps_m, Rng& rng) {
  if (eps_m < 0.0 || eps_m > 1.0) throw std::invalid_argument("perturb_model: eps_m must lie in [0, 1]");
  TabularMDP out = mdp;
  if (eps_m == 0.0) return out;
  for (int s = 0; s < mdp.n_states; ++s)
    for (int a = 0; a < mdp.n_actions; ++a) {
      const auto u = random_distribution(mdp.n_states, rng);
      double* row_p = out.P.data() + out.row(s, a);
      for (int s2 = 0; s2 < mdp.n_states; ++s2)
        row_p[s2] = (1.0 - eps_m) * row_p[s2] + eps_m * u[static_cast<std::size_t>(s2)];
      normalize_row(row_p, mdp.n_states);
    }
  return out;
}

ValueTable perturb_values(const ValueTable& v, double eps_v, double v_max, Rng& rng) {
  if (eps_v < 0.0) throw std::invalid_argument("perturb_values: eps_v must be nonnegative");
  ValueTable out = v;
  if (eps_v == 0.0) return out;
  for (Eigen::Index s = 0; s < v.size(); ++s) out(s) = std::clamp(v(s) + rng.uniform(-eps_v, eps_v), 0.0, v_max);
  return out;
}

std::vector<TabularPolicy> lookahead_plan(const TabularMDP& mdp_hat, const ValueTable& v_hat, int H) {
  if (H < 1) throw std::invalid_argument("lookahead_plan: H must be >= 1");
  std::vector<TabularPolicy> plan(static_cast<std::size_t>(H));
  ValueTable w = v_hat;
  for (int k = H - 1; k >= 0; --k) {
    TabularPolicy& d = plan[static_cast<std::size_t>(k)];
    d.action.resize(static_cast<std::size_t>(mdp_hat.n_states));
    ValueTable next(mdp_hat.n_states);
    for (int s = 0; s < mdp_hat.n_states; ++s) {
      int best_a = 0;
      double best = -std::numeric_limits<double>::infinity();
      for (int a = 0; a < mdp_hat.n_actions; ++a) {
        const double q = mdp_hat.R(s, a) + mdp_hat.gamma * mdp_hat.expect(s, a, w);
        if (q > best) {
          best = q;
          best_a = a;
        }
      }
      d.action[static_cast<std::size_t>(s)] = best_a;
      next(s) = best;
    }
    w.swap(next);
  }
  return plan;
}

TabularPolicy exact_lookahead_policy(const TabularMDP& mdp_hat, const ValueTable& v_hat, int H) {
  return lookahead_plan(mdp_hat, v_hat, H).front();
}

ValueTable periodic_policy_value(const TabularMDP& mdp, const std::vector<TabularPolicy>& plan) {
  if (plan.empty()) throw std::invalid_argument("periodic_policy_value: empty plan");
  const int n = mdp.n_states;
  Eigen::MatrixXd reach = Eigen::MatrixXd::Identity(n, n);  // P_{d0} ... P_{d(k-1)}
  Eigen::VectorXd block_reward = Eigen::VectorXd::Zero(n);
  double discount = 1.0;
  for (const auto& d : plan) {
    block_reward += discount * (reach * policy_reward(mdp, d));
    reach = reach * policy_matrix(mdp, d);
    discount *= mdp.gamma;
  }
  const Eigen::MatrixXd a = Eigen::MatrixXd::Identity(n, n) - discount * reach;
  return a.partialPivLu().solve(block_reward);
}

double model_error_constant(const BoundInputs& b) {
  b.validate();
  double sum = 0.0;
  double g = 1.0;
  for (int t = 0; t < b.H; ++t) {
    sum += g * t * b.eps_m;
    g *= b.gamma;
  }
  return b.r_max * sum + g * b.H * b.eps_m * b.v_max;
}

double lookahead_bound(const BoundInputs& b) {
  b.validate();
  const double gh = std::pow(b.gamma, b.H);
  return 2.0 / (1.0 - gh) * (model_error_constant(b) + gh * b.eps_v);
}

BoundReport verify_bound(const TabularMDP& mdp, const BoundInputs& b, int trials, Rng& rng) {
  if (trials < 1) throw std::invalid_argument("verify_bound: trials must be >= 1");
  b.validate();
  if (b.gamma != mdp.gamma) throw std::invalid_argument("verify_bound: gamma differs between MDP and bound inputs");
  mdp.validate(b.r_max);

  // V* exactly: evaluate the greedy policy of a tightly converged iterate.
  const ValueTable v_star = policy_value(mdp, greedy_policy(mdp, value_iteration(mdp, 1e-13)));
  const double bound = lookahead_bound(b);

  BoundReport report;
  double gap_sum = 0.0;
  for (int i = 0; i < trials; ++i) {
    const TabularMDP mdp_hat = perturb_model(mdp, b.eps_m, rng);
    const ValueTable v_hat = perturb_values(v_star, b.eps_v, b.v_max, rng);
    const auto plan = lookahead_plan(mdp_hat, v_hat, b.H);

    TrialRecord rec;
    rec.trial = i;
    rec.eps_m = b.eps_m;
    rec.eps_v = b.eps_v;
    rec.H = b.H;
    rec.gap = std::max(0.0, (v_star - periodic_policy_value(mdp, plan)).maxCoeff());
    rec.mpc_gap = std::max(0.0, (v_star - policy_value(mdp, plan.front())).maxCoeff());
    rec.measured_tv = max_row_tv(mdp, mdp_hat);
    rec.measured_value_error = (v_star - v_hat).cwiseAbs().maxCoeff();
    rec.bound = bound;
    rec.slack = bound - rec.gap;
    // Exact DP carries roundoff around 1e-12; a genuine violation is far larger.
    rec.holds = rec.gap <= bound + 1e-9;
    report.holds = report.holds && rec.holds;
    report.max_gap = std::max(report.max_gap, rec.gap);
    gap_sum += rec.gap;
    report.trials.push_back(rec);
  }
  report.mean_gap = gap_sum / trials;
  return report;
}

nlohmann::json to_json(const TrialRecord& r) {
  return {{"trial", r.trial},
          {"eps_m", r.eps_m},
          {"eps_v", r.eps_v},
          {"H", r.H},
          {"gap", r.gap},
          {"mpc_gap", r.mpc_gap},
          {"measured_tv", r.measured_tv},
          {"measured_value_error", r.measured_value_error},
          {"bound", r.bound},
          {"slack", r.slack},
          {"holds", r.holds}};
}

double gaussian_kl(double mu1, double sigma1, double mu2, double sigma2) {
  if (!(sigma1 > 0.0 && sigma2 > 0.0)) throw std::invalid_argument("gaussian_kl: std must be positive");
  const double d = mu1 - mu2;
  return std::log(sigma2 / sigma1) + (sigma1 * sigma1 + d * d) / (2.0 * sigma2 * sigma2) - 0.5;
}

double gaussian_tv_numeric(double mu1, double sigma1, double mu2, double sigma2, double* error) {
  if (!(sigma1 > 0.0 && sigma2 > 0.0)) throw std::invalid_argument("gaussian_tv_numeric: std must be positive");
  if (error) *error = 0.0;
  if (mu1 == mu2 && sigma1 == sigma2) return 0.0;

  const auto pdf = [](double x, double mu, double sigma) {
    const double z = (x - mu) / sigma;
    return std::exp(-0.5 * z * z) / (sigma * std::sqrt(2.0 * std::numbers::pi));
  };
  const auto integrand = [&](double x) { return 0.5 * std::abs(pdf(x, mu1, sigma1) - pdf(x, mu2, sigma2)); };

  // Crossings of the two densities: a x^2 + b x + c = 0.
  std::vector<double> cuts;
  const double a = 0.5 / (sigma2 * sigma2) - 0.5 / (sigma1 * sigma1);
  const double b = mu1 / (sigma1 * sigma1) - mu2 / (sigma2 * sigma2);
  const double c = 0.5 * mu2 * mu2 / (sigma2 * sigma2) - 0.5 * mu1 * mu1 / (sigma1 * sigma1) + std::log(sigma2 / sigma1);
  if (a == 0.0) {
    cuts.push_back(-c / b);
  } else {
    const double disc = b * b - 4.0 * a * c;
    if (disc >= 0.0) {
      const double root = std::sqrt(disc);
      cuts.push_back((-b - root) / (2.0 * a));
      cuts.push_back((-b + root) / (2.0 * a));
      std::sort(cuts.begin(), cuts.end());
    }
  }
  std::vector<double> edges{-std::numeric_limits<double>::infinity()};
  edges.insert(edges.end(), cuts.begin(), cuts.end());
  edges.push_back(std::numeric_limits<double>::infinity());

  using Quadrature = boost::math::quadrature::gauss_kronrod<double, 61>;
  double total = 0.0;
  for (std::size_t i = 0; i + 1 < edges.size(); ++i) {
    double err = 0.0;
    total += Quadrature::integrate(integrand, edges[i], edges[i + 1], 20, 1e-13, &err);
    if (error) *error += err;
  }
  return total;
}

TvChainReport trust_region_tv_check(double kl_step, int steps) {
  if (!(kl_step > 0.0)) throw std::invalid_argument("trust_region_tv_check: kl_step must be positive");
  if (steps < 0) throw std::invalid_argument("trust_region_tv_check: negative step count");
  TvChainReport rep;
  rep.steps = steps;
  rep.kl_step = kl_step;
  rep.per_step_bound = std::sqrt(kl_step / 2.0);
  rep.bound = steps * rep.per_step_bound;

  // Unit-variance Gaussians shifted by d have KL d^2 / 2.
  const double shift = std::sqrt(2.0 * kl_step);
  for (int k = 0; k < steps; ++k) {
    const double mu_a = k * shift;
    const double mu_b = (k + 1) * shift;
    double err = 0.0;
    rep.step_kl.push_back(gaussian_kl(mu_a, 1.0, mu_b, 1.0));
    rep.step_tv.push_back(gaussian_tv_numeric(mu_a, 1.0, mu_b, 1.0, &err));
    rep.max_quadrature_error = std::max(rep.max_quadrature_error, err);
    rep.holds = rep.holds && rep.step_kl.back() <= kl_step * (1.0 + 1e-12) &&
                rep.step_tv.back() <= rep.per_step_bound;
  }
  double err = 0.0;
  rep.total_tv = gaussian_tv_numeric(0.0, 1.0, steps * shift, 1.0, &err);
  rep.max_quadrature_error = std::max(rep.max_quadrature_error, err);
  rep.holds = rep.holds && rep.total_tv <= rep.bound;
  return rep;
}

nlohmann::json to_json(const TvChainReport& r) {
  return {{"steps", r.steps},          {"kl_step", r.kl_step},   {"step_kl", r.step_kl},
          {"step_tv", r.step_tv},      {"total_tv", r.total_tv}, {"bound", r.bound},
          {"per_step_bound", r.per_step_bound}, {"max_quadrature_error", r.max_quadrature_error},
          {"holds", r.holds}};
}

}  // namespace loop::tabular
