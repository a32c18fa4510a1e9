// SPDX-License-Identifier: Apache-2.0
#include "loop/arc.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <thread>

namespace loop {

SequenceDistribution SequenceDistribution::initial(int horizon, const ActionBounds& bounds, double sigma) {
  if (horizon < 1) throw std::invalid_argument("SequenceDistribution: horizon must be positive");
  const Eigen::VectorXd center = 0.5 * (bounds.lo + bounds.hi);
  SequenceDistribution d;
  d.mean = center.replicate(1, horizon);
  d.std = Eigen::MatrixXd::Constant(bounds.dim(), horizon, sigma);
  return d;
}

SequenceDistribution SequenceDistribution::shifted(const ActionBounds& bounds, double sigma) const {
  SequenceDistribution d;
  const int h = horizon();
  d.mean.resize(action_dim(), h);
  if (h > 1) d.mean.leftCols(h - 1) = mean.rightCols(h - 1);
  d.mean.col(h - 1) = 0.5 * (bounds.lo + bounds.hi);
  d.std = Eigen::MatrixXd::Constant(action_dim(), h, sigma);
  return d;
}

void SequenceDistribution::validate() const {
  if (mean.cols() < 1 || mean.rows() < 1) throw std::invalid_argument("SequenceDistribution: empty");
  if (std.rows() != mean.rows() || std.cols() != mean.cols()) throw std::invalid_argument("SequenceDistribution: shape mismatch");
  if (!mean.allFinite() || !std.allFinite() || (std.array() < 0.0).any())
    throw std::invalid_argument("SequenceDistribution: mean must be finite and std non-negative");
}

void PlannerConfig::validate() const {
  if (horizon < 1 || particles < 1 || iterations < 1 || threads < 1)
    throw std::invalid_argument("PlannerConfig: horizon, particles, iterations and threads must be positive");
  if (population < 2) throw std::invalid_argument("PlannerConfig: population must be at least 2");
  if (!(alpha > 0.0 && alpha <= 1.0)) throw std::invalid_argument("PlannerConfig: alpha must lie in (0, 1]");
  if (!(beta >= 0.0 && beta <= 1.0)) throw std::invalid_argument("PlannerConfig: beta must lie in [0, 1]");
  if (!(kappa > 0.0)) throw std::invalid_argument("PlannerConfig: kappa must be positive");
  if (!(sigma_prior >= 0.0 && sigma_floor >= 0.0)) throw std::invalid_argument("PlannerConfig: stds must be non-negative");
  if (!(lambda_pess >= 0.0)) throw std::invalid_argument("PlannerConfig: lambda_pess must be non-negative");
  if (!(gamma > 0.0 && gamma <= 1.0)) throw std::invalid_argument("PlannerConfig: gamma must lie in (0, 1]");
  if (!(elite_frac > 0.0 && elite_frac <= 1.0)) throw std::invalid_argument("PlannerConfig: elite_frac must lie in (0, 1]");
}

void SafeConfig::validate() const {
  if (!(d0 >= 0.0)) throw std::invalid_argument("SafeConfig: d0 must be non-negative");
  if (min_safe < 1) throw std::invalid_argument("SafeConfig: min_safe must be at least 1");
}

nlohmann::json to_json(const PlannerConfig& c) {
  return {{"horizon", c.horizon},
          {"population", c.population},
          {"particles", c.particles},
          {"iterations", c.iterations},
          {"alpha", c.alpha},
          {"beta", c.beta},
          {"kappa", c.kappa},
          {"sigma_prior", c.sigma_prior},
          {"sigma_floor", c.sigma_floor},
          {"lambda_pess", c.lambda_pess},
          {"dispersion", c.dispersion == Dispersion::kVariance ? "variance" : "std"},
          {"gamma", c.gamma},
          {"terminal_value", c.terminal_value},
          {"optimizer", c.optimizer == PlanOptimizer::kArc ? "arc" : "cem"},
          {"elite_frac", c.elite_frac},
          {"threads", c.threads}};
}

PlannerConfig planner_config_from_json(const nlohmann::json& j, PlannerConfig c) {
  c.horizon = j.value("horizon", c.horizon);
  c.population = j.value("population", c.population);
  c.particles = j.value("particles", c.particles);
  c.iterations = j.value("iterations", c.iterations);
  c.alpha = j.value("alpha", c.alpha);
  c.beta = j.value("beta", c.beta);
  c.kappa = j.value("kappa", c.kappa);
  c.sigma_prior = j.value("sigma_prior", c.sigma_prior);
  c.sigma_floor = j.value("sigma_floor", c.sigma_floor);
  c.lambda_pess = j.value("lambda_pess", c.lambda_pess);
  c.gamma = j.value("gamma", c.gamma);
  c.terminal_value = j.value("terminal_value", c.terminal_value);
  c.elite_frac = j.value("elite_frac", c.elite_frac);
  c.threads = j.value("threads", c.threads);
  if (j.contains("dispersion")) {
    const auto d = j.at("dispersion").get<std::string>();
    if (d != "variance" && d != "std") throw std::invalid_argument("planner dispersion must be variance or std");
    c.dispersion = d == "variance" ? Dispersion::kVariance : Dispersion::kStd;
  }
  if (j.contains("optimizer")) {
    const auto o = j.at("optimizer").get<std::string>();
    if (o != "arc" && o != "cem") throw std::invalid_argument("planner optimizer must be arc or cem");
    c.optimizer = o == "arc" ? PlanOptimizer::kArc : PlanOptimizer::kCem;
  }
  c.validate();
  return c;
}

void EnsembleModel::step(int member, const Eigen::MatrixXd& s, const Eigen::MatrixXd& a, Rng* rng,
                         Eigen::MatrixXd& s_next, Eigen::VectorXd& reward) const {
  MemberPrediction p = ensemble_->predict_batch(member, s, a);
  s_next = std::move(p.mean);
  if (rng)
    for (Eigen::Index c = 0; c < s_next.cols(); ++c)
      for (Eigen::Index r = 0; r < s_next.rows(); ++r) s_next(r, c) += p.std(r, c) * rng->normal();
  reward = std::move(p.reward);
}

Population sample_prior(const StateVec& s, const PlanContext& ctx, const SequenceDistribution& dist,
                        const PlannerConfig& cfg, Rng& rng) {
  const int h = cfg.horizon, n = cfg.population, ad = ctx.bounds.dim();
  if (dist.horizon() != h || dist.action_dim() != ad) throw std::invalid_argument("sample_prior: distribution shape mismatch");
  const bool use_actor = cfg.beta > 0.0;
  if (use_actor && (!ctx.actor || !ctx.model)) throw std::invalid_argument("sample_prior: actor branch needs an actor and a model");

  Population pop;
  pop.actions.resize(static_cast<Eigen::Index>(ad) * h, n);
  pop.from_actor.setConstant(h, n, false);
  Eigen::MatrixXd nominal = s.replicate(1, n);
  for (int t = 0; t < h; ++t) {
    Eigen::MatrixXd a_t(ad, n);
    Eigen::MatrixXd actor_a;
    if (use_actor) actor_a = ctx.actor(nominal, rng);
    for (int j = 0; j < n; ++j) {
      const bool pick_actor = cfg.beta >= 1.0 || (use_actor && rng.bernoulli(cfg.beta));
      pop.from_actor(t, j) = pick_actor;
      if (pick_actor) {
        a_t.col(j) = actor_a.col(j);
      } else {
        for (int i = 0; i < ad; ++i) a_t(i, j) = dist.mean(i, t) + dist.std(i, t) * rng.normal();
      }
    }
    a_t = a_t.cwiseMax(ctx.bounds.lo.replicate(1, n)).cwiseMin(ctx.bounds.hi.replicate(1, n));
    pop.actions.middleRows(static_cast<Eigen::Index>(t) * ad, ad) = a_t;
    if (use_actor && t + 1 < h) {
      Eigen::VectorXd unused;
      ctx.model->step(ctx.nominal_member, nominal, a_t, nullptr, nominal, unused);
    }
  }
  return pop;
}

namespace {

template <class F>
void parallel_for(int count, int threads, F&& body) {
  if (threads <= 1 || count <= 1) {
    for (int i = 0; i < count; ++i) body(i);
    return;
  }
  std::vector<std::thread> pool;
  const int workers = std::min(threads, count);
  for (int w = 0; w < workers; ++w)
    pool.emplace_back([&, w] {
      for (int i = w; i < count; i += workers) body(i);
    });
  for (auto& t : pool) t.join();
}

}  // namespace

SequenceScores score_sequences(const StateVec& s, const Population& pop, const PlanContext& ctx,
                               const PlannerConfig& cfg, bool with_costs, Rng& rng) {
  if (ctx.scorer) return ctx.scorer(pop, rng);
  if (!ctx.model) throw std::invalid_argument("score_sequences: no model or scorer");
  if (cfg.terminal_value && !ctx.terminal) throw std::invalid_argument("score_sequences: terminal value missing");
  if (with_costs && !ctx.cost) throw std::invalid_argument("score_sequences: cost function missing");

  const int h = cfg.horizon, ad = ctx.bounds.dim(), k_count = ctx.model->members(), p_count = cfg.particles;
  const auto n = pop.actions.cols();
  const std::uint64_t base = rng.next_u64();
  std::vector<Eigen::VectorXd> ret(static_cast<std::size_t>(k_count * p_count));
  std::vector<Eigen::VectorXd> cost(ret.size());

  parallel_for(k_count * p_count, cfg.threads, [&](int idx) {
    const int k = idx / p_count;
    Rng r = Rng::derive(base, static_cast<std::uint64_t>(idx));
    Eigen::MatrixXd state = s.replicate(1, n), next;
    Eigen::VectorXd reward, total = Eigen::VectorXd::Zero(n), c_total = Eigen::VectorXd::Zero(n);
    double discount = 1.0;
    for (int t = 0; t < h; ++t) {
      const Eigen::MatrixXd a_t = pop.actions.middleRows(static_cast<Eigen::Index>(t) * ad, ad);
      const bool last = t + 1 == h;
      if (last && cfg.terminal_value) {
        total += discount * ctx.terminal(state, a_t);
        if (with_costs) {
          ctx.model->step(k, state, a_t, &r, next, reward);
          c_total += discount * ctx.cost(state, a_t, next);
        }
      } else {
        ctx.model->step(k, state, a_t, &r, next, reward);
        total += discount * reward;
        if (with_costs) c_total += discount * ctx.cost(state, a_t, next);
        state.swap(next);
      }
      discount *= cfg.gamma;
    }
    ret[static_cast<std::size_t>(idx)] = std::move(total);
    cost[static_cast<std::size_t>(idx)] = std::move(c_total);
  });

  SequenceScores out;
  out.returns = Eigen::MatrixXd::Zero(n, k_count);
  if (with_costs) out.costs = Eigen::VectorXd::Constant(n, -std::numeric_limits<double>::infinity());
  for (int k = 0; k < k_count; ++k)
    for (int p = 0; p < p_count; ++p) {
      const auto idx = static_cast<std::size_t>(k * p_count + p);
      out.returns.col(k) += ret[idx] / static_cast<double>(p_count);
      if (with_costs) out.costs = out.costs.cwiseMax(cost[idx]);
    }
  return out;
}

Eigen::VectorXd aggregate(const Eigen::MatrixXd& returns, double lambda_pess, Dispersion dispersion) {
  if (returns.cols() < 1) throw std::invalid_argument("aggregate: need at least one member");
  const Eigen::VectorXd mean = returns.rowwise().mean();
  if (lambda_pess == 0.0) return mean;
  Eigen::VectorXd spread = (returns.colwise() - mean).array().square().rowwise().mean();
  if (dispersion == Dispersion::kStd) spread = spread.cwiseSqrt();
  return mean - lambda_pess * spread;
}

Eigen::VectorXd importance_weights(const Eigen::VectorXd& scores, double kappa) {
  if (scores.size() == 0) throw std::invalid_argument("importance_weights: empty scores");
  if (!scores.allFinite()) throw std::invalid_argument("importance_weights: scores must be finite");
  const Eigen::VectorXd w = (kappa * (scores.array() - scores.maxCoeff())).exp();
  return w / w.sum();
}

namespace {

SequenceDistribution smooth(const Eigen::VectorXd& mean_new, const Eigen::VectorXd& var_new,
                            const SequenceDistribution& dist, const PlannerConfig& cfg) {
  SequenceDistribution out;
  const Eigen::Map<const Eigen::VectorXd> mean_old(dist.mean.data(), dist.mean.size());
  const Eigen::Map<const Eigen::VectorXd> std_old(dist.std.data(), dist.std.size());
  const Eigen::VectorXd mean = cfg.alpha * mean_new + (1.0 - cfg.alpha) * mean_old;
  const Eigen::VectorXd var = cfg.alpha * var_new + (1.0 - cfg.alpha) * std_old.cwiseAbs2();
  out.mean = Eigen::Map<const Eigen::MatrixXd>(mean.data(), dist.mean.rows(), dist.mean.cols());
  out.std = Eigen::Map<const Eigen::MatrixXd>(var.data(), dist.mean.rows(), dist.mean.cols()).cwiseSqrt().cwiseMax(cfg.sigma_floor);
  return out;
}

}  // namespace

SequenceDistribution is_update(const Population& pop, const Eigen::VectorXd& scores, const SequenceDistribution& dist,
                               const PlannerConfig& cfg, const std::vector<int>* subset) {
  if (scores.size() != pop.actions.cols()) throw std::invalid_argument("is_update: one score per sequence required");
  if (pop.actions.rows() != dist.mean.size()) throw std::invalid_argument("is_update: distribution shape mismatch");
  std::vector<int> idx;
  if (subset) {
    if (subset->empty()) throw std::invalid_argument("is_update: empty subset");
    idx = *subset;
  } else {
    idx.resize(static_cast<std::size_t>(scores.size()));
    std::iota(idx.begin(), idx.end(), 0);
  }
  Eigen::VectorXd sel(static_cast<Eigen::Index>(idx.size()));
  for (std::size_t i = 0; i < idx.size(); ++i) sel(static_cast<Eigen::Index>(i)) = scores(idx[i]);
  const Eigen::VectorXd w = importance_weights(sel, cfg.kappa);

  Eigen::VectorXd mean_new = Eigen::VectorXd::Zero(pop.actions.rows());
  for (std::size_t i = 0; i < idx.size(); ++i) mean_new += w(static_cast<Eigen::Index>(i)) * pop.actions.col(idx[i]);
  Eigen::VectorXd var_new = Eigen::VectorXd::Zero(pop.actions.rows());
  for (std::size_t i = 0; i < idx.size(); ++i)
    var_new += w(static_cast<Eigen::Index>(i)) * (pop.actions.col(idx[i]) - mean_new).cwiseAbs2();
  return smooth(mean_new, var_new, dist, cfg);
}

SequenceDistribution cem_update(const Population& pop, const Eigen::VectorXd& scores, const SequenceDistribution& dist,
                                const PlannerConfig& cfg) {
  if (scores.size() != pop.actions.cols()) throw std::invalid_argument("cem_update: one score per sequence required");
  const auto n = static_cast<int>(scores.size());
  const int elites = std::clamp(static_cast<int>(std::ceil(cfg.elite_frac * n)), 1, n);
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return scores(a) > scores(b); });
  Eigen::VectorXd mean_new = Eigen::VectorXd::Zero(pop.actions.rows());
  for (int i = 0; i < elites; ++i) mean_new += pop.actions.col(order[static_cast<std::size_t>(i)]);
  mean_new /= elites;
  Eigen::VectorXd var_new = Eigen::VectorXd::Zero(pop.actions.rows());
  for (int i = 0; i < elites; ++i) var_new += (pop.actions.col(order[static_cast<std::size_t>(i)]) - mean_new).cwiseAbs2();
  var_new /= elites;
  return smooth(mean_new, var_new, dist, cfg);
}

double sequence_kl(const SequenceDistribution& p, const SequenceDistribution& q) {
  const Eigen::ArrayXXd sp = p.std.array(), sq = q.std.array();
  return ((sq / sp).log() + (sp.square() + (p.mean - q.mean).array().square()) / (2.0 * sq.square()) - 0.5).sum();
}

namespace {

PlanResult plan(const StateVec& s, const PlanContext& ctx, const PlannerConfig& cfg, const SafeConfig* safe,
                const SequenceDistribution& prev, Rng& rng) {
  cfg.validate();
  prev.validate();
  if (safe) safe->validate();
  if (s.size() == 0) throw std::invalid_argument("plan: empty state");
  PlanResult out;
  SequenceDistribution dist = prev;
  long long actor_picks = 0;
  double max_kl = 0.0;
  const long long per_iter =
      ctx.scorer ? cfg.population
                 : static_cast<long long>(cfg.population) * cfg.particles * (ctx.model ? ctx.model->members() : 0);
  for (int it = 0; it < cfg.iterations; ++it) {
    const Population pop = sample_prior(s, ctx, dist, cfg, rng);
    actor_picks += pop.from_actor.count();
    const SequenceScores sc = score_sequences(s, pop, ctx, cfg, safe != nullptr, rng);
    out.rollouts += per_iter;
    const Eigen::VectorXd scores = aggregate(sc.returns, cfg.lambda_pess, cfg.dispersion);
    out.best_score = scores.maxCoeff();
    out.mean_score = scores.mean();

    SequenceDistribution next;
    if (safe) {
      if (sc.costs.size() != scores.size()) throw std::invalid_argument("safe planning: scorer returned no costs");
      std::vector<int> ok;
      for (Eigen::Index j = 0; j < sc.costs.size(); ++j)
        if (sc.costs(j) <= safe->d0) ok.push_back(static_cast<int>(j));
      out.safe_count = static_cast<int>(ok.size());
      next = static_cast<int>(ok.size()) < safe->min_safe ? is_update(pop, -sc.costs, dist, cfg)
                                                           : is_update(pop, scores, dist, cfg, &ok);
    } else if (cfg.optimizer == PlanOptimizer::kCem) {
      next = cem_update(pop, scores, dist, cfg);
    } else {
      next = is_update(pop, scores, dist, cfg);
    }
    const double kl = sequence_kl(next, dist);
    out.kl_per_iteration.push_back(kl);
    max_kl = std::max(max_kl, kl);
    dist = std::move(next);
  }
  out.actor_fraction = static_cast<double>(actor_picks) /
                       (static_cast<double>(cfg.iterations) * cfg.population * cfg.horizon);
  out.tv_bound = cfg.iterations * std::sqrt(max_kl / 2.0);
  out.action = ctx.bounds.clip(dist.mean.col(0));
  out.next = dist.shifted(ctx.bounds, cfg.sigma_prior);
  out.final = std::move(dist);
  return out;
}

}  // namespace

PlanResult arc_plan(const StateVec& s, const PlanContext& ctx, const PlannerConfig& cfg,
                    const SequenceDistribution& prev, Rng& rng) {
  return plan(s, ctx, cfg, nullptr, prev, rng);
}

PlanResult safe_arc_plan(const StateVec& s, const PlanContext& ctx, const PlannerConfig& cfg, const SafeConfig& safe,
                         const SequenceDistribution& prev, Rng& rng) {
  return plan(s, ctx, cfg, &safe, prev, rng);
}

}  // namespace loop
