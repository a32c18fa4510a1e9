// SPDX-License-Identifier: Apache-2.0
#include "loop/envs.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace loop {

void EnvSpec::validate() const {
  if (state_dim < 1 || action_dim < 1 || max_steps < 1) throw std::invalid_argument("EnvSpec: dims must be positive");
  if (bounds.dim() != action_dim || (bounds.lo.array() >= bounds.hi.array()).any())
    throw std::invalid_argument("EnvSpec: bounds must satisfy lo < hi");
}

Eigen::VectorXd Env::cost_batch(const Eigen::MatrixXd& obs_next) const { return Eigen::VectorXd::Zero(obs_next.cols()); }

StepResult env_step(const Env& env, const Eigen::VectorXd& state, const ActionVec& a, Rng& rng) {
  auto copy = env.clone();
  copy->set_state(state);
  return copy->step(a, rng);
}

namespace {

void check_action(const Env& env, const ActionVec& a) {
  if (a.size() != env.spec().action_dim) throw std::invalid_argument(env.spec().id + ": action dimension mismatch");
  if (!a.allFinite()) throw std::invalid_argument(env.spec().id + ": non-finite action");
}

}  // namespace

// Pendulum

PendulumEnv::PendulumEnv(Params p) : p_(p) {
  if (!(p_.dt > 0 && p_.mass > 0 && p_.length > 0 && p_.max_speed > 0 && p_.max_torque > 0 && p_.process_noise >= 0))
    throw std::invalid_argument("PendulumEnv: physical constants must be positive");
  spec_.id = "pendulum";
  spec_.state_dim = 3;
  spec_.action_dim = 1;
  spec_.bounds = ActionBounds::symmetric(1, p_.max_torque);
  spec_.max_steps = p_.max_steps;
  spec_.reward = "-(theta^2 + 0.1 theta_dot^2 + 0.001 u^2)";
  spec_.cost = "none";
  spec_.validate();
}

double PendulumEnv::wrap(double angle) {
  double a = std::fmod(angle + std::numbers::pi, 2.0 * std::numbers::pi);
  if (a <= 0.0) a += 2.0 * std::numbers::pi;
  return a - std::numbers::pi;  // in (-pi, pi]
}

StateVec PendulumEnv::reset(Rng& rng) {
  theta_ = rng.uniform(-std::numbers::pi, std::numbers::pi);
  theta_dot_ = rng.uniform(-1.0, 1.0);
  return observe();
}

void PendulumEnv::set_state(const Eigen::VectorXd& state) {
  if (state.size() != 2 || !state.allFinite()) throw std::invalid_argument("PendulumEnv: state must be (theta, theta_dot)");
  theta_ = wrap(state(0));
  theta_dot_ = std::clamp(state(1), -p_.max_speed, p_.max_speed);
}

StateVec PendulumEnv::observe() const { return Eigen::Vector3d(std::cos(theta_), std::sin(theta_), theta_dot_); }

double PendulumEnv::energy() const {
  // rod about its end: I = m l^2 / 3, center of mass at l / 2
  const double inertia = p_.mass * p_.length * p_.length / 3.0;
  return 0.5 * inertia * theta_dot_ * theta_dot_ + p_.mass * p_.g * 0.5 * p_.length * (std::cos(theta_) - 1.0);
}

StepResult PendulumEnv::step(const ActionVec& a, Rng& rng) {
  check_action(*this, a);
  if (!std::isfinite(theta_) || !std::isfinite(theta_dot_)) throw std::runtime_error("PendulumEnv: non-finite state");
  const double u = std::clamp(a(0), -p_.max_torque, p_.max_torque);
  StepResult out;
  out.reward = -(theta_ * theta_ + 0.1 * theta_dot_ * theta_dot_ + 0.001 * u * u);
  const double accel = 3.0 * p_.g / (2.0 * p_.length) * std::sin(theta_) + 3.0 / (p_.mass * p_.length * p_.length) * u;
  double w = theta_dot_ + accel * p_.dt;
  if (p_.process_noise > 0.0) w += p_.process_noise * rng.normal();
  theta_dot_ = std::clamp(w, -p_.max_speed, p_.max_speed);
  theta_ = wrap(theta_ + theta_dot_ * p_.dt);
  if (!std::isfinite(theta_) || !std::isfinite(theta_dot_)) throw std::runtime_error("PendulumEnv: non-finite state");
  out.obs = observe();
  return out;
}

nlohmann::json PendulumEnv::to_json() const {
  return {{"id", "pendulum"},          {"g", p_.g},
          {"mass", p_.mass},           {"length", p_.length},
          {"dt", p_.dt},               {"max_speed", p_.max_speed},
          {"max_torque", p_.max_torque}, {"max_steps", p_.max_steps},
          {"process_noise", p_.process_noise}};
}

// PointNav

PointNavEnv::PointNavEnv(Params p) : p_(std::move(p)) {
  if (!(p_.hazard_radius >= 0 && p_.goal_radius > 0 && p_.dt > 0 && p_.max_speed > 0 && p_.action_repeat >= 1 &&
        p_.damping >= 0 && p_.damping <= 1 && p_.process_noise >= 0 && p_.hazard_jitter >= 0 && p_.arena >= 0))
    throw std::invalid_argument("PointNavEnv: invalid parameters");
  spec_.id = "pointnav";
  spec_.state_dim = 4;
  spec_.action_dim = 2;
  spec_.bounds = ActionBounds::symmetric(2, 1.0);
  spec_.max_steps = p_.max_steps;
  spec_.has_cost = true;
  spec_.reward = "distance-to-goal improvement plus goal bonus";
  spec_.cost = "1 inside the hazard disc";
  spec_.validate();
  hazard_ = p_.hazard;
  if (p_.hazard_jitter > 0.0) {
    Rng layout(p_.layout_seed);
    hazard_(1) += layout.uniform(-p_.hazard_jitter, p_.hazard_jitter);
  }
}

bool PointNavEnv::in_hazard(const Eigen::Vector2d& pos) const { return (pos - hazard_).norm() <= p_.hazard_radius; }

StateVec PointNavEnv::reset(Rng& rng) {
  state_.setZero();
  state_(0) = p_.start_noise * rng.normal();
  state_(1) = p_.start_noise * rng.normal();
  return state_;
}

void PointNavEnv::set_state(const Eigen::VectorXd& state) {
  if (state.size() != 4 || !state.allFinite()) throw std::invalid_argument("PointNavEnv: state must be (x, y, vx, vy)");
  state_ = state;
}

StepResult PointNavEnv::step(const ActionVec& a, Rng& rng) {
  check_action(*this, a);
  if (!state_.allFinite()) throw std::runtime_error("PointNavEnv: non-finite state");
  const Eigen::Vector2d acc = spec_.bounds.clip(a) * p_.accel;
  StepResult out;
  for (int k = 0; k < p_.action_repeat && !out.done; ++k) {
    const Eigen::Vector2d pos = state_.head<2>();
    Eigen::Vector2d vel = p_.damping * state_.tail<2>() + acc * p_.dt;
    if (p_.process_noise > 0.0) vel += p_.process_noise * Eigen::Vector2d(rng.normal(), rng.normal());
    const double speed = vel.norm();
    if (speed > p_.max_speed) vel *= p_.max_speed / speed;
    Eigen::Vector2d next = pos + vel * p_.dt;
    if (p_.arena > 0.0)
      for (int i = 0; i < 2; ++i)
        if (std::abs(next(i)) > p_.arena) {
          next(i) = std::clamp(next(i), -p_.arena, p_.arena);
          vel(i) = 0.0;
        }
    state_ << next, vel;
    out.reward += (pos - p_.goal).norm() - (next - p_.goal).norm();
    if (in_hazard(next)) out.cost = 1.0;
    if ((next - p_.goal).norm() <= p_.goal_radius) {
      out.reward += p_.goal_bonus;
      out.done = true;
    }
  }
  if (!state_.allFinite()) throw std::runtime_error("PointNavEnv: non-finite state");
  out.obs = state_;
  return out;
}

Eigen::VectorXd PointNavEnv::cost_batch(const Eigen::MatrixXd& obs_next) const {
  if (obs_next.rows() != 4) throw std::invalid_argument("PointNavEnv::cost_batch: expected 4-dim observations");
  Eigen::VectorXd c(obs_next.cols());
  for (Eigen::Index j = 0; j < obs_next.cols(); ++j) c(j) = in_hazard(obs_next.col(j).head<2>()) ? 1.0 : 0.0;
  return c;
}

nlohmann::json PointNavEnv::to_json() const {
  return {{"id", "pointnav"},
          {"goal", {p_.goal(0), p_.goal(1)}},
          {"hazard", {p_.hazard(0), p_.hazard(1)}},
          {"hazard_radius", p_.hazard_radius},
          {"hazard_jitter", p_.hazard_jitter},
          {"layout_seed", p_.layout_seed},
          {"goal_radius", p_.goal_radius},
          {"goal_bonus", p_.goal_bonus},
          {"dt", p_.dt},
          {"damping", p_.damping},
          {"accel", p_.accel},
          {"max_speed", p_.max_speed},
          {"start_noise", p_.start_noise},
          {"action_repeat", p_.action_repeat},
          {"max_steps", p_.max_steps},
          {"process_noise", p_.process_noise},
          {"arena", p_.arena}};
}

std::unique_ptr<Env> make_env(const nlohmann::json& cfg) {
  const std::string id = cfg.value("id", "");
  if (id == "pendulum") {
    PendulumEnv::Params p;
    p.g = cfg.value("g", p.g);
    p.mass = cfg.value("mass", p.mass);
    p.length = cfg.value("length", p.length);
    p.dt = cfg.value("dt", p.dt);
    p.max_speed = cfg.value("max_speed", p.max_speed);
    p.max_torque = cfg.value("max_torque", p.max_torque);
    p.max_steps = cfg.value("max_steps", p.max_steps);
    p.process_noise = cfg.value("process_noise", p.process_noise);
    return std::make_unique<PendulumEnv>(p);
  }
  if (id == "pointnav") {
    PointNavEnv::Params p;
    auto vec2 = [&](const char* key, Eigen::Vector2d& v) {
      if (cfg.contains(key)) {
        const auto xy = cfg.at(key).get<std::vector<double>>();
        if (xy.size() != 2) throw std::invalid_argument(std::string("pointnav ") + key + " must have two entries");
        v = Eigen::Vector2d(xy[0], xy[1]);
      }
    };
    vec2("goal", p.goal);
    vec2("hazard", p.hazard);
    p.hazard_radius = cfg.value("hazard_radius", p.hazard_radius);
    p.hazard_jitter = cfg.value("hazard_jitter", p.hazard_jitter);
    p.layout_seed = cfg.value("layout_seed", p.layout_seed);
    p.goal_radius = cfg.value("goal_radius", p.goal_radius);
    p.goal_bonus = cfg.value("goal_bonus", p.goal_bonus);
    p.dt = cfg.value("dt", p.dt);
    p.damping = cfg.value("damping", p.damping);
    p.accel = cfg.value("accel", p.accel);
    p.max_speed = cfg.value("max_speed", p.max_speed);
    p.start_noise = cfg.value("start_noise", p.start_noise);
    p.action_repeat = cfg.value("action_repeat", p.action_repeat);
    p.max_steps = cfg.value("max_steps", p.max_steps);
    p.process_noise = cfg.value("process_noise", p.process_noise);
    p.arena = cfg.value("arena", p.arena);
    return std::make_unique<PointNavEnv>(p);
  }
  throw std::invalid_argument("unknown environment id '" + id + "'");
}

// Behavior policies

namespace {

ActionVec uniform_action(const ActionBounds& b, Rng& rng) {
  ActionVec a(b.dim());
  for (int i = 0; i < b.dim(); ++i) a(i) = rng.uniform(b.lo(i), b.hi(i));
  return a;
}

// Energy pumping away from the top, PD stabilization near it.
ActionVec pendulum_expert(const PendulumEnv::Params& p, const StateVec& obs) {
  const double theta = std::atan2(obs(1), obs(0));
  const double w = obs(2);
  const double a = 3.0 * p.g / (2.0 * p.length), b = 3.0 / (p.mass * p.length * p.length);
  double u;
  if (obs(0) > 0.8) {
    // closed loop theta'' = -a theta - 2 sqrt(a) theta'
    u = -((2.0 * a / b) * theta + (2.0 * std::sqrt(a) / b) * w);
  } else {
    const double e = 0.5 * w * w + a * (obs(0) - 1.0);
    u = std::abs(w) > 1e-3 ? -2.0 * e * w : p.max_torque;
  }
  return ActionVec::Constant(1, std::clamp(u, -p.max_torque, p.max_torque));
}

// Steer around the hazard on the side away from its center, then to the goal.
ActionVec pointnav_expert(const PointNavEnv& env, const StateVec& obs) {
  const Eigen::Vector2d pos = obs.head<2>(), vel = obs.tail<2>();
  const auto& p = env.params();
  Eigen::Vector2d target = p.goal;
  const Eigen::Vector2d c = env.hazard_center();
  const double margin = p.hazard_radius + 0.25;
  if (pos(0) < c(0) + 0.1 && std::abs(pos(1) - c(1)) < margin) {
    const double side = pos(1) >= c(1) ? 1.0 : -1.0;
    target = Eigen::Vector2d(c(0), c(1) + side * margin);
  }
  const Eigen::Vector2d desired = (target - pos).normalized() * p.max_speed;
  return ((desired - vel) * 2.0).cwiseMax(-1.0).cwiseMin(1.0);
}

}  // namespace

BehaviorFn behavior_policy(const Env& env, const std::string& kind, double random_fraction) {
  const ActionBounds bounds = env.spec().bounds;
  if (kind == "random") return [bounds](const StateVec&, Rng& rng) { return uniform_action(bounds, rng); };

  BehaviorFn expert;
  if (const auto* pend = dynamic_cast<const PendulumEnv*>(&env)) {
    const auto params = pend->params();
    expert = [params](const StateVec& obs, Rng&) { return pendulum_expert(params, obs); };
  } else if (const auto* nav = dynamic_cast<const PointNavEnv*>(&env)) {
    const PointNavEnv copy = *nav;
    expert = [copy](const StateVec& obs, Rng&) { return pointnav_expert(copy, obs); };
  } else {
    throw std::invalid_argument("behavior_policy: no expert for " + env.spec().id);
  }
  if (kind == "expert") return expert;
  if (kind == "medium") {
    if (!(random_fraction >= 0.0 && random_fraction <= 1.0))
      throw std::invalid_argument("behavior_policy: random_fraction must lie in [0, 1]");
    return [expert, bounds, random_fraction](const StateVec& obs, Rng& rng) {
      // Draw both so the stream advances identically whichever branch is taken.
      const bool explore = rng.bernoulli(random_fraction);
      const ActionVec noise = uniform_action(bounds, rng);
      return explore ? noise : expert(obs, rng);
    };
  }
  throw std::invalid_argument("behavior_policy: unknown kind '" + kind + "'");
}

ReplayBuffer make_offline_dataset(Env& env, const BehaviorFn& behavior, std::size_t n, Rng& rng) {
  if (n < 1) throw std::invalid_argument("make_offline_dataset: n must be at least 1");
  const EnvSpec& spec = env.spec();
  ReplayBuffer buf(spec.state_dim, spec.action_dim, n);
  StateVec obs = env.reset(rng);
  int t = 0;
  while (buf.size() < n) {
    const ActionVec a = spec.bounds.clip(behavior(obs, rng));
    const StepResult res = env.step(a, rng);
    buf.push({obs, a, res.reward, res.cost, res.obs, res.done, {}});
    obs = res.obs;
    if (res.done || ++t >= spec.max_steps) {
      obs = env.reset(rng);
      t = 0;
    }
  }
  return buf;
}

EpisodeStats run_episode(Env& env, const BehaviorFn& policy, Rng& rng) {
  EpisodeStats st;
  StateVec obs = env.reset(rng);
  for (int t = 0; t < env.spec().max_steps; ++t) {
    const StepResult res = env.step(env.spec().bounds.clip(policy(obs, rng)), rng);
    st.ret += res.reward;
    st.cost += res.cost;
    ++st.steps;
    obs = res.obs;
    if (res.done) break;
  }
  return st;
}

}  // namespace loop
