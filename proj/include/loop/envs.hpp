// SPDX-License-Identifier: Apache-2.0
#pragma once

// Small simulated control tasks with analytic dynamics, rewards and costs.

#include <functional>
#include <memory>
#include <string>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "loop/mdp.hpp"
#include "loop/rng.hpp"

namespace loop {

struct EnvSpec {
  std::string id;
  int state_dim = 0;  // observation dimension
  int action_dim = 0;
  ActionBounds bounds;
  int max_steps = 0;
  bool has_cost = false;
  std::string reward;
  std::string cost;

  void validate() const;
};

struct StepResult {
  StateVec obs;
  double reward = 0.0;
  double cost = 0.0;
  bool done = false;  // true terminal (goal reached); time limits are handled by the caller
};

class Env {
 public:
  virtual ~Env() = default;
  virtual const EnvSpec& spec() const = 0;
  virtual StateVec reset(Rng& rng) = 0;
  /// Advances the internal state. Actions outside the bounds are clipped.
  virtual StepResult step(const ActionVec& a, Rng& rng) = 0;
  virtual StateVec observe() const = 0;
  /// Full simulator state (may differ from the observation).
  virtual Eigen::VectorXd state() const = 0;
  virtual void set_state(const Eigen::VectorXd& state) = 0;
  /// Per-column cost of observed transitions, used by planners on model rollouts.
  virtual Eigen::VectorXd cost_batch(const Eigen::MatrixXd& obs_next) const;
  virtual nlohmann::json to_json() const = 0;
  virtual std::unique_ptr<Env> clone() const = 0;
};

/// Pure step: same (state, a, rng state) always gives the same result.
StepResult env_step(const Env& env, const Eigen::VectorXd& state, const ActionVec& a, Rng& rng);

/// Inverted pendulum swing-up (theta = 0 is upright). Observation (cos, sin, theta_dot).
class PendulumEnv : public Env {
 public:
  struct Params {
    double g = 10.0, mass = 1.0, length = 1.0, dt = 0.05;
    double max_speed = 8.0, max_torque = 2.0;
    int max_steps = 200;
    double process_noise = 0.0;  // std of an additive velocity perturbation
  };

  PendulumEnv() : PendulumEnv(Params{}) {}
  explicit PendulumEnv(Params p);

  const EnvSpec& spec() const override { return spec_; }
  StateVec reset(Rng& rng) override;
  StepResult step(const ActionVec& a, Rng& rng) override;
  StateVec observe() const override;
  Eigen::VectorXd state() const override { return Eigen::Vector2d(theta_, theta_dot_); }
  void set_state(const Eigen::VectorXd& state) override;
  nlohmann::json to_json() const override;
  std::unique_ptr<Env> clone() const override { return std::make_unique<PendulumEnv>(*this); }

  const Params& params() const { return p_; }
  /// Mechanical energy of the rod, zero at upright rest.
  double energy() const;
  static double wrap(double angle);

 private:
  Params p_;
  EnvSpec spec_;
  double theta_ = 0.0, theta_dot_ = 0.0;
};

/// Point mass navigating to a goal past a circular hazard. Observation (x, y, vx, vy).
class PointNavEnv : public Env {
 public:
  struct Params {
    Eigen::Vector2d goal{2.0, 0.0};
    Eigen::Vector2d hazard{1.0, 0.0};
    double hazard_radius = 0.4;
    /// Hazard center y is jittered by U(-j, j) from the layout seed.
    double hazard_jitter = 0.0;
    std::uint64_t layout_seed = 0;
    double goal_radius = 0.2;
    double goal_bonus = 10.0;
    double dt = 0.1, damping = 0.9, accel = 1.0, max_speed = 1.0;
    double start_noise = 0.05;
    int action_repeat = 1;
    int max_steps = 100;
    /// Half-width of a square wall around the origin; 0 leaves the plane open.
    double arena = 0.0;
    double process_noise = 0.0;
  };

  PointNavEnv() : PointNavEnv(Params{}) {}
  explicit PointNavEnv(Params p);

  const EnvSpec& spec() const override { return spec_; }
  StateVec reset(Rng& rng) override;
  StepResult step(const ActionVec& a, Rng& rng) override;
  StateVec observe() const override { return state_; }
  Eigen::VectorXd state() const override { return state_; }
  void set_state(const Eigen::VectorXd& state) override;
  Eigen::VectorXd cost_batch(const Eigen::MatrixXd& obs_next) const override;
  nlohmann::json to_json() const override;
  std::unique_ptr<Env> clone() const override { return std::make_unique<PointNavEnv>(*this); }

  const Params& params() const { return p_; }
  Eigen::Vector2d hazard_center() const { return hazard_; }
  bool in_hazard(const Eigen::Vector2d& pos) const;

 private:
  Params p_;
  EnvSpec spec_;
  Eigen::Vector2d hazard_;
  Eigen::Vector4d state_ = Eigen::Vector4d::Zero();
};

/// {"id": "pendulum" | "pointnav", ...params}
std::unique_ptr<Env> make_env(const nlohmann::json& cfg);

using BehaviorFn = std::function<ActionVec(const StateVec& obs, Rng& rng)>;

/// "random" (uniform over bounds), "expert" (analytic controller) or
/// "medium" (expert with a fraction of uniformly random actions).
BehaviorFn behavior_policy(const Env& env, const std::string& kind, double random_fraction = 0.5);

/// Rolls `behavior` for exactly n transitions, resetting at episode ends.
ReplayBuffer make_offline_dataset(Env& env, const BehaviorFn& behavior, std::size_t n, Rng& rng);

struct EpisodeStats {
  double ret = 0.0;
  double cost = 0.0;
  int steps = 0;
};

/// Runs one episode from a fresh reset.
EpisodeStats run_episode(Env& env, const BehaviorFn& policy, Rng& rng);

}  // namespace loop
