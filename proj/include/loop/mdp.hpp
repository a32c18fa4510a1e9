// SPDX-License-Identifier: Apache-2.0
#pragma once

// Shared MDP/CMDP vocabulary: transitions, the replay buffer, returns.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "loop/rng.hpp"

namespace loop {

using StateVec = Eigen::VectorXd;
using ActionVec = Eigen::VectorXd;

/// Per-dimension box [lo, hi] for actions.
struct ActionBounds {
  Eigen::VectorXd lo;
  Eigen::VectorXd hi;

  int dim() const { return static_cast<int>(lo.size()); }
  Eigen::VectorXd clip(const Eigen::VectorXd& a) const { return a.cwiseMax(lo).cwiseMin(hi); }
  bool contains(const Eigen::VectorXd& a) const;
  static ActionBounds symmetric(int dim, double limit);
};

/// Discount factor with its (0, 1) invariant enforced at construction.
class DiscountSpec {
 public:
  explicit DiscountSpec(double gamma);
  double gamma() const { return gamma_; }

 private:
  double gamma_;
};

struct Transition {
  StateVec s;
  ActionVec a;
  double r = 0.0;
  double c = 0.0;  // constraint cost; 0 for unconstrained tasks
  StateVec s_next;
  bool done = false;
  /// Action actually taken at s_next, when known (needed for SARSA targets).
  std::optional<ActionVec> a_next;
};

/// Column-major view of a sampled batch: one column per transition.
struct Batch {
  Eigen::MatrixXd s, a, s_next;
  Eigen::VectorXd r, c, done;
  std::optional<Eigen::MatrixXd> a_next;  // present only if every row has one

  Eigen::Index size() const { return r.size(); }
  static Batch from(std::span<const Transition> rows);
};

/// Sum_t gamma^t r_t. Throws on non-finite rewards or gamma outside (0, 1).
double discounted_return(std::span<const double> rewards, double gamma);

/// Fixed-capacity FIFO experience store.
class ReplayBuffer {
 public:
  ReplayBuffer(int state_dim, int action_dim, std::size_t capacity);

  int state_dim() const { return state_dim_; }
  int action_dim() const { return action_dim_; }
  std::size_t capacity() const { return capacity_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  /// Appends; once full, overwrites the oldest entry. Validates shape and finiteness.
  void push(Transition t);
  /// i-th entry in insertion order (0 = oldest retained).
  const Transition& at(std::size_t i) const;
  /// n distinct entries chosen uniformly (partial Fisher-Yates on indices).
  std::vector<Transition> sample(std::size_t n, Rng& rng) const;
  std::vector<std::size_t> sample_indices(std::size_t n, Rng& rng) const;
  /// All entries, oldest first.
  std::vector<Transition> snapshot() const;

  /// Columnar archive with a JSON header; `provenance` lands in the header meta.
  void save(const std::filesystem::path& path, const nlohmann::json& provenance = {}) const;
  static ReplayBuffer load(const std::filesystem::path& path);

 private:
  int state_dim_;
  int action_dim_;
  std::size_t capacity_;
  std::size_t head_ = 0;  // next slot to overwrite once full
  std::vector<Transition> data_;
};

}  // namespace loop
