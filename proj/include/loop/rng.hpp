// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <random>
#include <string>

namespace loop {

/// Mixes a 64-bit value (splitmix64 finalizer). Used to derive child seeds.
std::uint64_t mix64(std::uint64_t x);

/// Seeded random stream.
///
/// Wraps std::mt19937_64 (whose output sequence is fixed by the standard) and
/// implements the distributions by hand, because the std:: distributions are
/// implementation-defined and would break cross-platform reproducibility.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0);

  std::uint64_t next_u64() { return engine_(); }
  /// Uniform in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Standard normal via Box-Muller (one draw per call, no cached pair).
  double normal();
  /// Unbiased integer in [0, n).
  std::uint64_t index(std::uint64_t n);
  bool bernoulli(double p) { return uniform() < p; }

  /// Independent child stream; consumes one draw from this stream.
  Rng split() { return Rng(mix64(next_u64() ^ 0x9e3779b97f4a7c15ULL)); }
  /// Child stream keyed by (seed, stream) without touching any engine state.
  static Rng derive(std::uint64_t seed, std::uint64_t stream);

  std::string state() const;
  void set_state(const std::string& text);

 private:
  std::mt19937_64 engine_;
};

}  // namespace loop
