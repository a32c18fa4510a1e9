// SPDX-License-Identifier: Apache-2.0
#pragma once

// Small dense-network core with a hand-written reverse pass.
//
// Batches are column-major: a batch of B inputs of dimension d is a d x B
// matrix. There is no general autodiff graph; DenseNet::backward is the
// fixed-topology reverse pass of an MLP, and the output heads below provide
// their own closed-form derivatives.

#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "loop/mdp.hpp"
#include "loop/rng.hpp"

namespace loop {
class ArchiveWriter;
class ArchiveReader;
}  // namespace loop

namespace loop::nn {

enum class Activation { kRelu, kTanh, kIdentity };

std::string to_string(Activation a);
Activation activation_from_string(const std::string& s);

struct DenseLayer {
  Eigen::MatrixXd weight;  // out x in
  Eigen::VectorXd bias;    // out
  Activation activation = Activation::kIdentity;
};

/// Gradient with the same structure as a DenseNet's parameters.
struct NetGrad {
  std::vector<Eigen::MatrixXd> weight;
  std::vector<Eigen::VectorXd> bias;

  Eigen::VectorXd flat() const;
  NetGrad& operator+=(const NetGrad& other);
};

/// Per-layer activations recorded by forward_batch for the reverse pass.
struct Tape {
  std::vector<Eigen::MatrixXd> inputs;
  std::vector<Eigen::MatrixXd> outputs;
};

class DenseNet {
 public:
  DenseNet() = default;
  /// dims = {in, hidden..., out}; hidden layers use `hidden`, the last layer
  /// `output`. Weights and biases ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
  DenseNet(const std::vector<int>& dims, Activation hidden, Activation output, Rng& rng);
  explicit DenseNet(std::vector<DenseLayer> layers);

  int input_dim() const;
  int output_dim() const;
  std::size_t parameter_count() const;
  const std::vector<DenseLayer>& layers() const { return layers_; }
  std::vector<DenseLayer>& layers() { return layers_; }

  Eigen::VectorXd forward(const Eigen::VectorXd& x) const;
  Eigen::MatrixXd forward_batch(const Eigen::MatrixXd& x, Tape* tape = nullptr) const;
  /// Reverse pass. `d_out` is dLoss/dOutput for the taped batch; the returned
  /// gradient is summed over the batch. Writes dLoss/dInput when d_in != nullptr.
  NetGrad backward(const Tape& tape, const Eigen::MatrixXd& d_out, Eigen::MatrixXd* d_in = nullptr) const;

  /// Flat parameter layout: for each layer, weight row-major [out][in], then bias.
  Eigen::VectorXd flat() const;
  void set_flat(const Eigen::VectorXd& params);
  nlohmann::json shape_json() const;

 private:
  std::vector<DenseLayer> layers_;
};

/// `target <- tau * target + (1 - tau) * source`, elementwise over parameters.
void polyak_update(DenseNet& target, const DenseNet& source, double tau);

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Bias-corrected adaptive-moment optimizer over a flat parameter vector.
class Adam {
 public:
  Adam() = default;
  Adam(std::size_t n, AdamConfig cfg);

  void step(Eigen::VectorXd& params, const Eigen::VectorXd& grad);
  void step(DenseNet& net, const NetGrad& grad);

  const AdamConfig& config() const { return cfg_; }
  std::int64_t steps() const { return t_; }

  void save(ArchiveWriter& w, const std::string& name) const;
  void load(const ArchiveReader& r, const std::string& name);

 private:
  AdamConfig cfg_;
  Eigen::VectorXd m_;
  Eigen::VectorXd v_;
  std::int64_t t_ = 0;
};

void save_net(ArchiveWriter& w, const std::string& name, const DenseNet& net);
DenseNet load_net(const ArchiveReader& r, const std::string& name);

// Output heads.

inline constexpr double kLogStdMin = -10.0;
inline constexpr double kLogStdMax = 2.0;

/// Elementwise clamp of raw log-std outputs into [kLogStdMin, kLogStdMax].
Eigen::MatrixXd clamp_log_std(const Eigen::MatrixXd& raw);

struct GaussianNll {
  double loss = 0.0;          // mean over columns of the per-column NLL (summed over rows)
  Eigen::MatrixXd d_mean;     // dLoss/dmean
  Eigen::MatrixXd d_raw_log_std;  // dLoss/d(raw log-std), zero where clamped
};

/// Diagonal Gaussian negative log-likelihood of `target`.
GaussianNll gaussian_nll(const Eigen::MatrixXd& mean, const Eigen::MatrixXd& raw_log_std,
                         const Eigen::MatrixXd& target);

/// Reparameterized draw from a tanh-squashed Gaussian scaled into `bounds`.
struct TanhGaussianSample {
  Eigen::MatrixXd action;    // in bounds, strictly inside
  Eigen::VectorXd log_prob;  // per column, including the tanh and scaling corrections
  Eigen::MatrixXd pre_tanh;  // u = mean + std * noise
  Eigen::MatrixXd noise;     // z
  Eigen::MatrixXd std;       // exp(clamped log-std)
  Eigen::MatrixXd raw_log_std;
};

TanhGaussianSample tanh_gaussian_sample(const Eigen::MatrixXd& mean, const Eigen::MatrixXd& raw_log_std,
                                        const ActionBounds& bounds, Rng& rng);
/// Same as above with caller-supplied standard-normal noise.
TanhGaussianSample tanh_gaussian_sample(const Eigen::MatrixXd& mean, const Eigen::MatrixXd& raw_log_std,
                                        const ActionBounds& bounds, const Eigen::MatrixXd& noise);

struct HeadGrad {
  Eigen::MatrixXd d_mean;
  Eigen::MatrixXd d_raw_log_std;
};

/// Chain rule through the reparameterized sample for a loss with partials
/// dLoss/dlog_prob (per column) and dLoss/daction.
HeadGrad tanh_gaussian_backward(const TanhGaussianSample& sample, const Eigen::VectorXd& d_log_prob,
                                const Eigen::MatrixXd& d_action, const ActionBounds& bounds);

/// Deterministic action: bounds-scaled tanh(mean).
Eigen::MatrixXd tanh_gaussian_mode(const Eigen::MatrixXd& mean, const ActionBounds& bounds);

/// Log-density of given in-bounds actions and its gradient w.r.t. the head outputs.
struct LogProbEval {
  Eigen::VectorXd log_prob;
  HeadGrad grad;  // d(sum of log_prob)/d(head)
};
LogProbEval tanh_gaussian_log_prob(const Eigen::MatrixXd& mean, const Eigen::MatrixXd& raw_log_std,
                                   const Eigen::MatrixXd& action, const ActionBounds& bounds);

}  // namespace loop::nn
