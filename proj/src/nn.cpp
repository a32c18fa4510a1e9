// SPDX-License-Identifier: Apache-2.0
#include "loop/nn.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

#include "loop/archive.hpp"

namespace loop::nn {

std::string to_string(Activation a) {
  switch (a) {
    case Activation::kRelu: return "relu";
    case Activation::kTanh: return "tanh";
    case Activation::kIdentity: return "identity";
  }
  return "identity";
}

Activation activation_from_string(const std::string& s) {
  if (s == "relu") return Activation::kRelu;
  if (s == "tanh") return Activation::kTanh;
  if (s == "identity") return Activation::kIdentity;
  throw std::invalid_argument("unknown activation '" + s + "'");
}

Eigen::VectorXd NetGrad::flat() const {
  Eigen::Index n = 0;
  for (std::size_t i = 0; i < weight.size(); ++i) n += weight[i].size() + bias[i].size();
  Eigen::VectorXd out(n);
  Eigen::Index off = 0;
  for (std::size_t i = 0; i < weight.size(); ++i) {
    const auto& w = weight[i];
    Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(out.data() + off, w.rows(),
                                                                                        w.cols()) = w;
    off += w.size();
    out.segment(off, bias[i].size()) = bias[i];
    off += bias[i].size();
  }
  return out;
}

NetGrad& NetGrad::operator+=(const NetGrad& other) {
  if (weight.empty()) return *this = other;
  for (std::size_t i = 0; i < weight.size(); ++i) {
    weight[i] += other.weight[i];
    bias[i] += other.bias[i];
  }
  return *this;
}

DenseNet::DenseNet(const std::vector<int>& dims, Activation hidden, Activation output, Rng& rng) {
  if (dims.size() < 2) throw std::invalid_argument("DenseNet: need at least input and output dims");
  for (int d : dims)
    if (d <= 0) throw std::invalid_argument("DenseNet: layer dims must be positive");
  for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
    DenseLayer layer;
    const double limit = 1.0 / std::sqrt(static_cast<double>(dims[i]));
    layer.weight.resize(dims[i + 1], dims[i]);
    layer.bias.resize(dims[i + 1]);
    for (Eigen::Index r = 0; r < layer.weight.rows(); ++r)
      for (Eigen::Index c = 0; c < layer.weight.cols(); ++c) layer.weight(r, c) = rng.uniform(-limit, limit);
    for (Eigen::Index r = 0; r < layer.bias.size(); ++r) layer.bias(r) = rng.uniform(-limit, limit);
    layer.activation = i + 2 == dims.size() ? output : hidden;
    layers_.push_back(std::move(layer));
  }
}

DenseNet::DenseNet(std::vector<DenseLayer> layers) : layers_(std::move(layers)) {
  if (layers_.empty()) throw std::invalid_argument("DenseNet: no layers");
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    if (layers_[i].bias.size() != layers_[i].weight.rows())
      throw std::invalid_argument("DenseNet: bias size does not match weight rows");
    if (i > 0 && layers_[i].weight.cols() != layers_[i - 1].weight.rows())
      throw std::invalid_argument("DenseNet: consecutive layer dims do not chain");
  }
}

int DenseNet::input_dim() const { return static_cast<int>(layers_.front().weight.cols()); }
int DenseNet::output_dim() const { return static_cast<int>(layers_.back().weight.rows()); }

std::size_t DenseNet::parameter_count() const {
  std::size_t n = 0;
  for (const auto& l : layers_) n += static_cast<std::size_t>(l.weight.size() + l.bias.size());
  return n;
}

namespace {

void activate(Eigen::MatrixXd& x, Activation a) {
  switch (a) {
    case Activation::kRelu: x = x.cwiseMax(0.0); break;
    case Activation::kTanh: x = x.array().tanh().matrix(); break;
    case Activation::kIdentity: break;
  }
}

}  // namespace

Eigen::VectorXd DenseNet::forward(const Eigen::VectorXd& x) const {
  if (layers_.empty()) throw std::logic_error("DenseNet::forward on empty net");
  if (x.size() != input_dim()) throw std::invalid_argument("DenseNet::forward: input dimension mismatch");
  return forward_batch(x).col(0);
}

Eigen::MatrixXd DenseNet::forward_batch(const Eigen::MatrixXd& x, Tape* tape) const {
  if (layers_.empty()) throw std::logic_error("DenseNet::forward on empty net");
  if (x.rows() != input_dim()) throw std::invalid_argument("DenseNet::forward: input dimension mismatch");
  if (tape) {
    tape->inputs.clear();
    tape->outputs.clear();
  }
  Eigen::MatrixXd h = x;
  for (const auto& layer : layers_) {
    Eigen::MatrixXd next = layer.weight * h;
    next.colwise() += layer.bias;
    activate(next, layer.activation);
    if (tape) tape->inputs.push_back(std::move(h));
    h = std::move(next);
    if (tape) tape->outputs.push_back(h);
  }
  return h;
}

NetGrad DenseNet::backward(const Tape& tape, const Eigen::MatrixXd& d_out, Eigen::MatrixXd* d_in) const {
  if (tape.inputs.size() != layers_.size()) throw std::invalid_argument("DenseNet::backward: tape does not match net");
  NetGrad g;
  g.weight.resize(layers_.size());
  g.bias.resize(layers_.size());
  Eigen::MatrixXd delta = d_out;
  for (std::size_t k = layers_.size(); k-- > 0;) {
    const auto& layer = layers_[k];
    const auto& out = tape.outputs[k];
    switch (layer.activation) {
      case Activation::kRelu: delta = (out.array() > 0.0).select(delta, 0.0); break;
      case Activation::kTanh: delta = (delta.array() * (1.0 - out.array().square())).matrix(); break;
      case Activation::kIdentity: break;
    }
    g.weight[k].noalias() = delta * tape.inputs[k].transpose();
    g.bias[k] = delta.rowwise().sum();
    if (k > 0 || d_in) delta = layer.weight.transpose() * delta;
  }
  if (d_in) *d_in = std::move(delta);
  return g;
}

Eigen::VectorXd DenseNet::flat() const {
  Eigen::VectorXd out(static_cast<Eigen::Index>(parameter_count()));
  Eigen::Index off = 0;
  for (const auto& l : layers_) {
    Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(out.data() + off,
                                                                                        l.weight.rows(),
                                                                                        l.weight.cols()) = l.weight;
    off += l.weight.size();
    out.segment(off, l.bias.size()) = l.bias;
    off += l.bias.size();
  }
  return out;
}

void DenseNet::set_flat(const Eigen::VectorXd& params) {
  if (static_cast<std::size_t>(params.size()) != parameter_count())
    throw std::invalid_argument("DenseNet::set_flat: parameter count mismatch");
  Eigen::Index off = 0;
  for (auto& l : layers_) {
    l.weight = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
        params.data() + off, l.weight.rows(), l.weight.cols());
    off += l.weight.size();
    l.bias = params.segment(off, l.bias.size());
    off += l.bias.size();
  }
}

nlohmann::json DenseNet::shape_json() const {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : layers_)
    layers.push_back({{"in", l.weight.cols()}, {"out", l.weight.rows()}, {"activation", to_string(l.activation)}});
  return {{"layers", layers},
          {"param_count", parameter_count()},
          {"layout", "per layer: weight row-major [out][in], then bias [out]"}};
}

void polyak_update(DenseNet& target, const DenseNet& source, double tau) {
  auto& tl = target.layers();
  const auto& sl = source.layers();
  if (tl.size() != sl.size()) throw std::invalid_argument("polyak_update: architecture mismatch");
  for (std::size_t i = 0; i < tl.size(); ++i) {
    tl[i].weight = tau * tl[i].weight + (1.0 - tau) * sl[i].weight;
    tl[i].bias = tau * tl[i].bias + (1.0 - tau) * sl[i].bias;
  }
}

Adam::Adam(std::size_t n, AdamConfig cfg)
    : cfg_(cfg),
      m_(Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n))),
      v_(Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n))) {}

void Adam::step(Eigen::VectorXd& params, const Eigen::VectorXd& grad) {
  if (params.size() != m_.size() || grad.size() != m_.size()) throw std::invalid_argument("Adam::step: shape mismatch");
  ++t_;
  m_ = cfg_.beta1 * m_ + (1.0 - cfg_.beta1) * grad;
  v_ = cfg_.beta2 * v_ + (1.0 - cfg_.beta2) * grad.cwiseProduct(grad);
  const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  params.array() -= cfg_.lr * (m_.array() / c1) / ((v_.array() / c2).sqrt() + cfg_.eps);
}

void Adam::step(DenseNet& net, const NetGrad& grad) {
  Eigen::VectorXd p = net.flat();
  step(p, grad.flat());
  net.set_flat(p);
}

void Adam::save(ArchiveWriter& w, const std::string& name) const {
  w.add(name + ".m", m_);
  w.add(name + ".v", v_);
  w.meta()["adam"][name] = {{"t", t_}, {"lr", cfg_.lr}, {"beta1", cfg_.beta1}, {"beta2", cfg_.beta2}, {"eps", cfg_.eps}};
}

void Adam::load(const ArchiveReader& r, const std::string& name) {
  const auto& m = r.meta().at("adam").at(name);
  cfg_ = {m.at("lr").get<double>(), m.at("beta1").get<double>(), m.at("beta2").get<double>(), m.at("eps").get<double>()};
  t_ = m.at("t").get<std::int64_t>();
  m_ = r.vector(name + ".m");
  v_ = r.vector(name + ".v");
}

void save_net(ArchiveWriter& w, const std::string& name, const DenseNet& net) {
  w.add(name, net.flat());
  w.meta()["nets"][name] = net.shape_json();
}

DenseNet load_net(const ArchiveReader& r, const std::string& name) {
  const auto& shape = r.meta().at("nets").at(name);
  std::vector<DenseLayer> layers;
  for (const auto& l : shape.at("layers")) {
    DenseLayer layer;
    layer.weight = Eigen::MatrixXd::Zero(l.at("out").get<int>(), l.at("in").get<int>());
    layer.bias = Eigen::VectorXd::Zero(l.at("out").get<int>());
    layer.activation = activation_from_string(l.at("activation").get<std::string>());
    layers.push_back(std::move(layer));
  }
  DenseNet net(std::move(layers));
  net.set_flat(r.vector(name));
  return net;
}

Eigen::MatrixXd clamp_log_std(const Eigen::MatrixXd& raw) { return raw.cwiseMax(kLogStdMin).cwiseMin(kLogStdMax); }

namespace {

constexpr double kHalfLog2Pi = 0.91893853320467274178;  // 0.5 * log(2 pi)

Eigen::MatrixXd clamp_mask(const Eigen::MatrixXd& raw) {
  return ((raw.array() >= kLogStdMin) && (raw.array() <= kLogStdMax)).cast<double>().matrix();
}

// log(1 - tanh(u)^2), stable for large |u|.
double log1m_tanh2(double u) {
  const double x = -2.0 * u;
  const double softplus = x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
  return 2.0 * (std::numbers::ln2 - u - softplus);
}

}  // namespace

GaussianNll gaussian_nll(const Eigen::MatrixXd& mean, const Eigen::MatrixXd& raw_log_std,
                         const Eigen::MatrixXd& target) {
  if (mean.rows() != target.rows() || mean.cols() != target.cols() || raw_log_std.rows() != mean.rows() ||
      raw_log_std.cols() != mean.cols())
    throw std::invalid_argument("gaussian_nll: shape mismatch");
  const auto n = static_cast<double>(mean.cols());
  const Eigen::ArrayXXd log_std = clamp_log_std(raw_log_std).array();
  const Eigen::ArrayXXd inv_std = (-log_std).exp();
  const Eigen::ArrayXXd z = (target - mean).array() * inv_std;

  GaussianNll out;
  out.loss = (0.5 * z.square() + log_std + kHalfLog2Pi).sum() / n;
  out.d_mean = (-z * inv_std / n).matrix();
  out.d_raw_log_std = ((1.0 - z.square()) / n).matrix().cwiseProduct(clamp_mask(raw_log_std));
  return out;
}

TanhGaussianSample tanh_gaussian_sample(const Eigen::MatrixXd& mean, const Eigen::MatrixXd& raw_log_std,
                                        const ActionBounds& bounds, Rng& rng) {
  Eigen::MatrixXd noise(mean.rows(), mean.cols());
  for (Eigen::Index c = 0; c < noise.cols(); ++c)
    for (Eigen::Index r = 0; r < noise.rows(); ++r) noise(r, c) = rng.normal();
  return tanh_gaussian_sample(mean, raw_log_std, bounds, noise);
}

TanhGaussianSample tanh_gaussian_sample(const Eigen::MatrixXd& mean, const Eigen::MatrixXd& raw_log_std,
                                        const ActionBounds& bounds, const Eigen::MatrixXd& noise) {
  if (mean.rows() != bounds.dim()) throw std::invalid_argument("tanh_gaussian_sample: action dim mismatch");
  const Eigen::VectorXd half = 0.5 * (bounds.hi - bounds.lo);
  const Eigen::VectorXd center = 0.5 * (bounds.hi + bounds.lo);
  constexpr double kEdge = 1.0 - 1e-12;

  TanhGaussianSample s;
  s.raw_log_std = raw_log_std;
  const Eigen::MatrixXd log_std = clamp_log_std(raw_log_std);
  s.std = log_std.array().exp().matrix();
  s.noise = noise;
  s.pre_tanh = mean + s.std.cwiseProduct(noise);
  s.action.resize(mean.rows(), mean.cols());
  s.log_prob.resize(mean.cols());
  const double log_scale = half.array().log().sum();
  for (Eigen::Index c = 0; c < mean.cols(); ++c) {
    double lp = -log_scale;
    for (Eigen::Index r = 0; r < mean.rows(); ++r) {
      const double u = s.pre_tanh(r, c);
      const double y = std::clamp(std::tanh(u), -kEdge, kEdge);
      s.action(r, c) = center(r) + half(r) * y;
      const double z = noise(r, c);
      lp += -0.5 * z * z - log_std(r, c) - kHalfLog2Pi - log1m_tanh2(u);
    }
    s.log_prob(c) = lp;
  }
  return s;
}

HeadGrad tanh_gaussian_backward(const TanhGaussianSample& sample, const Eigen::VectorXd& d_log_prob,
                                const Eigen::MatrixXd& d_action, const ActionBounds& bounds) {
  const Eigen::VectorXd half = 0.5 * (bounds.hi - bounds.lo);
  const Eigen::ArrayXXd y = sample.pre_tanh.array().tanh();
  const Eigen::ArrayXXd dy_du = 1.0 - y.square();
  // d(log_prob)/du along the reparameterized path = 2 tanh(u); d(action)/du = half * (1 - y^2).
  Eigen::ArrayXXd d_u = (d_action.array().colwise() * half.array()) * dy_du;
  d_u += (2.0 * y).rowwise() * d_log_prob.transpose().array();

  HeadGrad g;
  g.d_mean = d_u.matrix();
  // u = mean + exp(log_std) z, and log_prob has an explicit -log_std term.
  Eigen::ArrayXXd d_log_std = d_u * sample.std.array() * sample.noise.array();
  d_log_std -= Eigen::ArrayXXd::Ones(y.rows(), y.cols()).rowwise() * d_log_prob.transpose().array();
  g.d_raw_log_std = d_log_std.matrix().cwiseProduct(clamp_mask(sample.raw_log_std));
  return g;
}

Eigen::MatrixXd tanh_gaussian_mode(const Eigen::MatrixXd& mean, const ActionBounds& bounds) {
  const Eigen::VectorXd half = 0.5 * (bounds.hi - bounds.lo);
  const Eigen::VectorXd center = 0.5 * (bounds.hi + bounds.lo);
  Eigen::MatrixXd y = mean.array().tanh().matrix().cwiseMax(-1.0 + 1e-12).cwiseMin(1.0 - 1e-12);
  return (half.asDiagonal() * y).colwise() + center;
}

LogProbEval tanh_gaussian_log_prob(const Eigen::MatrixXd& mean, const Eigen::MatrixXd& raw_log_std,
                                   const Eigen::MatrixXd& action, const ActionBounds& bounds) {
  const Eigen::VectorXd half = 0.5 * (bounds.hi - bounds.lo);
  const Eigen::VectorXd center = 0.5 * (bounds.hi + bounds.lo);
  constexpr double kEdge = 1.0 - 1e-6;  // dataset actions can sit on the bounds
  const Eigen::MatrixXd log_std = clamp_log_std(raw_log_std);
  const double log_scale = half.array().log().sum();

  LogProbEval out;
  out.log_prob.resize(mean.cols());
  out.grad.d_mean.resize(mean.rows(), mean.cols());
  out.grad.d_raw_log_std.resize(mean.rows(), mean.cols());
  const Eigen::MatrixXd mask = clamp_mask(raw_log_std);
  for (Eigen::Index c = 0; c < mean.cols(); ++c) {
    double lp = -log_scale;
    for (Eigen::Index r = 0; r < mean.rows(); ++r) {
      const double y = std::clamp((action(r, c) - center(r)) / half(r), -kEdge, kEdge);
      const double u = std::atanh(y);
      const double sigma = std::exp(log_std(r, c));
      const double z = (u - mean(r, c)) / sigma;
      lp += -0.5 * z * z - log_std(r, c) - kHalfLog2Pi - std::log1p(-y * y);
      out.grad.d_mean(r, c) = z / sigma;
      out.grad.d_raw_log_std(r, c) = (z * z - 1.0) * mask(r, c);
    }
    out.log_prob(c) = lp;
  }
  return out;
}

}  // namespace loop::nn
