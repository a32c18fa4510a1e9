// SPDX-License-Identifier: Apache-2.0
#include "loop/dynamics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "loop/archive.hpp"

namespace loop {

void EnsembleConfig::validate() const {
  if (members < 2) throw std::invalid_argument("EnsembleConfig: need at least 2 members");
  if (batch_size < 1 || patience < 1 || max_epochs < 1 || max_updates < 0 || retrain_period < 1)
    throw std::invalid_argument("EnsembleConfig: counts must be positive");
  if (!(holdout_fraction >= 0.0 && holdout_fraction < 1.0))
    throw std::invalid_argument("EnsembleConfig: holdout_fraction must lie in [0, 1)");
  if (!(nll_beta >= 0.0 && nll_beta <= 1.0)) throw std::invalid_argument("EnsembleConfig: nll_beta must lie in [0, 1]");
  if (!(lr > 0.0)) throw std::invalid_argument("EnsembleConfig: lr must be positive");
}

Normalizer Normalizer::identity(int dim) { return {Eigen::VectorXd::Zero(dim), Eigen::VectorXd::Ones(dim)}; }

Normalizer Normalizer::fit(const Eigen::MatrixXd& columns) {
  Normalizer n;
  n.mean = columns.rowwise().mean();
  n.std = ((columns.colwise() - n.mean).array().square().rowwise().mean()).sqrt().matrix();
  for (Eigen::Index i = 0; i < n.std.size(); ++i)
    if (!(n.std(i) > 1e-6)) n.std(i) = 1.0;  // constant feature: leave its scale alone
  return n;
}

Eigen::MatrixXd Normalizer::apply(const Eigen::MatrixXd& x) const {
  return (x.colwise() - mean).array().colwise() / std.array();
}

Eigen::MatrixXd Normalizer::invert(const Eigen::MatrixXd& z) const {
  return (z.array().colwise() * std.array()).matrix().colwise() + mean;
}

DynamicsEnsemble::DynamicsEnsemble(int state_dim, int action_dim, EnsembleConfig cfg, Rng& rng)
    : state_dim_(state_dim),
      action_dim_(action_dim),
      cfg_(std::move(cfg)),
      input_norm_(Normalizer::identity(state_dim + action_dim)),
      delta_norm_(Normalizer::identity(state_dim)),
      reward_norm_(Normalizer::identity(1)) {
  cfg_.validate();
  std::vector<int> dims{state_dim + action_dim};
  dims.insert(dims.end(), cfg_.hidden.begin(), cfg_.hidden.end());
  dims.push_back(2 * state_dim + 1);
  for (int k = 0; k < cfg_.members; ++k) {
    Rng member_rng = rng.split();
    members_.emplace_back(dims, nn::Activation::kRelu, nn::Activation::kIdentity, member_rng);
    optimizers_.emplace_back(members_.back().parameter_count(), nn::AdamConfig{cfg_.lr});
  }
}

void DynamicsEnsemble::check_member(int member) const {
  if (member < 0 || member >= size()) throw std::out_of_range("DynamicsEnsemble: member index out of range");
}

void DynamicsEnsemble::set_normalizers(Normalizer input, Normalizer delta, Normalizer reward) {
  input_norm_ = std::move(input);
  delta_norm_ = std::move(delta);
  reward_norm_ = std::move(reward);
}

MemberPrediction DynamicsEnsemble::predict_batch(int member, const Eigen::MatrixXd& s, const Eigen::MatrixXd& a) const {
  check_member(member);
  if (s.rows() != state_dim_ || a.rows() != action_dim_ || s.cols() != a.cols())
    throw std::invalid_argument("DynamicsEnsemble::predict: shape mismatch");
  Eigen::MatrixXd x(state_dim_ + action_dim_, s.cols());
  x.topRows(state_dim_) = s;
  x.bottomRows(action_dim_) = a;
  const Eigen::MatrixXd out = members_[static_cast<std::size_t>(member)].forward_batch(input_norm_.apply(x));

  MemberPrediction p;
  p.mean = s + delta_norm_.invert(out.topRows(state_dim_));
  p.std = (nn::clamp_log_std(out.middleRows(state_dim_, state_dim_)).array().exp().colwise() * delta_norm_.std.array())
              .matrix();
  p.reward = (out.bottomRows(1).array() * reward_norm_.std(0) + reward_norm_.mean(0)).transpose();
  return p;
}

MemberPrediction DynamicsEnsemble::predict(int member, const StateVec& s, const ActionVec& a) const {
  return predict_batch(member, s, a);
}

std::pair<StateVec, double> DynamicsEnsemble::sample_next(int member, const StateVec& s, const ActionVec& a,
                                                          Rng& rng) const {
  const MemberPrediction p = predict(member, s, a);
  StateVec next(state_dim_);
  for (int i = 0; i < state_dim_; ++i) next(i) = p.mean(i, 0) + p.std(i, 0) * rng.normal();
  return {next, p.reward(0)};
}

double DynamicsEnsemble::member_loss(int member, const Batch& batch, nn::NetGrad* grad, bool weighted) const {
  check_member(member);
  const auto n = batch.size();
  Eigen::MatrixXd x(state_dim_ + action_dim_, n);
  x.topRows(state_dim_) = batch.s;
  x.bottomRows(action_dim_) = batch.a;
  const Eigen::MatrixXd delta = delta_norm_.apply(batch.s_next - batch.s);
  const Eigen::RowVectorXd reward = (batch.r.transpose().array() - reward_norm_.mean(0)) / reward_norm_.std(0);

  const nn::DenseNet& net = members_[static_cast<std::size_t>(member)];
  nn::Tape tape;
  const Eigen::MatrixXd out = net.forward_batch(input_norm_.apply(x), grad ? &tape : nullptr);
  const Eigen::MatrixXd raw_log_std = out.middleRows(state_dim_, state_dim_);
  const nn::GaussianNll nll = nn::gaussian_nll(out.topRows(state_dim_), raw_log_std, delta);
  const Eigen::RowVectorXd r_err = out.bottomRows(1) - reward;
  double loss = r_err.squaredNorm() / static_cast<double>(n);
  Eigen::ArrayXXd weight = Eigen::ArrayXXd::Ones(state_dim_, n);
  if (cfg_.nll_beta == 0.0 || !weighted) {
    loss += nll.loss;
  } else {
    const Eigen::ArrayXXd log_std = nn::clamp_log_std(raw_log_std).array();
    weight = (2.0 * cfg_.nll_beta * log_std).exp();
    const Eigen::ArrayXXd z = (delta - out.topRows(state_dim_)).array() / log_std.exp();
    loss += (weight * (0.5 * z.square() + log_std + 0.5 * std::log(2.0 * M_PI))).sum() / static_cast<double>(n);
  }
  if (grad) {
    Eigen::MatrixXd d_out(out.rows(), n);
    d_out.topRows(state_dim_) = (nll.d_mean.array() * weight).matrix();
    d_out.middleRows(state_dim_, state_dim_) = (nll.d_raw_log_std.array() * weight).matrix();
    d_out.bottomRows(1) = 2.0 * r_err / static_cast<double>(n);
    *grad = net.backward(tape, d_out);
  }
  return loss;
}

namespace {

Batch gather(const std::vector<Transition>& rows, const std::vector<std::size_t>& idx, std::size_t begin,
             std::size_t end) {
  std::vector<Transition> picked;
  picked.reserve(end - begin);
  for (std::size_t i = begin; i < end; ++i) picked.push_back(rows[idx[i]]);
  return Batch::from(picked);
}

}  // namespace

EnsembleTrainReport DynamicsEnsemble::train(const ReplayBuffer& buffer, Rng& rng) {
  if (buffer.empty()) throw std::invalid_argument("DynamicsEnsemble::train: empty buffer");
  if (buffer.state_dim() != state_dim_ || buffer.action_dim() != action_dim_)
    throw std::invalid_argument("DynamicsEnsemble::train: buffer dims do not match the ensemble");

  const std::vector<Transition> rows = buffer.snapshot();
  const Batch all = Batch::from(rows);
  Eigen::MatrixXd x(state_dim_ + action_dim_, all.size());
  x.topRows(state_dim_) = all.s;
  x.bottomRows(action_dim_) = all.a;
  set_normalizers(Normalizer::fit(x), Normalizer::fit(all.s_next - all.s), Normalizer::fit(all.r.transpose()));

  const std::size_t n = rows.size();
  const auto n_hold = n >= 10 ? static_cast<std::size_t>(std::lround(cfg_.holdout_fraction * static_cast<double>(n))) : 0;
  const auto batch = static_cast<std::size_t>(cfg_.batch_size);

  EnsembleTrainReport report;
  std::vector<std::vector<double>> hold_curves(members_.size()), train_curves(members_.size());
  for (std::size_t k = 0; k < members_.size(); ++k) {
    Rng member_rng = rng.split();
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[member_rng.index(i)]);
    const std::vector<std::size_t> hold(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_hold));
    std::vector<std::size_t> train(idx.begin() + static_cast<std::ptrdiff_t>(n_hold), idx.end());
    const Batch hold_batch = n_hold > 0 ? gather(rows, hold, 0, hold.size()) : Batch{};

    double best = std::numeric_limits<double>::infinity();
    Eigen::VectorXd best_params = members_[k].flat();
    int since_best = 0;
    int updates = 0;
    int epoch = 0;
    for (; epoch < cfg_.max_epochs; ++epoch) {
      for (std::size_t i = train.size(); i > 1; --i) std::swap(train[i - 1], train[member_rng.index(i)]);
      double epoch_loss = 0.0;
      int epoch_batches = 0;
      bool capped = false;
      for (std::size_t b = 0; b < train.size(); b += batch) {
        const Batch mb = gather(rows, train, b, std::min(train.size(), b + batch));
        nn::NetGrad g;
        epoch_loss += member_loss(static_cast<int>(k), mb, &g);
        ++epoch_batches;
        optimizers_[k].step(members_[k], g);
        if (cfg_.max_updates > 0 && ++updates >= cfg_.max_updates) {
          capped = true;
          break;
        }
      }
      const double train_loss = epoch_loss / std::max(epoch_batches, 1);
      const double monitor = n_hold > 0 ? member_loss(static_cast<int>(k), hold_batch, nullptr, false) : train_loss;
      hold_curves[k].push_back(monitor);
      train_curves[k].push_back(train_loss);
      if (monitor < best) {
        best = monitor;
        best_params = members_[k].flat();
        since_best = 0;
      } else if (++since_best >= cfg_.patience) {
        ++epoch;
        break;
      }
      if (capped) {
        ++epoch;
        break;
      }
    }
    members_[k].set_flat(best_params);
    report.epochs_per_member.push_back(epoch);
  }

  report.member_holdout_loss = hold_curves;
  std::size_t longest = 0;
  for (const auto& c : hold_curves) longest = std::max(longest, c.size());
  for (std::size_t e = 0; e < longest; ++e) {
    double h = 0.0, t = 0.0;
    for (std::size_t k = 0; k < members_.size(); ++k) {
      const std::size_t i = std::min(e, hold_curves[k].size() - 1);
      h += hold_curves[k][i];
      t += train_curves[k][i];
    }
    report.holdout_loss.push_back(h / static_cast<double>(members_.size()));
    report.train_loss.push_back(t / static_cast<double>(members_.size()));
  }
  return report;
}

void DynamicsEnsemble::save(const std::filesystem::path& path) const {
  ArchiveWriter w;
  w.meta()["kind"] = "dynamics_ensemble";
  w.meta()["state_dim"] = state_dim_;
  w.meta()["action_dim"] = action_dim_;
  w.meta()["config"] = {{"members", cfg_.members},       {"hidden", cfg_.hidden},
                        {"lr", cfg_.lr},                 {"batch_size", cfg_.batch_size},
                        {"holdout_fraction", cfg_.holdout_fraction}, {"patience", cfg_.patience},
                        {"max_epochs", cfg_.max_epochs}, {"max_updates", cfg_.max_updates},
                        {"retrain_period", cfg_.retrain_period}, {"nll_beta", cfg_.nll_beta}};
  for (std::size_t k = 0; k < members_.size(); ++k) {
    nn::save_net(w, "member" + std::to_string(k), members_[k]);
    optimizers_[k].save(w, "member" + std::to_string(k) + ".opt");
  }
  w.add("input_norm.mean", input_norm_.mean);
  w.add("input_norm.std", input_norm_.std);
  w.add("delta_norm.mean", delta_norm_.mean);
  w.add("delta_norm.std", delta_norm_.std);
  w.add("reward_norm.mean", reward_norm_.mean);
  w.add("reward_norm.std", reward_norm_.std);
  w.write(path);
}

DynamicsEnsemble DynamicsEnsemble::load(const std::filesystem::path& path) {
  const ArchiveReader r(path);
  if (r.meta().value("kind", "") != "dynamics_ensemble")
    throw std::runtime_error("not a dynamics ensemble checkpoint: " + path.string());
  DynamicsEnsemble e;
  e.state_dim_ = r.meta().at("state_dim").get<int>();
  e.action_dim_ = r.meta().at("action_dim").get<int>();
  const auto& c = r.meta().at("config");
  e.cfg_.members = c.at("members").get<int>();
  e.cfg_.hidden = c.at("hidden").get<std::vector<int>>();
  e.cfg_.lr = c.at("lr").get<double>();
  e.cfg_.batch_size = c.at("batch_size").get<int>();
  e.cfg_.holdout_fraction = c.at("holdout_fraction").get<double>();
  e.cfg_.patience = c.at("patience").get<int>();
  e.cfg_.max_epochs = c.at("max_epochs").get<int>();
  e.cfg_.max_updates = c.at("max_updates").get<int>();
  e.cfg_.retrain_period = c.at("retrain_period").get<int>();
  e.cfg_.nll_beta = c.at("nll_beta").get<double>();
  for (int k = 0; k < e.cfg_.members; ++k) {
    e.members_.push_back(nn::load_net(r, "member" + std::to_string(k)));
    e.optimizers_.emplace_back();
    e.optimizers_.back().load(r, "member" + std::to_string(k) + ".opt");
  }
  e.input_norm_ = {r.vector("input_norm.mean"), r.vector("input_norm.std")};
  e.delta_norm_ = {r.vector("delta_norm.mean"), r.vector("delta_norm.std")};
  e.reward_norm_ = {r.vector("reward_norm.mean"), r.vector("reward_norm.std")};
  return e;
}

}  // namespace loop
