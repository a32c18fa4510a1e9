// SPDX-License-Identifier: Apache-2.0
#include "loop/sac.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace loop {

void SacConfig::validate() const {
  if (hidden.empty()) throw std::invalid_argument("SacConfig: need at least one hidden layer");
  if (!(actor_lr > 0 && critic_lr > 0 && alpha_lr > 0)) throw std::invalid_argument("SacConfig: learning rates must be positive");
  if (!(gamma >= 0.0 && gamma < 1.0)) throw std::invalid_argument("SacConfig: gamma must lie in [0, 1)");
  if (!(polyak >= 0.0 && polyak <= 1.0)) throw std::invalid_argument("SacConfig: polyak must lie in [0, 1]");
  if (batch_size < 1) throw std::invalid_argument("SacConfig: batch_size must be positive");
  if (!(init_alpha >= 0.0)) throw std::invalid_argument("SacConfig: init_alpha must be non-negative");
  if (learn_alpha && !(init_alpha > 0.0)) throw std::invalid_argument("SacConfig: a learned temperature must start positive");
  if (!(bc_weight >= 0.0)) throw std::invalid_argument("SacConfig: bc_weight must be non-negative");
}

nlohmann::json to_json(const SacConfig& c) {
  nlohmann::json j = {{"hidden", c.hidden},         {"actor_lr", c.actor_lr},     {"critic_lr", c.critic_lr},
                      {"alpha_lr", c.alpha_lr},     {"gamma", c.gamma},           {"polyak", c.polyak},
                      {"batch_size", c.batch_size}, {"init_alpha", c.init_alpha}, {"learn_alpha", c.learn_alpha},
                      {"bc_weight", c.bc_weight}};
  j["target_entropy"] = c.target_entropy ? nlohmann::json(*c.target_entropy) : nlohmann::json(nullptr);
  return j;
}

SacConfig sac_config_from_json(const nlohmann::json& j) {
  SacConfig c;
  c.hidden = j.value("hidden", c.hidden);
  c.actor_lr = j.value("actor_lr", c.actor_lr);
  c.critic_lr = j.value("critic_lr", c.critic_lr);
  c.alpha_lr = j.value("alpha_lr", c.alpha_lr);
  c.gamma = j.value("gamma", c.gamma);
  c.polyak = j.value("polyak", c.polyak);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.init_alpha = j.value("init_alpha", c.init_alpha);
  c.learn_alpha = j.value("learn_alpha", c.learn_alpha);
  c.bc_weight = j.value("bc_weight", c.bc_weight);
  if (j.contains("target_entropy") && !j.at("target_entropy").is_null())
    c.target_entropy = j.at("target_entropy").get<double>();
  return c;
}

ActorCritic::ActorCritic(int state_dim, ActionBounds bounds, SacConfig cfg, Rng& rng)
    : state_dim_(state_dim), bounds_(std::move(bounds)), cfg_(std::move(cfg)) {
  cfg_.validate();
  if (state_dim < 1 || bounds_.dim() < 1) throw std::invalid_argument("ActorCritic: dimensions must be positive");
  const int ad = bounds_.dim();
  std::vector<int> actor_dims{state_dim};
  actor_dims.insert(actor_dims.end(), cfg_.hidden.begin(), cfg_.hidden.end());
  actor_dims.push_back(2 * ad);
  std::vector<int> critic_dims{state_dim + ad};
  critic_dims.insert(critic_dims.end(), cfg_.hidden.begin(), cfg_.hidden.end());
  critic_dims.push_back(1);

  Rng actor_rng = rng.split();
  actor_ = nn::DenseNet(actor_dims, nn::Activation::kRelu, nn::Activation::kIdentity, actor_rng);
  actor_opt_ = nn::Adam(actor_.parameter_count(), nn::AdamConfig{cfg_.actor_lr});
  for (int i = 0; i < 2; ++i) {
    Rng critic_rng = rng.split();
    critics_.emplace_back(critic_dims, nn::Activation::kRelu, nn::Activation::kIdentity, critic_rng);
    targets_.push_back(critics_.back());
    critic_opts_.emplace_back(critics_.back().parameter_count(), nn::AdamConfig{cfg_.critic_lr});
  }
  log_alpha_ = cfg_.init_alpha > 0.0 ? std::log(cfg_.init_alpha) : -std::numeric_limits<double>::infinity();
  alpha_opt_ = nn::Adam(1, nn::AdamConfig{cfg_.alpha_lr});
}

double ActorCritic::alpha() const { return std::exp(log_alpha_); }

double ActorCritic::target_entropy() const {
  return cfg_.target_entropy.value_or(-static_cast<double>(bounds_.dim()));
}

void ActorCritic::check_states(const Eigen::MatrixXd& s) const {
  if (s.rows() != state_dim_) throw std::invalid_argument("ActorCritic: state dimension mismatch");
}

Eigen::MatrixXd ActorCritic::critic_input(const Eigen::MatrixXd& s, const Eigen::MatrixXd& a) const {
  check_states(s);
  if (a.rows() != action_dim() || a.cols() != s.cols()) throw std::invalid_argument("ActorCritic: action shape mismatch");
  Eigen::MatrixXd x(state_dim_ + action_dim(), s.cols());
  x.topRows(state_dim_) = s;
  x.bottomRows(action_dim()) = a;
  return x;
}

PolicySample ActorCritic::sample(const Eigen::MatrixXd& states, Rng& rng) const {
  check_states(states);
  const Eigen::MatrixXd out = actor_.forward_batch(states);
  const int ad = action_dim();
  nn::TanhGaussianSample s = nn::tanh_gaussian_sample(out.topRows(ad), out.bottomRows(ad), bounds_, rng);
  return {std::move(s.action), std::move(s.log_prob)};
}

Eigen::MatrixXd ActorCritic::mode(const Eigen::MatrixXd& states) const {
  check_states(states);
  return nn::tanh_gaussian_mode(actor_.forward_batch(states).topRows(action_dim()), bounds_);
}

ActionVec ActorCritic::act(const StateVec& s, Rng& rng) const { return sample(s, rng).action.col(0); }

Eigen::VectorXd ActorCritic::q(int i, const Eigen::MatrixXd& s, const Eigen::MatrixXd& a, bool target) const {
  const auto& nets = target ? targets_ : critics_;
  return nets.at(static_cast<std::size_t>(i)).forward_batch(critic_input(s, a)).row(0).transpose();
}

Eigen::VectorXd ActorCritic::q_min(const Eigen::MatrixXd& s, const Eigen::MatrixXd& a) const {
  const Eigen::MatrixXd x = critic_input(s, a);
  return critics_[0].forward_batch(x).row(0).cwiseMin(critics_[1].forward_batch(x).row(0)).transpose();
}

Eigen::VectorXd ActorCritic::soft_target(const Batch& batch, Rng& rng) const {
  const PolicySample next = sample(batch.s_next, rng);
  const Eigen::MatrixXd x = critic_input(batch.s_next, next.action);
  const Eigen::VectorXd q_next =
      targets_[0].forward_batch(x).row(0).cwiseMin(targets_[1].forward_batch(x).row(0)).transpose();
  const Eigen::VectorXd soft = q_next - alpha() * next.log_prob;
  return batch.r + cfg_.gamma * (1.0 - batch.done.array()).matrix().cwiseProduct(soft);
}

Eigen::VectorXd ActorCritic::sarsa_target(const Batch& batch) const {
  if (!batch.a_next) throw std::invalid_argument("sarsa_target: batch has no next actions");
  const Eigen::MatrixXd x = critic_input(batch.s_next, *batch.a_next);
  const Eigen::VectorXd q_next =
      targets_[0].forward_batch(x).row(0).cwiseMin(targets_[1].forward_batch(x).row(0)).transpose();
  return batch.r + cfg_.gamma * (1.0 - batch.done.array()).matrix().cwiseProduct(q_next);
}

CriticStats ActorCritic::update_critics(const Batch& batch, Rng& rng, CriticTarget kind) {
  const Eigen::VectorXd y = kind == CriticTarget::kSoft ? soft_target(batch, rng) : sarsa_target(batch);
  const Eigen::MatrixXd x = critic_input(batch.s, batch.a);
  const auto n = static_cast<double>(batch.size());
  CriticStats stats;
  for (std::size_t i = 0; i < critics_.size(); ++i) {
    nn::Tape tape;
    const Eigen::RowVectorXd qv = critics_[i].forward_batch(x, &tape).row(0);
    const Eigen::RowVectorXd residual = qv - y.transpose();
    stats.loss += 0.5 * residual.squaredNorm() / n / 2.0;
    stats.mean_q += qv.mean() / 2.0;
    critic_opts_[i].step(critics_[i], critics_[i].backward(tape, residual / n));
  }
  for (std::size_t i = 0; i < critics_.size(); ++i) nn::polyak_update(targets_[i], critics_[i], cfg_.polyak);
  return stats;
}

ActorStats ActorCritic::update_actor(const Batch& batch, Rng& rng) {
  check_states(batch.s);
  const int ad = action_dim();
  const auto n = static_cast<double>(batch.size());
  const double a = alpha();

  nn::Tape actor_tape;
  const Eigen::MatrixXd out = actor_.forward_batch(batch.s, &actor_tape);
  const nn::TanhGaussianSample smp = nn::tanh_gaussian_sample(out.topRows(ad), out.bottomRows(ad), bounds_, rng);

  const Eigen::MatrixXd x = critic_input(batch.s, smp.action);
  nn::Tape t0, t1;
  const Eigen::RowVectorXd q0 = critics_[0].forward_batch(x, &t0).row(0);
  const Eigen::RowVectorXd q1 = critics_[1].forward_batch(x, &t1).row(0);
  Eigen::RowVectorXd d0 = Eigen::RowVectorXd::Zero(q0.size()), d1 = d0;
  for (Eigen::Index j = 0; j < q0.size(); ++j) (q0(j) <= q1(j) ? d0 : d1)(j) = -1.0 / n;
  Eigen::MatrixXd din0, din1;
  critics_[0].backward(t0, d0, &din0);
  critics_[1].backward(t1, d1, &din1);
  const Eigen::MatrixXd d_action = (din0 + din1).bottomRows(ad);

  ActorStats stats;
  stats.loss = (a * smp.log_prob.transpose() - q0.cwiseMin(q1)).mean();
  stats.entropy = -smp.log_prob.mean();
  const Eigen::VectorXd d_logp = Eigen::VectorXd::Constant(smp.log_prob.size(), a / n);
  nn::HeadGrad head = nn::tanh_gaussian_backward(smp, d_logp, d_action, bounds_);
  if (cfg_.bc_weight > 0.0) {
    const nn::LogProbEval bc = nn::tanh_gaussian_log_prob(out.topRows(ad), out.bottomRows(ad), batch.a, bounds_);
    stats.bc_nll = -bc.log_prob.mean();
    stats.loss += cfg_.bc_weight * stats.bc_nll;
    head.d_mean -= (cfg_.bc_weight / n) * bc.grad.d_mean;
    head.d_raw_log_std -= (cfg_.bc_weight / n) * bc.grad.d_raw_log_std;
  }
  Eigen::MatrixXd d_out(2 * ad, out.cols());
  d_out.topRows(ad) = head.d_mean;
  d_out.bottomRows(ad) = head.d_raw_log_std;
  actor_opt_.step(actor_, actor_.backward(actor_tape, d_out));

  if (cfg_.learn_alpha) {
    // d/dlog_alpha of -log_alpha * mean(log pi + target entropy)
    Eigen::VectorXd p = Eigen::VectorXd::Constant(1, log_alpha_);
    const Eigen::VectorXd g = Eigen::VectorXd::Constant(1, -(smp.log_prob.array() + target_entropy()).mean());
    alpha_opt_.step(p, g);
    log_alpha_ = p(0);
  }
  stats.alpha = alpha();
  return stats;
}

void ActorCritic::save(ArchiveWriter& w, const std::string& prefix) const {
  w.meta()[prefix + "sac"] = {{"config", to_json(cfg_)},
                              {"state_dim", state_dim_},
                              {"bounds_lo", std::vector<double>(bounds_.lo.data(), bounds_.lo.data() + bounds_.lo.size())},
                              {"bounds_hi", std::vector<double>(bounds_.hi.data(), bounds_.hi.data() + bounds_.hi.size())},
                              {"log_alpha", log_alpha_}};
  nn::save_net(w, prefix + "actor", actor_);
  actor_opt_.save(w, prefix + "actor.opt");
  for (std::size_t i = 0; i < critics_.size(); ++i) {
    const std::string k = std::to_string(i);
    nn::save_net(w, prefix + "critic" + k, critics_[i]);
    nn::save_net(w, prefix + "target" + k, targets_[i]);
    critic_opts_[i].save(w, prefix + "critic" + k + ".opt");
  }
  alpha_opt_.save(w, prefix + "alpha.opt");
}

void ActorCritic::load(const ArchiveReader& r, const std::string& prefix) {
  const auto& m = r.meta().at(prefix + "sac");
  cfg_ = sac_config_from_json(m.at("config"));
  state_dim_ = m.at("state_dim").get<int>();
  const auto lo = m.at("bounds_lo").get<std::vector<double>>();
  const auto hi = m.at("bounds_hi").get<std::vector<double>>();
  bounds_.lo = Eigen::Map<const Eigen::VectorXd>(lo.data(), static_cast<Eigen::Index>(lo.size()));
  bounds_.hi = Eigen::Map<const Eigen::VectorXd>(hi.data(), static_cast<Eigen::Index>(hi.size()));
  log_alpha_ = m.at("log_alpha").get<double>();
  actor_ = nn::load_net(r, prefix + "actor");
  actor_opt_.load(r, prefix + "actor.opt");
  critics_.clear();
  targets_.clear();
  critic_opts_.assign(2, nn::Adam{});
  for (std::size_t i = 0; i < 2; ++i) {
    const std::string k = std::to_string(i);
    critics_.push_back(nn::load_net(r, prefix + "critic" + k));
    targets_.push_back(nn::load_net(r, prefix + "target" + k));
    critic_opts_[i].load(r, prefix + "critic" + k + ".opt");
  }
  alpha_opt_.load(r, prefix + "alpha.opt");
}

void ActorCritic::save(const std::filesystem::path& path) const {
  ArchiveWriter w;
  w.meta()["kind"] = "actor_critic";
  save(w, "");
  w.write(path);
}

ActorCritic ActorCritic::load(const std::filesystem::path& path) {
  const ArchiveReader r(path);
  if (r.meta().value("kind", "") != "actor_critic") throw std::runtime_error("not an actor-critic checkpoint: " + path.string());
  ActorCritic ac;
  ac.load(r, "");
  return ac;
}

}  // namespace loop
