// SPDX-License-Identifier: Apache-2.0
#include "loop/harness.hpp"

#include <chrono>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include "loop/archive.hpp"
#include "loop/tabular.hpp"

namespace loop {

using nlohmann::json;

namespace {

constexpr std::uint64_t kEnvStream = 1, kActStream = 2, kLearnStream = 3, kModelStream = 4, kInitStream = 5,
                        kEvalStream = 6, kDataStream = 7, kTheoryStream = 8;

json vec_json(const Eigen::VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

Eigen::VectorXd json_vec(const json& j) {
  const auto v = j.get<std::vector<double>>();
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

json mat_json(const Eigen::MatrixXd& m) {
  return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", std::vector<double>(m.data(), m.data() + m.size())}};
}

Eigen::MatrixXd json_mat(const json& j) {
  const auto d = j.at("data").get<std::vector<double>>();
  return Eigen::Map<const Eigen::MatrixXd>(d.data(), j.at("rows").get<Eigen::Index>(), j.at("cols").get<Eigen::Index>());
}

json ensemble_json(const EnsembleConfig& c) {
  return {{"members", c.members},       {"hidden", c.hidden},
          {"lr", c.lr},                 {"batch_size", c.batch_size},
          {"holdout_fraction", c.holdout_fraction}, {"patience", c.patience},
          {"max_epochs", c.max_epochs}, {"max_updates", c.max_updates},
          {"retrain_period", c.retrain_period}, {"nll_beta", c.nll_beta}};
}

EnsembleConfig ensemble_from_json(const json& j) {
  EnsembleConfig c;
  c.members = j.at("members");
  c.hidden = j.at("hidden").get<std::vector<int>>();
  c.lr = j.at("lr");
  c.batch_size = j.at("batch_size");
  c.holdout_fraction = j.at("holdout_fraction");
  c.patience = j.at("patience");
  c.max_epochs = j.at("max_epochs");
  c.max_updates = j.at("max_updates");
  c.retrain_period = j.at("retrain_period");
  c.nll_beta = j.at("nll_beta");
  return c;
}

// Keys whose value may be anything (free-form or nullable).
bool open_key(const std::string& path) {
  return path == "env" || path == "stop_return" || path == "sac.target_entropy";
}

void reject_unknown(const json& given, const json& known, const std::string& prefix) {
  for (const auto& [key, value] : given.items()) {
    const std::string path = prefix.empty() ? key : prefix + "." + key;
    if (open_key(path)) continue;
    if (!known.contains(key)) throw std::invalid_argument("unknown config key: " + path);
    if (value.is_object() && known.at(key).is_object()) reject_unknown(value, known.at(key), path);
  }
}

ExperimentConfig mode_defaults(Mode m) {
  ExperimentConfig c;
  c.mode = m;
  if (m == Mode::kPetsRestricted) {
    c.planner.terminal_value = false;
    c.planner.beta = 0.0;
    c.planner.optimizer = PlanOptimizer::kCem;
  }
  if (m == Mode::kLoopOffline) c.planner.beta = 1.0;
  return c;
}

double mean_of(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

}  // namespace

std::string to_string(Mode m) {
  switch (m) {
    case Mode::kLoopSac: return "loop-sac";
    case Mode::kSacOnly: return "sac-only";
    case Mode::kPetsRestricted: return "pets-restricted";
    case Mode::kLoopSarsa: return "loop-sarsa";
    case Mode::kLoopOffline: return "loop-offline";
    case Mode::kSafeLoop: return "safe-loop";
  }
  throw std::invalid_argument("unknown mode");
}

Mode mode_from_string(const std::string& s) {
  for (Mode m : {Mode::kLoopSac, Mode::kSacOnly, Mode::kPetsRestricted, Mode::kLoopSarsa, Mode::kLoopOffline,
                 Mode::kSafeLoop})
    if (to_string(m) == s) return m;
  throw std::invalid_argument("unknown mode: " + s);
}

bool ExperimentConfig::uses_planner() const { return mode != Mode::kSacOnly; }
bool ExperimentConfig::uses_model() const { return mode != Mode::kSacOnly; }
bool ExperimentConfig::uses_sac() const { return mode != Mode::kPetsRestricted; }

void ExperimentConfig::validate() const {
  if (total_steps < 0) throw std::invalid_argument("total_steps must be >= 0");
  if (seed_steps < 0) throw std::invalid_argument("seed_steps must be >= 0");
  if (eval_interval < 1) throw std::invalid_argument("eval_interval must be >= 1");
  if (eval_episodes < 1) throw std::invalid_argument("eval_episodes must be >= 1");
  if (updates_per_step < 0) throw std::invalid_argument("updates_per_step must be >= 0");
  if (buffer_capacity < 1) throw std::invalid_argument("buffer_capacity must be >= 1");
  if (checkpoint_interval < 0) throw std::invalid_argument("checkpoint_interval must be >= 0");
  if (actor_branch != "sample" && actor_branch != "mean")
    throw std::invalid_argument("actor_branch must be sample or mean");
  planner.validate();
  safe.validate();
  sac.validate();
  model.validate();
  if (mode == Mode::kPetsRestricted && (planner.terminal_value || planner.beta > 0.0))
    throw std::invalid_argument("pets-restricted requires planner.terminal_value=false and planner.beta=0");
  if (mode == Mode::kLoopOffline) {
    if (offline.learner_steps < 0) throw std::invalid_argument("offline.learner_steps must be >= 0");
    if (offline.bc_weight < 0.0) throw std::invalid_argument("offline.bc_weight must be >= 0");
    if (offline.eval_interval < 0) throw std::invalid_argument("offline.eval_interval must be >= 0");
  }
  if (dataset.size < 0) throw std::invalid_argument("dataset.size must be >= 0");
  if (dataset.random_fraction < 0.0 || dataset.random_fraction > 1.0)
    throw std::invalid_argument("dataset.random_fraction must lie in [0, 1]");
  const auto e = make_env(env);
  if (mode == Mode::kSafeLoop && !e->spec().has_cost)
    throw std::invalid_argument("safe-loop needs an environment with a cost signal");
  if (theory.mdps < 1 || theory.states < 1 || theory.actions < 1)
    throw std::invalid_argument("theory grid sizes must be positive");
}

json to_json(const ExperimentConfig& c) {
  json j;
  j["mode"] = to_string(c.mode);
  j["seed"] = c.seed;
  j["env"] = c.env;
  j["total_steps"] = c.total_steps;
  j["seed_steps"] = c.seed_steps;
  j["eval_interval"] = c.eval_interval;
  j["eval_episodes"] = c.eval_episodes;
  j["stop_return"] = c.stop_return ? json(*c.stop_return) : json(nullptr);
  j["updates_per_step"] = c.updates_per_step;
  j["buffer_capacity"] = c.buffer_capacity;
  j["actor_branch"] = c.actor_branch;
  j["checkpoint_interval"] = c.checkpoint_interval;
  j["single_thread"] = c.single_thread;
  j["planner"] = to_json(c.planner);
  j["safe"] = {{"d0", c.safe.d0}, {"min_safe", c.safe.min_safe}};
  j["sac"] = to_json(c.sac);
  j["model"] = ensemble_json(c.model);
  j["offline"] = {{"dataset", c.offline.dataset},
                  {"learner_steps", c.offline.learner_steps},
                  {"bc_weight", c.offline.bc_weight},
                  {"eval_interval", c.offline.eval_interval}};
  j["dataset"] = {{"behavior", c.dataset.behavior},
                  {"size", c.dataset.size},
                  {"random_fraction", c.dataset.random_fraction}};
  j["theory"] = {{"mdps", c.theory.mdps},       {"states", c.theory.states},     {"actions", c.theory.actions},
                 {"gamma", c.theory.gamma},     {"r_max", c.theory.r_max},       {"eps_m", c.theory.eps_m},
                 {"eps_v", c.theory.eps_v},     {"horizons", c.theory.horizons}, {"tv_kl", c.theory.tv_kl},
                 {"tv_steps", c.theory.tv_steps}};
  return j;
}

ExperimentConfig config_from_json(const json& given) {
  if (!given.is_object()) throw std::invalid_argument("config must be a JSON object");
  const Mode mode = mode_from_string(given.value("mode", std::string("loop-sac")));
  json j = to_json(mode_defaults(mode));
  reject_unknown(given, j, "");
  if (given.contains("env")) j["env"] = json::object();  // replaced, not merged
  j.merge_patch(given);

  ExperimentConfig c;
  c.mode = mode;
  c.seed = j.at("seed").get<std::uint64_t>();
  c.env = j.at("env");
  c.total_steps = j.at("total_steps");
  c.seed_steps = j.at("seed_steps");
  c.eval_interval = j.at("eval_interval");
  c.eval_episodes = j.at("eval_episodes");
  if (j.contains("stop_return") && !j.at("stop_return").is_null()) c.stop_return = j.at("stop_return").get<double>();
  c.updates_per_step = j.at("updates_per_step");
  c.buffer_capacity = j.at("buffer_capacity");
  c.actor_branch = j.at("actor_branch");
  c.checkpoint_interval = j.at("checkpoint_interval");
  c.single_thread = j.at("single_thread");
  c.planner = planner_config_from_json(j.at("planner"));
  c.safe.d0 = j.at("safe").at("d0");
  c.safe.min_safe = j.at("safe").at("min_safe");
  c.sac = sac_config_from_json(j.at("sac"));
  c.model = ensemble_from_json(j.at("model"));
  const json& off = j.at("offline");
  c.offline.dataset = off.at("dataset");
  c.offline.learner_steps = off.at("learner_steps");
  c.offline.bc_weight = off.at("bc_weight");
  c.offline.eval_interval = off.at("eval_interval");
  const json& ds = j.at("dataset");
  c.dataset.behavior = ds.at("behavior");
  c.dataset.size = ds.at("size");
  c.dataset.random_fraction = ds.at("random_fraction");
  const json& th = j.at("theory");
  c.theory.mdps = th.at("mdps");
  c.theory.states = th.at("states");
  c.theory.actions = th.at("actions");
  c.theory.gamma = th.at("gamma");
  c.theory.r_max = th.at("r_max");
  c.theory.eps_m = th.at("eps_m").get<std::vector<double>>();
  c.theory.eps_v = th.at("eps_v").get<std::vector<double>>();
  c.theory.horizons = th.at("horizons").get<std::vector<int>>();
  c.theory.tv_kl = th.at("tv_kl").get<std::vector<double>>();
  c.theory.tv_steps = th.at("tv_steps").get<std::vector<int>>();
  if (c.single_thread) c.planner.threads = 1;
  c.validate();
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config: " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::parse_error& e) {
    throw std::runtime_error("malformed config " + path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

MetricsWriter::MetricsWriter(const std::filesystem::path& path, bool append)
    : out_(path, append ? std::ios::app : std::ios::trunc) {
  if (!out_) throw std::runtime_error("cannot open metrics file: " + path.string());
}

void MetricsWriter::write(const json& record) {
  records_.push_back(record);
  if (out_.is_open()) {
    out_ << record.dump() << '\n';
    out_.flush();
  }
}

std::vector<json> read_metrics(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open metrics file: " + path.string());
  std::vector<json> out;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) out.push_back(json::parse(line));
  return out;
}

double actor_divergence(const Eigen::MatrixXd& actor_actions, const Eigen::MatrixXd& planner_actions) {
  if (actor_actions.cols() < 1) throw std::invalid_argument("actor_divergence: need at least one state");
  if (actor_actions.rows() != planner_actions.rows() || actor_actions.cols() != planner_actions.cols())
    throw std::invalid_argument("actor_divergence: shape mismatch");
  return (actor_actions - planner_actions).colwise().norm().mean();
}

json Counters::to_json() const {
  return {{"planner_calls", planner_calls},
          {"model_trains", model_trains},
          {"critic_updates", critic_updates},
          {"actor_updates", actor_updates},
          {"env_steps", env_steps}};
}

// ---------------------------------------------------------------------------

OnlineTrainer::OnlineTrainer(ExperimentConfig cfg)
    : cfg_(std::move(cfg)),
      buffer_(1, 1, 1),
      env_rng_(Rng::derive(cfg_.seed, kEnvStream)),
      act_rng_(Rng::derive(cfg_.seed, kActStream)),
      learn_rng_(Rng::derive(cfg_.seed, kLearnStream)),
      model_rng_(Rng::derive(cfg_.seed, kModelStream)) {
  if (cfg_.single_thread) cfg_.planner.threads = 1;
  cfg_.validate();
  if (cfg_.mode == Mode::kLoopOffline) throw std::invalid_argument("loop-offline runs through train_offline");
  env_ = make_env(cfg_.env);
  eval_env_ = env_->clone();
  const EnvSpec& spec = env_->spec();
  buffer_ = ReplayBuffer(spec.state_dim, spec.action_dim, cfg_.buffer_capacity);
  Rng init = Rng::derive(cfg_.seed, kInitStream);
  if (cfg_.uses_sac()) ac_.emplace(spec.state_dim, spec.bounds, cfg_.sac, init);
  if (cfg_.uses_model()) model_.emplace(spec.state_dim, spec.action_dim, cfg_.model, init);
  prev_ = SequenceDistribution::initial(cfg_.planner.horizon, spec.bounds, cfg_.planner.sigma_prior);
}

ActionVec OnlineTrainer::act(const StateVec& obs, SequenceDistribution& prev, Rng& rng, bool training) {
  const EnvSpec& spec = env_->spec();
  if (!cfg_.uses_planner()) return training ? ac_->act(obs, rng) : ActionVec(ac_->mode(obs).col(0));

  const EnsembleModel model(*model_);
  PlanContext ctx;
  ctx.bounds = spec.bounds;
  ctx.model = &model;
  ctx.nominal_member = nominal_member_;
  if (ac_) {
    const ActorCritic* ac = &*ac_;
    if (cfg_.actor_branch == "mean")
      ctx.actor = [ac](const Eigen::MatrixXd& s, Rng&) { return ac->mode(s); };
    else
      ctx.actor = [ac](const Eigen::MatrixXd& s, Rng& r) { return ac->sample(s, r).action; };
    ctx.terminal = [ac](const Eigen::MatrixXd& s, const Eigen::MatrixXd& a) { return ac->q_min(s, a); };
  }
  PlanResult res;
  if (cfg_.mode == Mode::kSafeLoop) {
    const Env* env = env_.get();
    ctx.cost = [env](const Eigen::MatrixXd&, const Eigen::MatrixXd&, const Eigen::MatrixXd& s_next) {
      return env->cost_batch(s_next);
    };
    res = safe_arc_plan(obs, ctx, cfg_.planner, cfg_.safe, prev, rng);
  } else {
    res = arc_plan(obs, ctx, cfg_.planner, prev, rng);
  }
  prev = res.next;
  if (training) {
    ++counters_.planner_calls;
    if (ac_) {
      divergence_sum_ += actor_divergence(ac_->mode(obs), res.action);
      ++divergence_count_;
    }
  }
  return res.action;
}

void OnlineTrainer::end_episode() {
  recent_returns_.push_back(episode_return_);
  obs_.resize(0);
}

void OnlineTrainer::learn() {
  if (!ac_ || step_ < cfg_.seed_steps) return;
  if (buffer_.size() < static_cast<std::size_t>(cfg_.sac.batch_size)) return;
  const CriticTarget kind = cfg_.mode == Mode::kLoopSarsa ? CriticTarget::kSarsa : CriticTarget::kSoft;
  for (int u = 0; u < cfg_.updates_per_step; ++u) {
    const auto rows = buffer_.sample(static_cast<std::size_t>(cfg_.sac.batch_size), learn_rng_);
    const Batch batch = Batch::from(rows);
    const CriticStats cs = ac_->update_critics(batch, learn_rng_, kind);
    const ActorStats as = ac_->update_actor(batch, learn_rng_);
    ++counters_.critic_updates;
    ++counters_.actor_updates;
    critic_loss_sum_ += cs.loss;
    actor_loss_sum_ += as.loss;
    entropy_sum_ += as.entropy;
    alpha_last_ = as.alpha;
    ++loss_count_;
  }
}

EvalResult OnlineTrainer::evaluate(int episodes, std::uint64_t stream) {
  EvalResult out;
  const EnvSpec& spec = eval_env_->spec();
  for (int e = 0; e < episodes; ++e) {
    Rng rng = Rng::derive(Rng::derive(cfg_.seed, kEvalStream).next_u64() ^ stream, static_cast<std::uint64_t>(e));
    Rng env_rng = rng.split();
    Rng plan_rng = rng.split();
    const int saved_member = nominal_member_;
    if (model_) nominal_member_ = static_cast<int>(plan_rng.index(static_cast<std::uint64_t>(model_->size())));
    SequenceDistribution prev =
        SequenceDistribution::initial(cfg_.planner.horizon, spec.bounds, cfg_.planner.sigma_prior);
    StateVec obs = eval_env_->reset(env_rng);
    double ret = 0.0, cost = 0.0;
    for (int t = 0; t < spec.max_steps; ++t) {
      const ActionVec a = act(obs, prev, plan_rng, false);
      const StepResult r = eval_env_->step(a, env_rng);
      ret += r.reward;
      cost += r.cost;
      obs = r.obs;
      if (r.done) break;
    }
    nominal_member_ = saved_member;
    out.returns.push_back(ret);
    out.costs.push_back(cost);
  }
  out.mean_return = mean_of(out.returns);
  out.mean_cost = mean_of(out.costs);
  return out;
}

json OnlineTrainer::record(long long step) {
  // Start states depend on the seed and the step only, so runs that differ
  // only in mode are evaluated on the same draws.
  const EvalResult ev = evaluate(cfg_.eval_episodes, static_cast<std::uint64_t>(step));
  json r;
  r["step"] = step;
  r["mode"] = to_string(cfg_.mode);
  r["eval_return"] = ev.mean_return;
  r["eval_returns"] = ev.returns;
  r["eval_cost"] = ev.mean_cost;
  r["eval_costs"] = ev.costs;
  r["train_cost"] = train_cost_;
  r["train_episodes"] = recent_returns_.size();
  r["train_return"] = recent_returns_.empty() ? json(nullptr) : json(recent_returns_.back());
  r["critic_loss"] = loss_count_ ? json(critic_loss_sum_ / static_cast<double>(loss_count_)) : json(nullptr);
  r["actor_loss"] = loss_count_ ? json(actor_loss_sum_ / static_cast<double>(loss_count_)) : json(nullptr);
  r["entropy"] = loss_count_ ? json(entropy_sum_ / static_cast<double>(loss_count_)) : json(nullptr);
  r["alpha"] = ac_ ? json(ac_->alpha()) : json(nullptr);
  r["model_loss"] = counters_.model_trains ? json(model_loss_last_) : json(nullptr);
  r["actor_divergence"] =
      divergence_count_ ? json(divergence_sum_ / static_cast<double>(divergence_count_)) : json(nullptr);
  r["counters"] = counters_.to_json();
  critic_loss_sum_ = actor_loss_sum_ = entropy_sum_ = 0.0;
  loss_count_ = 0;
  divergence_sum_ = 0.0;
  divergence_count_ = 0;
  if (cfg_.stop_return && ev.mean_return >= *cfg_.stop_return && !threshold_step_) {
    threshold_step_ = step;
    stopped_ = true;
  }
  return r;
}

void OnlineTrainer::run_until(long long target, MetricsWriter* metrics) {
  target = std::min(target, cfg_.total_steps);
  const auto started = std::chrono::steady_clock::now();
  auto emit = [&](json r) {
    if (!cfg_.single_thread)
      r["wall_clock"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    history_.push_back(r);
    if (metrics) metrics->write(r);
  };
  if (history_.empty()) emit(record(0));

  const EnvSpec& spec = env_->spec();
  while (!stopped_ && step_ < target) {
    if (obs_.size() == 0) {
      obs_ = env_->reset(env_rng_);
      episode_t_ = 0;
      episode_return_ = episode_cost_ = 0.0;
      prev_ = SequenceDistribution::initial(cfg_.planner.horizon, spec.bounds, cfg_.planner.sigma_prior);
      if (model_) nominal_member_ = static_cast<int>(act_rng_.index(static_cast<std::uint64_t>(model_->size())));
    }
    ActionVec a;
    if (step_ < cfg_.seed_steps) {
      a.resize(spec.action_dim);
      for (int i = 0; i < spec.action_dim; ++i) a(i) = act_rng_.uniform(spec.bounds.lo(i), spec.bounds.hi(i));
    } else {
      a = act(obs_, prev_, act_rng_, true);
    }
    if (pending_) {
      pending_->a_next = a;
      buffer_.push(std::move(*pending_));
      pending_.reset();
    }
    const StepResult r = env_->step(a, env_rng_);
    ++counters_.env_steps;
    train_cost_ += r.cost;
    episode_return_ += r.reward;
    episode_cost_ += r.cost;
    ++episode_t_;
    Transition t{obs_, a, r.reward, r.cost, r.obs, r.done, std::nullopt};
    const bool episode_end = r.done || episode_t_ >= spec.max_steps;
    obs_ = r.obs;
    ++step_;
    if (cfg_.mode == Mode::kLoopSarsa) {
      if (episode_end) {
        // Terminal rows are masked; truncated rows bootstrap from the action
        // the policy would take at s'.
        if (r.done)
          t.a_next = a;
        else if (step_ <= cfg_.seed_steps) {
          ActionVec an(spec.action_dim);
          for (int i = 0; i < spec.action_dim; ++i) an(i) = act_rng_.uniform(spec.bounds.lo(i), spec.bounds.hi(i));
          t.a_next = an;
        } else {
          t.a_next = act(obs_, prev_, act_rng_, true);
        }
        buffer_.push(std::move(t));
      } else {
        pending_ = std::move(t);
      }
    } else {
      buffer_.push(std::move(t));
    }
    if (episode_end) end_episode();

    if (model_ && step_ >= cfg_.seed_steps && (step_ - cfg_.seed_steps) % cfg_.model.retrain_period == 0 &&
        !buffer_.empty()) {
      const EnsembleTrainReport rep = model_->train(buffer_, model_rng_);
      ++counters_.model_trains;
      model_loss_last_ = rep.holdout_loss.empty() ? 0.0 : rep.holdout_loss.back();
    }
    learn();
    if (step_ % cfg_.eval_interval == 0 || step_ == cfg_.total_steps) emit(record(step_));
  }
}

void OnlineTrainer::save_state(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  json s;
  s["config"] = to_json(cfg_);
  s["step"] = step_;
  s["stopped"] = stopped_;
  s["threshold_step"] = threshold_step_ ? json(*threshold_step_) : json(nullptr);
  s["train_cost"] = train_cost_;
  s["rng"] = {{"env", env_rng_.state()}, {"act", act_rng_.state()}, {"learn", learn_rng_.state()},
              {"model", model_rng_.state()}};
  s["env_state"] = vec_json(env_->state());
  s["obs"] = vec_json(obs_);
  s["episode"] = {{"t", episode_t_}, {"ret", episode_return_}, {"cost", episode_cost_}, {"member", nominal_member_}};
  s["prev"] = {{"mean", mat_json(prev_.mean)}, {"std", mat_json(prev_.std)}};
  if (pending_)
    s["pending"] = {{"s", vec_json(pending_->s)}, {"a", vec_json(pending_->a)}, {"r", pending_->r},
                    {"c", pending_->c},           {"s_next", vec_json(pending_->s_next)}, {"done", pending_->done}};
  s["recent_returns"] = recent_returns_;
  s["acc"] = {{"critic", critic_loss_sum_}, {"actor", actor_loss_sum_}, {"entropy", entropy_sum_},
              {"alpha", alpha_last_},       {"count", loss_count_},     {"div", divergence_sum_},
              {"div_count", divergence_count_}, {"model_loss", model_loss_last_}};
  s["counters"] = counters_.to_json();
  s["history"] = history_;
  std::ofstream(dir / "trainer.json") << s.dump(1);
  buffer_.save(dir / "buffer.bin", {{"source", "online"}, {"mode", to_string(cfg_.mode)}});
  if (ac_) ac_->save(dir / "actor_critic.bin");
  if (model_) model_->save(dir / "ensemble.bin");
}

void OnlineTrainer::load_state(const std::filesystem::path& dir) {
  std::ifstream in(dir / "trainer.json");
  if (!in) throw std::runtime_error("missing trainer state in " + dir.string());
  json s;
  in >> s;
  const ExperimentConfig saved = config_from_json(s.at("config"));
  if (saved.mode != cfg_.mode || saved.seed != cfg_.seed)
    throw std::invalid_argument("checkpoint was written by a different mode or seed");
  step_ = s.at("step");
  stopped_ = s.at("stopped");
  threshold_step_.reset();
  if (!s.at("threshold_step").is_null()) threshold_step_ = s.at("threshold_step").get<long long>();
  train_cost_ = s.at("train_cost");
  env_rng_.set_state(s.at("rng").at("env"));
  act_rng_.set_state(s.at("rng").at("act"));
  learn_rng_.set_state(s.at("rng").at("learn"));
  model_rng_.set_state(s.at("rng").at("model"));
  env_->set_state(json_vec(s.at("env_state")));
  obs_ = json_vec(s.at("obs"));
  const json& ep = s.at("episode");
  episode_t_ = ep.at("t");
  episode_return_ = ep.at("ret");
  episode_cost_ = ep.at("cost");
  nominal_member_ = ep.at("member");
  prev_.mean = json_mat(s.at("prev").at("mean"));
  prev_.std = json_mat(s.at("prev").at("std"));
  pending_.reset();
  if (s.contains("pending")) {
    const json& p = s.at("pending");
    pending_ = Transition{json_vec(p.at("s")), json_vec(p.at("a")), p.at("r"), p.at("c"), json_vec(p.at("s_next")),
                          p.at("done"), std::nullopt};
  }
  recent_returns_ = s.at("recent_returns").get<std::vector<double>>();
  const json& acc = s.at("acc");
  critic_loss_sum_ = acc.at("critic");
  actor_loss_sum_ = acc.at("actor");
  entropy_sum_ = acc.at("entropy");
  alpha_last_ = acc.at("alpha");
  loss_count_ = acc.at("count");
  divergence_sum_ = acc.at("div");
  divergence_count_ = acc.at("div_count");
  model_loss_last_ = acc.at("model_loss");
  const json& c = s.at("counters");
  counters_.planner_calls = c.at("planner_calls");
  counters_.model_trains = c.at("model_trains");
  counters_.critic_updates = c.at("critic_updates");
  counters_.actor_updates = c.at("actor_updates");
  counters_.env_steps = c.at("env_steps");
  history_ = s.at("history").get<std::vector<json>>();
  buffer_ = ReplayBuffer::load(dir / "buffer.bin");
  if (ac_) ac_.emplace(ActorCritic::load(dir / "actor_critic.bin"));
  if (model_) model_.emplace(DynamicsEnsemble::load(dir / "ensemble.bin"));
}

// ---------------------------------------------------------------------------

namespace {

double eval_policy(Env& env, const std::function<ActionVec(const StateVec&, Rng&, int)>& policy, std::uint64_t seed,
                   int episodes, std::vector<double>& returns) {
  returns.clear();
  for (int e = 0; e < episodes; ++e) {
    // Same reset stream per episode index so policies are compared on paired starts.
    Rng env_rng = Rng::derive(seed, 2 * static_cast<std::uint64_t>(e));
    Rng act_rng = Rng::derive(seed, 2 * static_cast<std::uint64_t>(e) + 1);
    StateVec obs = env.reset(env_rng);
    double ret = 0.0;
    for (int t = 0; t < env.spec().max_steps; ++t) {
      const StepResult r = env.step(policy(obs, act_rng, t), env_rng);
      ret += r.reward;
      obs = r.obs;
      if (r.done) break;
    }
    returns.push_back(ret);
  }
  return mean_of(returns);
}

}  // namespace

OfflineResult train_offline(const ExperimentConfig& cfg_in, const ReplayBuffer& dataset, MetricsWriter* metrics,
                            const std::filesystem::path& checkpoint_dir) {
  ExperimentConfig cfg = cfg_in;
  if (cfg.single_thread) cfg.planner.threads = 1;
  cfg.validate();
  if (cfg.mode != Mode::kLoopOffline) throw std::invalid_argument("train_offline requires mode loop-offline");
  if (dataset.empty()) throw std::invalid_argument("train_offline: dataset is empty");
  auto env = make_env(cfg.env);
  const EnvSpec& spec = env->spec();
  if (dataset.state_dim() != spec.state_dim || dataset.action_dim() != spec.action_dim)
    throw std::invalid_argument("train_offline: dataset dimensions do not match the environment");
  if (dataset.size() < static_cast<std::size_t>(cfg.sac.batch_size))
    throw std::invalid_argument("train_offline: dataset smaller than one batch");

  Rng init = Rng::derive(cfg.seed, kInitStream);
  Rng model_rng = Rng::derive(cfg.seed, kModelStream);
  Rng learn_rng = Rng::derive(cfg.seed, kLearnStream);
  const std::uint64_t eval_seed = Rng::derive(cfg.seed, kEvalStream).next_u64();

  DynamicsEnsemble model(spec.state_dim, spec.action_dim, cfg.model, init);
  const EnsembleTrainReport rep = model.train(dataset, model_rng);
  SacConfig sac = cfg.sac;
  sac.bc_weight = cfg.offline.bc_weight;
  ActorCritic ac(spec.state_dim, spec.bounds, sac, init);

  auto base_policy = [&ac](const StateVec& s, Rng&, int) { return ActionVec(ac.mode(s).col(0)); };
  auto emit = [&](json r) {
    if (metrics) metrics->write(r);
  };
  double critic_sum = 0.0, actor_sum = 0.0, bc_sum = 0.0;
  long long count = 0;
  for (int i = 1; i <= cfg.offline.learner_steps; ++i) {
    const Batch batch = Batch::from(dataset.sample(static_cast<std::size_t>(sac.batch_size), learn_rng));
    critic_sum += ac.update_critics(batch, learn_rng).loss;
    const ActorStats as = ac.update_actor(batch, learn_rng);
    actor_sum += as.loss;
    bc_sum += as.bc_nll;
    ++count;
    if (cfg.offline.eval_interval > 0 && i % cfg.offline.eval_interval == 0 && i != cfg.offline.learner_steps) {
      std::vector<double> rets;
      json r;
      r["step"] = i;
      r["base_return"] = eval_policy(*env, base_policy, eval_seed, cfg.eval_episodes, rets);
      r["base_returns"] = rets;
      r["critic_loss"] = critic_sum / static_cast<double>(count);
      r["actor_loss"] = actor_sum / static_cast<double>(count);
      r["bc_nll"] = bc_sum / static_cast<double>(count);
      r["alpha"] = ac.alpha();
      emit(r);
      critic_sum = actor_sum = bc_sum = 0.0;
      count = 0;
    }
  }

  OfflineResult out;
  out.base_return = eval_policy(*env, base_policy, eval_seed, cfg.eval_episodes, out.base_returns);

  const EnsembleModel plan_model(model);
  PlannerConfig pc = cfg.planner;
  pc.beta = 1.0;
  PlanContext ctx;
  ctx.bounds = spec.bounds;
  ctx.model = &plan_model;
  if (cfg.actor_branch == "mean")
    ctx.actor = [&ac](const Eigen::MatrixXd& s, Rng&) { return ac.mode(s); };
  else
    ctx.actor = [&ac](const Eigen::MatrixXd& s, Rng& r) { return ac.sample(s, r).action; };
  ctx.terminal = [&ac](const Eigen::MatrixXd& s, const Eigen::MatrixXd& a) { return ac.q_min(s, a); };
  SequenceDistribution prev = SequenceDistribution::initial(pc.horizon, spec.bounds, pc.sigma_prior);
  double div_sum = 0.0;
  long long div_count = 0;
  auto loop_policy = [&](const StateVec& s, Rng& rng, int t) {
    if (t == 0) {
      prev = SequenceDistribution::initial(pc.horizon, spec.bounds, pc.sigma_prior);
      ctx.nominal_member = static_cast<int>(rng.index(static_cast<std::uint64_t>(model.size())));
    }
    const PlanResult res = arc_plan(s, ctx, pc, prev, rng);
    prev = res.next;
    div_sum += actor_divergence(ac.mode(s), res.action);
    ++div_count;
    return res.action;
  };
  out.loop_return = eval_policy(*env, loop_policy, eval_seed, cfg.eval_episodes, out.loop_returns);

  json r;
  r["step"] = cfg.offline.learner_steps;
  r["base_return"] = out.base_return;
  r["base_returns"] = out.base_returns;
  r["loop_return"] = out.loop_return;
  r["loop_returns"] = out.loop_returns;
  r["critic_loss"] = count ? json(critic_sum / static_cast<double>(count)) : json(nullptr);
  r["actor_loss"] = count ? json(actor_sum / static_cast<double>(count)) : json(nullptr);
  r["bc_nll"] = count ? json(bc_sum / static_cast<double>(count)) : json(nullptr);
  r["alpha"] = ac.alpha();
  r["model_loss"] = rep.holdout_loss.empty() ? json(nullptr) : json(rep.holdout_loss.back());
  r["actor_divergence"] = div_count ? json(div_sum / static_cast<double>(div_count)) : json(nullptr);
  emit(r);

  if (!checkpoint_dir.empty()) {
    std::filesystem::create_directories(checkpoint_dir);
    ac.save(checkpoint_dir / "actor_critic.bin");
    model.save(checkpoint_dir / "ensemble.bin");
  }
  return out;
}

ReplayBuffer make_dataset(const ExperimentConfig& cfg) {
  cfg.validate();
  auto env = make_env(cfg.env);
  Rng rng = Rng::derive(cfg.seed, kDataStream);
  const BehaviorFn behavior = behavior_policy(*env, cfg.dataset.behavior, cfg.dataset.random_fraction);
  return make_offline_dataset(*env, behavior, static_cast<std::size_t>(cfg.dataset.size), rng);
}

// ---------------------------------------------------------------------------

TheoryResult theory_check(const ExperimentConfig& cfg, std::ostream& report) {
  namespace tb = tabular;
  const TheoryConfig& th = cfg.theory;
  TheoryResult out;
  auto emit = [&](const json& r) {
    report << r.dump() << '\n';
    ++out.rows;
    if (r.contains("holds") && !r.at("holds").get<bool>()) {
      out.holds = false;
      ++out.violations;
    }
  };

  const double v_max = th.r_max / (1.0 - th.gamma);
  for (int m = 0; m < th.mdps; ++m) {
    Rng rng = Rng::derive(Rng::derive(cfg.seed, kTheoryStream).next_u64(), static_cast<std::uint64_t>(m));
    const tb::TabularMDP mdp = tb::TabularMDP::random(th.states, th.actions, th.gamma, rng, th.r_max);
    for (double em : th.eps_m)
      for (double ev : th.eps_v)
        for (int h : th.horizons) {
          tb::BoundInputs b;
          b.eps_m = em;
          b.eps_v = ev;
          b.H = h;
          b.gamma = th.gamma;
          b.r_max = th.r_max;
          b.v_max = v_max;
          const tb::BoundReport rep = tb::verify_bound(mdp, b, 1, rng);
          json r = tb::to_json(rep.trials.front());
          r["kind"] = "lookahead_bound";
          r["mdp"] = m;
          emit(r);
        }
  }

  for (double g : {0.5, 0.9, 0.99})
    for (double ev : th.eps_v) {
      tb::BoundInputs b;
      b.eps_v = ev;
      b.gamma = g;
      b.H = 1;
      b.r_max = th.r_max;
      b.v_max = th.r_max / (1.0 - g);
      const double bound = tb::lookahead_bound(b);
      const double expected = 2.0 * g / (1.0 - g) * ev;
      const double err = std::abs(bound - expected);
      emit({{"kind", "greedy_bound"}, {"gamma", g}, {"eps_v", ev}, {"bound", bound}, {"expected", expected},
            {"abs_error", err}, {"holds", err <= 1e-12 * std::max(1.0, std::abs(expected))}});
    }

  for (double kl : th.tv_kl)
    for (int steps : th.tv_steps) {
      json r = tb::to_json(tb::trust_region_tv_check(kl, steps));
      r["kind"] = "trust_region_tv";
      emit(r);
    }
  return out;
}

}  // namespace loop
