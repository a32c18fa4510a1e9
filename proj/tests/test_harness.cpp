#include <filesystem>
#include <sstream>

#include "doctest.h"
#include "loop/harness.hpp"

using namespace loop;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

json tiny(const std::string& mode) {
  return {{"mode", mode},
          {"seed", 3},
          {"env", {{"id", "pendulum"}, {"max_steps", 40}}},
          {"total_steps", 240},
          {"seed_steps", 80},
          {"eval_interval", 80},
          {"eval_episodes", 1},
          {"single_thread", true},
          {"sac", {{"hidden", {16, 16}}, {"batch_size", 32}}},
          {"model", {{"members", 2}, {"hidden", {16}}, {"max_epochs", 3}, {"max_updates", 20},
                     {"retrain_period", 80}, {"batch_size", 32}}},
          {"planner", {{"population", 12}, {"particles", 1}, {"iterations", 2}}}};
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("loop_harness_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST_CASE("config defaults round trip and validation") {
  const ExperimentConfig c = config_from_json(json::object());
  CHECK(c.mode == Mode::kLoopSac);
  CHECK(c.seed_steps == 1000);
  CHECK(c.eval_episodes == 5);
  CHECK(to_json(config_from_json(to_json(c))) == to_json(c));

  CHECK_THROWS_AS(config_from_json({{"bogus", 1}}), std::invalid_argument);
  CHECK_THROWS_AS(config_from_json({{"planner", {{"horizn", 3}}}}), std::invalid_argument);
  CHECK_THROWS_AS(config_from_json({{"mode", "dreamer"}}), std::invalid_argument);
  CHECK_THROWS_AS(config_from_json({{"eval_interval", 0}}), std::invalid_argument);
  CHECK_THROWS_AS(config_from_json({{"mode", "safe-loop"}}), std::invalid_argument);  // pendulum has no cost
  CHECK_NOTHROW(config_from_json({{"mode", "safe-loop"}, {"env", {{"id", "pointnav"}}}}));

  const ExperimentConfig pets = config_from_json({{"mode", "pets-restricted"}});
  CHECK_FALSE(pets.planner.terminal_value);
  CHECK(pets.planner.beta == 0.0);
  CHECK_THROWS_AS(config_from_json({{"mode", "pets-restricted"}, {"planner", {{"terminal_value", true}}}}),
                  std::invalid_argument);

  const ExperimentConfig st = config_from_json({{"single_thread", true}, {"planner", {{"threads", 4}}}});
  CHECK(st.planner.threads == 1);
  const ExperimentConfig sr = config_from_json({{"stop_return", -200.0}});
  REQUIRE(sr.stop_return);
  CHECK(*sr.stop_return == -200.0);
}

TEST_CASE("actor divergence") {
  Eigen::MatrixXd a = Eigen::MatrixXd::Random(2, 7);
  CHECK(actor_divergence(a, a) == 0.0);
  const Eigen::Vector2d delta(0.3, -0.4);
  CHECK(actor_divergence(a, a.colwise() + delta) == doctest::Approx(0.5).epsilon(1e-12));
  CHECK_THROWS_AS(actor_divergence(Eigen::MatrixXd(2, 0), Eigen::MatrixXd(2, 0)), std::invalid_argument);
  CHECK_THROWS_AS(actor_divergence(a, Eigen::MatrixXd::Zero(2, 6)), std::invalid_argument);
}

TEST_CASE("zero-step run records only the initial evaluation") {
  json j = tiny("loop-sac");
  j["total_steps"] = 0;
  OnlineTrainer tr(config_from_json(j));
  MetricsWriter m;
  tr.run(&m);
  REQUIRE(m.records().size() == 1);
  CHECK(m.records()[0]["step"] == 0);
  CHECK(tr.counters().env_steps == 0);
}

TEST_CASE("mode matrix touches only declared components") {
  struct Expect {
    std::string mode;
    bool planner, model, sac;
  };
  for (const Expect& e : {Expect{"loop-sac", true, true, true}, Expect{"sac-only", false, false, true},
                          Expect{"pets-restricted", true, true, false}, Expect{"loop-sarsa", true, true, true}}) {
    CAPTURE(e.mode);
    OnlineTrainer tr(config_from_json(tiny(e.mode)));
    tr.run();
    const Counters& c = tr.counters();
    CHECK(c.env_steps == 240);
    CHECK((c.planner_calls > 0) == e.planner);
    CHECK((c.model_trains > 0) == e.model);
    CHECK((c.critic_updates > 0) == e.sac);
    CHECK((tr.actor_critic() != nullptr) == e.sac);
    CHECK((tr.ensemble() != nullptr) == e.model);
    CHECK(tr.history().size() == 4);
  }
}

TEST_CASE("sarsa buffer rows all carry their next action") {
  OnlineTrainer tr(config_from_json(tiny("loop-sarsa")));
  tr.run();
  REQUIRE(tr.buffer().size() > 0);
  for (std::size_t i = 0; i < tr.buffer().size(); ++i) CHECK(tr.buffer().at(i).a_next.has_value());
  // Consecutive rows inside an episode chain a_next to the following action.
  CHECK((*tr.buffer().at(0).a_next - tr.buffer().at(1).a).norm() == 0.0);
}

TEST_CASE("safe-loop accumulates training cost") {
  json j = tiny("safe-loop");
  j["env"] = {{"id", "pointnav"}, {"max_steps", 40}};
  OnlineTrainer tr(config_from_json(j));
  MetricsWriter m;
  tr.run(&m);
  CHECK(tr.counters().planner_calls > 0);
  CHECK(m.records().back()["train_cost"].get<double>() == tr.training_cost());
  CHECK(tr.training_cost() >= 0.0);
}

TEST_CASE("fixed seed single-threaded runs are bit identical") {
  const fs::path dir = scratch("det");
  for (int i = 0; i < 2; ++i) {
    OnlineTrainer tr(config_from_json(tiny("loop-sac")));
    MetricsWriter m(dir / ("m" + std::to_string(i) + ".jsonl"));
    tr.run(&m);
  }
  std::ifstream a(dir / "m0.jsonl"), b(dir / "m1.jsonl");
  const std::string sa((std::istreambuf_iterator<char>(a)), {}), sb((std::istreambuf_iterator<char>(b)), {});
  CHECK(!sa.empty());
  CHECK(sa == sb);
  CHECK(sa.find("wall_clock") == std::string::npos);

  json other = tiny("loop-sac");
  other["seed"] = 4;
  OnlineTrainer tr(config_from_json(other));
  tr.run();
  CHECK(json(tr.history()).dump() != json(read_metrics(dir / "m0.jsonl")).dump());
}

TEST_CASE("metrics replay to identical records") {
  const fs::path dir = scratch("replay");
  OnlineTrainer tr(config_from_json(tiny("sac-only")));
  MetricsWriter m(dir / "metrics.jsonl");
  tr.run(&m);
  const auto back = read_metrics(dir / "metrics.jsonl");
  REQUIRE(back.size() == m.records().size());
  long long last = -1;
  for (std::size_t i = 0; i < back.size(); ++i) {
    CHECK(back[i] == m.records()[i]);
    CHECK(back[i]["step"].get<long long>() > last);
    last = back[i]["step"];
  }
}

TEST_CASE("checkpoint resume matches an uninterrupted run") {
  for (const std::string mode : {"loop-sac", "loop-sarsa", "sac-only"}) {
    CAPTURE(mode);
    const fs::path dir = scratch("resume_" + mode);
    OnlineTrainer full(config_from_json(tiny(mode)));
    full.run();

    OnlineTrainer first(config_from_json(tiny(mode)));
    first.run_until(130);  // mid-episode, mid-eval-interval
    first.save_state(dir / "ckpt");
    OnlineTrainer second(config_from_json(tiny(mode)));
    second.load_state(dir / "ckpt");
    CHECK(second.step() == 130);
    second.run();
    CHECK(json(second.history()).dump() == json(full.history()).dump());
  }
}

TEST_CASE("checkpoint rejects another seed") {
  const fs::path dir = scratch("reject");
  OnlineTrainer a(config_from_json(tiny("sac-only")));
  a.run_until(10);
  a.save_state(dir);
  json j = tiny("sac-only");
  j["seed"] = 99;
  OnlineTrainer b(config_from_json(j));
  CHECK_THROWS_AS(b.load_state(dir), std::invalid_argument);
  CHECK_THROWS_AS(b.load_state(dir / "missing"), std::runtime_error);
}

TEST_CASE("early stop at the return threshold") {
  json j = tiny("sac-only");
  j["stop_return"] = -1e9;
  OnlineTrainer tr(config_from_json(j));
  tr.run();
  REQUIRE(tr.threshold_step());
  CHECK(*tr.threshold_step() == 0);
  CHECK(tr.step() == 0);
}

TEST_CASE("theory check report") {
  json j = {{"theory", {{"mdps", 4}, {"eps_m", {0.0, 0.1}}, {"eps_v", {0.0, 1.0}}, {"horizons", {1, 3}}}}};
  const ExperimentConfig c = config_from_json(j);
  std::stringstream out;
  const TheoryResult r = theory_check(c, out);
  CHECK(r.holds);
  CHECK(r.violations == 0);
  int bound = 0, zero_gap = 0, greedy = 0, tv = 0;
  std::string line;
  while (std::getline(out, line)) {
    const json row = json::parse(line);
    const std::string kind = row["kind"];
    if (kind == "lookahead_bound") {
      ++bound;
      if (row["eps_m"] == 0.0 && row["eps_v"] == 0.0) {
        CHECK(row["gap"].get<double>() < 1e-9);
        ++zero_gap;
      }
    }
    greedy += kind == "greedy_bound";
    tv += kind == "trust_region_tv";
  }
  CHECK(bound == 4 * 2 * 2 * 2);
  CHECK(zero_gap == 4 * 2);
  CHECK(greedy == 3 * 2);
  CHECK(tv == 4);
  CHECK(r.rows == bound + greedy + tv);
}

TEST_CASE("offline training") {
  json j = tiny("loop-offline");
  j["dataset"] = {{"behavior", "medium"}, {"size", 400}};
  j["offline"] = {{"learner_steps", 60}, {"bc_weight", 1.0}};
  j["eval_episodes"] = 2;
  const ExperimentConfig c = config_from_json(j);
  CHECK(c.planner.beta == 1.0);
  const ReplayBuffer data = make_dataset(c);
  CHECK(data.size() == 400);

  SUBCASE("one-step planner with a flat weighting reproduces the actor") {
    json k = j;
    k["actor_branch"] = "mean";
    k["planner"] = {{"horizon", 1}, {"iterations", 1}, {"kappa", 1e-9}, {"alpha", 1.0}, {"population", 12},
                    {"particles", 1}, {"lambda_pess", 0.0}};
    MetricsWriter m;
    const OfflineResult r = train_offline(config_from_json(k), data, &m);
    CHECK(r.loop_return == doctest::Approx(r.base_return).epsilon(1e-6));
    REQUIRE(m.records().size() == 1);
    CHECK(m.records()[0]["actor_divergence"].get<double>() < 1e-9);
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(train_offline(c, ReplayBuffer(3, 1, 10), nullptr), std::invalid_argument);
    CHECK_THROWS_AS(train_offline(c, ReplayBuffer(4, 2, 10), nullptr), std::invalid_argument);
    CHECK_THROWS_AS(train_offline(config_from_json(tiny("loop-sac")), data, nullptr), std::invalid_argument);
    CHECK_THROWS_AS(OnlineTrainer{c}, std::invalid_argument);
  }
}
