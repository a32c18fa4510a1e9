// SPDX-License-Identifier: Apache-2.0
// Python bindings. Structured values cross the boundary as JSON text; the
// looprl package turns them into dicts.

#include <sstream>

#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "loop/arc.hpp"
#include "loop/harness.hpp"
#include "loop/tabular.hpp"

namespace py = pybind11;
using nlohmann::json;
using namespace loop;

namespace {

ExperimentConfig parse_config(const std::string& text) { return config_from_json(json::parse(text)); }

std::string history_text(const std::vector<json>& h) { return json(h).dump(); }

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Lookahead planning with learned models and value functions";

  m.def("resolve_config", [](const std::string& text) { return to_json(parse_config(text)).dump(); },
        py::arg("config_json"));

  m.def(
      "lookahead_bound",
      [](double eps_m, double eps_v, int H, double gamma, double r_max, double v_max) {
        tabular::BoundInputs b;
        b.eps_m = eps_m;
        b.eps_v = eps_v;
        b.H = H;
        b.gamma = gamma;
        b.r_max = r_max;
        b.v_max = v_max;
        return tabular::lookahead_bound(b);
      },
      py::arg("eps_m"), py::arg("eps_v"), py::arg("H"), py::arg("gamma"), py::arg("r_max") = 1.0,
      py::arg("v_max") = 10.0);

  m.def(
      "verify_bound",
      [](std::uint64_t seed, int states, int actions, double gamma, double eps_m, double eps_v, int H, int trials) {
        Rng rng(seed);
        const auto mdp = tabular::TabularMDP::random(states, actions, gamma, rng);
        tabular::BoundInputs b;
        b.eps_m = eps_m;
        b.eps_v = eps_v;
        b.H = H;
        b.gamma = gamma;
        b.v_max = 1.0 / (1.0 - gamma);
        const auto rep = tabular::verify_bound(mdp, b, trials, rng);
        json rows = json::array();
        for (const auto& t : rep.trials) rows.push_back(tabular::to_json(t));
        return rows.dump();
      },
      py::arg("seed"), py::arg("states"), py::arg("actions"), py::arg("gamma"), py::arg("eps_m"), py::arg("eps_v"),
      py::arg("H"), py::arg("trials") = 1);

  m.def("trust_region_tv", [](double kl, int steps) { return tabular::to_json(tabular::trust_region_tv_check(kl, steps)).dump(); },
        py::arg("kl_step"), py::arg("steps"));

  m.def("actor_divergence", &actor_divergence, py::arg("actor_actions"), py::arg("planner_actions"));
  m.def("importance_weights", &importance_weights, py::arg("scores"), py::arg("kappa"));

  m.def(
      "theory_check",
      [](const std::string& text) {
        std::ostringstream out;
        const TheoryResult r = theory_check(parse_config(text), out);
        return py::make_tuple(r.holds, out.str());
      },
      py::arg("config_json"));

  m.def(
      "make_dataset",
      [](const std::string& text, const std::string& path) {
        const ExperimentConfig cfg = parse_config(text);
        const ReplayBuffer data = make_dataset(cfg);
        data.save(path, {{"behavior", cfg.dataset.behavior}, {"seed", cfg.seed}});
        return data.size();
      },
      py::arg("config_json"), py::arg("path"));

  m.def(
      "train_offline",
      [](const std::string& text, const std::string& dataset) {
        const ReplayBuffer data = ReplayBuffer::load(dataset);
        MetricsWriter metrics;
        OfflineResult r;
        {
          py::gil_scoped_release release;
          r = train_offline(parse_config(text), data, &metrics);
        }
        return history_text(metrics.records());
      },
      py::arg("config_json"), py::arg("dataset_path"));

  py::class_<OnlineTrainer>(m, "OnlineTrainer")
      .def(py::init([](const std::string& text) { return new OnlineTrainer(parse_config(text)); }),
           py::arg("config_json"))
      .def("run_until", [](OnlineTrainer& t, long long step) {
             py::gil_scoped_release release;
             t.run_until(step);
           }, py::arg("step"))
      .def("run", [](OnlineTrainer& t) {
             py::gil_scoped_release release;
             t.run();
           })
      .def_property_readonly("step", &OnlineTrainer::step)
      .def_property_readonly("finished", &OnlineTrainer::finished)
      .def_property_readonly("threshold_step", &OnlineTrainer::threshold_step)
      .def_property_readonly("training_cost", &OnlineTrainer::training_cost)
      .def("history_json", [](const OnlineTrainer& t) { return history_text(t.history()); })
      .def("counters_json", [](const OnlineTrainer& t) { return t.counters().to_json().dump(); })
      .def("evaluate", [](OnlineTrainer& t, int episodes, std::uint64_t stream) {
             const EvalResult r = t.evaluate(episodes, stream);
             return py::make_tuple(r.returns, r.costs);
           }, py::arg("episodes"), py::arg("stream") = 0)
      .def("save_state", [](const OnlineTrainer& t, const std::string& dir) { t.save_state(dir); })
      .def("load_state", [](OnlineTrainer& t, const std::string& dir) { t.load_state(dir); });
}
