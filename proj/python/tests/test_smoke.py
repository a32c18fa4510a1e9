import numpy as np
import pytest

import looprl

TINY = {
    "seed": 5,
    "env": {"id": "pendulum", "max_steps": 30},
    "total_steps": 120,
    "seed_steps": 60,
    "eval_interval": 60,
    "eval_episodes": 1,
    "single_thread": True,
    "sac": {"hidden": [8, 8], "batch_size": 16},
    "model": {"members": 2, "hidden": [8], "max_epochs": 2, "max_updates": 5, "retrain_period": 60,
              "batch_size": 16},
    "planner": {"population": 8, "particles": 1, "iterations": 1},
}


def test_bound_and_greedy_special_case():
    assert looprl.lookahead_bound(0.0, 1.0, 1, 0.9) == pytest.approx(18.0, abs=1e-12)
    rows = looprl.verify_bound(1, 6, 3, 0.9, 0.05, 0.5, 2, trials=3)
    assert len(rows) == 3
    assert all(r["holds"] and r["gap"] <= r["bound"] for r in rows)


def test_trust_region_chain():
    rep = looprl.trust_region_tv(0.02, 5)
    assert rep["holds"]
    assert rep["total_tv"] <= rep["bound"]


def test_divergence_and_weights():
    a = np.zeros((2, 4))
    assert looprl.actor_divergence(a, a + np.array([[3.0], [4.0]])) == pytest.approx(5.0)
    w = looprl.importance_weights(np.array([0.0, np.log(2.0)]), 1.0)
    assert w == pytest.approx([1 / 3, 2 / 3])


def test_config_resolution_and_errors():
    cfg = looprl.resolve_config({"mode": "pets-restricted"})
    assert cfg["planner"]["terminal_value"] is False
    with pytest.raises(ValueError):
        looprl.resolve_config({"not_a_key": 1})


def test_online_run_is_deterministic(tmp_path):
    a = looprl.OnlineTrainer(TINY).run()
    b = looprl.OnlineTrainer(TINY).run()
    assert a.history() == b.history()
    assert [r["step"] for r in a.history()] == [0, 60, 120]
    assert a.counters()["planner_calls"] > 0

    c = looprl.OnlineTrainer(TINY).run(until=90)
    c.save(tmp_path / "ckpt")
    d = looprl.OnlineTrainer(TINY)
    d.load(tmp_path / "ckpt")
    assert d.run().history() == a.history()


def test_sac_only_never_plans():
    t = looprl.OnlineTrainer({**TINY, "mode": "sac-only"}).run()
    assert t.counters()["planner_calls"] == 0


def test_theory_check_small_grid():
    holds, rows = looprl.theory_check({"theory": {"mdps": 2, "eps_m": [0.0], "eps_v": [0.5], "horizons": [1, 2]}})
    assert holds
    assert sum(r["kind"] == "lookahead_bound" for r in rows) == 4


def test_offline_roundtrip(tmp_path):
    cfg = {**TINY, "mode": "loop-offline", "dataset": {"size": 200},
           "offline": {"learner_steps": 10}}
    path = tmp_path / "data.bin"
    assert looprl.make_dataset(cfg, path) == 200
    records = looprl.train_offline(cfg, path)
    assert "loop_return" in records[-1] and "base_return" in records[-1]
