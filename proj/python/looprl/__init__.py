"""Lookahead planning with learned models and value functions."""

import json

from . import _core

__all__ = [
    "OnlineTrainer",
    "actor_divergence",
    "importance_weights",
    "make_dataset",
    "resolve_config",
    "lookahead_bound",
    "theory_check",
    "train_offline",
    "trust_region_tv",
    "verify_bound",
]

actor_divergence = _core.actor_divergence
importance_weights = _core.importance_weights
lookahead_bound = _core.lookahead_bound


def _text(config):
    return config if isinstance(config, str) else json.dumps(config or {})


def resolve_config(config=None):
    return json.loads(_core.resolve_config(_text(config)))


def verify_bound(seed, states, actions, gamma, eps_m, eps_v, H, trials=1):
    return json.loads(_core.verify_bound(seed, states, actions, gamma, eps_m, eps_v, H, trials))


def trust_region_tv(kl_step, steps):
    return json.loads(_core.trust_region_tv(kl_step, steps))


def theory_check(config=None):
    holds, text = _core.theory_check(_text(config))
    return holds, [json.loads(line) for line in text.splitlines() if line]


def make_dataset(config, path):
    return _core.make_dataset(_text(config), str(path))


def train_offline(config, dataset_path):
    return json.loads(_core.train_offline(_text(config), str(dataset_path)))


class OnlineTrainer:
    def __init__(self, config=None):
        self._t = _core.OnlineTrainer(_text(config))

    def run(self, until=None):
        if until is None:
            self._t.run()
        else:
            self._t.run_until(until)
        return self

    @property
    def step(self):
        return self._t.step

    @property
    def threshold_step(self):
        return self._t.threshold_step

    @property
    def training_cost(self):
        return self._t.training_cost

    def history(self):
        return json.loads(self._t.history_json())

    def counters(self):
        return json.loads(self._t.counters_json())

    def evaluate(self, episodes, stream=0):
        return self._t.evaluate(episodes, stream)

    def save(self, directory):
        self._t.save_state(str(directory))

    def load(self, directory):
        self._t.load_state(str(directory))
