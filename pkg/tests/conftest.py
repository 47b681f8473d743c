import numpy as np
import pytest

from fedutr import numeric as nx
from fedutr.datasets import InteractionDataset, SyntheticSpec, generate_synthetic
from fedutr.federation import TrainConfig, run_experiment

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")


@pytest.fixture
def tiny_dataset():
    """Six users over ten items, every user with at least three interactions."""
    per_user = [[0, 1, 2], [1, 3, 4, 5], [2, 6, 7], [0, 5, 8, 9], [3, 4, 9], [1, 2, 6, 7, 8]]
    return InteractionDataset(6, 10, [np.array(p) for p in per_user])


@pytest.fixture(scope="session")
def small_synthetic():
    """Small latent-factor corpus (dataset, corpus, truth) shared by the faster training tests."""
    return generate_synthetic(SyntheticSpec(n=60, m=120, target_avg_interactions=5.0), nx.make_rng(3))


@pytest.fixture
def quick_cfg():
    return TrainConfig(d=8, rounds=3, local_epochs=2, trace_users=5, seed=1)


class SyntheticRuns:
    """Memoised trainings on the default synthetic corpus, keyed by seed and config changes.

    Acceptance criteria and directional checks share runs through this cache,
    so a FedUTR run for seed 0 is trained once per session.
    """

    def __init__(self):
        from fedutr.config import build_config

        self.cfg = build_config({})
        self._data = {}
        self._runs = {}

    def data(self, seed):
        from fedutr.runner import load_data

        if seed not in self._data:
            self._data[seed] = load_data(self.cfg, seed)
        return self._data[seed]

    def train(self, seed, **changes):
        from fedutr.runner import provider_for

        key = (seed, tuple(sorted(changes.items())))
        if key not in self._runs:
            tc = self.cfg.train.replace(seed=seed, **changes)
            dataset, corpus = self.data(seed)
            self._runs[key] = run_experiment(tc, dataset, provider_for(self.cfg, tc.d), corpus)
        return self._runs[key]

    def all_results(self):
        return list(self._runs.items())


@pytest.fixture(scope="session")
def synthetic_runs():
    return SyntheticRuns()
