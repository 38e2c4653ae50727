import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from lemonade.data import gen_synthetic, split
from lemonade.graph import init_trivial_population
from lemonade.objectives import TrainSchedule, train_network

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def small_data():
    """Small synthetic train/validation pair (500 / 100 examples)."""
    return split(gen_synthetic(600, seed=3), 1 / 6, seed=3)


@pytest.fixture(scope="session")
def trained_net(small_data):
    """The plain 8-16-32 trivial net after three epochs on ``small_data``."""
    train, _ = small_data
    graph, weights = init_trivial_population("ss1", seed=1)[2]
    trained, _ = train_network(graph, weights, train, TrainSchedule(epochs=3, seed=1))
    return graph, trained


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_cfg():
    from lemonade.config import DatasetConfig, SearchConfig
    return SearchConfig(n_gen=2, n_pc=4, n_ac=2, seed=1, schedule=TrainSchedule(epochs=1),
                        dataset=DatasetConfig(num_examples=480), check_front=True)


@pytest.fixture(scope="session")
def tiny_data(tiny_cfg):
    from lemonade.search import load_data
    return load_data(tiny_cfg)


@pytest.fixture(scope="session")
def tiny_run(tiny_cfg, tiny_data):
    """A finished two-generation search on the tiny configuration."""
    from lemonade.search import run_search
    return run_search(tiny_cfg, tiny_data)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        ok, detail = mod.RESULTS[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
