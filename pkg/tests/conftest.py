import numpy as np
import pytest

from dnnmut import cli, nn_core
from dnnmut.config import load_config
from dnnmut.data import generate_synthetic
from dnnmut.mutation_engine import generate_pool
from dnnmut.nn_core import TrainingSpec

ACCEPTANCE_RESULTS = []


class Reference:
    """The reference campaign built from the default configuration."""

    def __init__(self):
        self.cfg = load_config()
        self.data = cli.build_dataset(self.cfg)
        self.spec = cli.training_spec(self.cfg)
        self.net = nn_core.train(self.spec, self.data)
        self.op_mix = cli.op_mix(self.cfg)
        m = self.cfg["mutation"]
        self.pool, self.stats = generate_pool(self.net, self.data, self.op_mix, m["count"], m["quality_ratio"],
                                              m["gate_split"], base_seed=m["base_seed"],
                                              max_attempts=m["max_attempts"])


@pytest.fixture(scope="session")
def reference():
    return Reference()


@pytest.fixture(scope="session")
def moons():
    return generate_synthetic("two_moons", 400, 0.15, 1)


@pytest.fixture(scope="session")
def moons_net(moons):
    return nn_core.train(TrainingSpec(hidden_sizes=(8,), activations=("tanh",)), moons)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def record_criterion():
    def record(number, name, passed, detail=""):
        ACCEPTANCE_RESULTS.append((number, name, passed, detail))
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, name, passed, detail in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {number}. {name}: {detail}")
