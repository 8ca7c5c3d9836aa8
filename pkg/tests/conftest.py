import numpy as np
import pytest

from pskd.nn import MLP

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def random_simplex(rng, K, size=None, concentration=1.0):
    shape = (K,) if size is None else (size, K)
    return rng.dirichlet(np.full(K, concentration), size=size).reshape(shape)


def random_net(rng, max_layers=3, max_units=16, n_in=None, n_out=None):
    n_layers = int(rng.integers(1, max_layers + 1))
    dims = [int(rng.integers(1, max_units + 1)) if n_in is None else n_in]
    dims += [int(rng.integers(2, max_units + 1)) for _ in range(n_layers - 1)]
    dims += [int(rng.integers(2, 6)) if n_out is None else n_out]
    # fan-in scaling keeps probabilities above the cross-entropy clamp
    weights = [rng.normal(0, 1.5 / np.sqrt(a), size=(a, b)) for a, b in zip(dims[:-1], dims[1:])]
    biases = [rng.normal(0, 0.3, size=b) for b in dims[1:]]
    return MLP(weights, biases)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
