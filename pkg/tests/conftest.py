import numpy as np
import pytest

from endocaver.tensor import Tensor, precision


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def f64():
    with precision(np.float64):
        yield


def leaf(arr) -> Tensor:
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=True)


def weighted_sum(out: Tensor, seed: int = 7) -> Tensor:
    """Scalar probe ``sum(out * r)`` with a fixed random ``r``; avoids symmetric cancellations."""
    r = np.random.default_rng(seed).standard_normal(out.shape)
    return (out * Tensor(r)).sum()


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.RESULTS, key=lambda l: int(l.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
