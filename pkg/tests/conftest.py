import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from llap import model

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def random_spd(rng, n, cond=10.0):
    Q, _ = np.linalg.qr(rng.normal(size=(n, n)))
    w = np.geomspace(1.0, cond, n)
    return (Q * w) @ Q.T


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def ln_net():
    """Fully normalised 2-hidden-layer net with a dense read-out (3 inputs, 2 outputs)."""
    arch = model.mlp(3, 2, (5, 4), layer_norm=True, bias=True)
    params = model.init_params(arch, np.random.default_rng(7))
    return arch, params


@pytest.fixture
def plain_net():
    arch = model.mlp(3, 2, (5, 4), layer_norm=False, bias=True, activation="tanh")
    params = model.init_params(arch, np.random.default_rng(8))
    return arch, params


_VERDICTS = []


@pytest.fixture
def verdict():
    """Record and print one PASS/FAIL line for an acceptance criterion, then assert on it."""
    def record(number, title, ok, elapsed, budget, detail=""):
        passed = bool(ok) and elapsed < budget
        line = (f"criterion {number:>2} {'PASS' if passed else 'FAIL'}  {title}  "
                f"[{elapsed:.1f}s / {budget:g}s] {detail}").rstrip()
        _VERDICTS.append(line)
        print(line)
        assert ok, line
        assert elapsed < budget, line
    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in _VERDICTS:
            terminalreporter.write_line(line)
