import numpy as np
import pytest

from nvecho.ensemble import CouplingDistribution, EnsembleConfig, discretize_ensemble
from nvecho.spectroscopy import CavityParams


@pytest.fixture
def cavity():
    return CavityParams.from_q()


@pytest.fixture
def small_ensemble():
    """Coarse default-like ensemble, cheap enough for unit tests."""
    cfg = EnsembleConfig(coupling=CouplingDistribution.lognormal(1.0, 0.3))
    return discretize_ensemble(cfg, 0.648, n_freq=200, n_g=2)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture
def acceptance(pytestconfig):
    """report(n, ok, detail) records one criterion line for the terminal summary."""
    lines = pytestconfig.stash.setdefault(ACCEPTANCE, {})

    def report(n: int, ok: bool, detail: str):
        line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines[n] = line
        print(line)
        return ok

    return report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
