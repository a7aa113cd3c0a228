import numpy as np
import pytest

from manifold_lab.distribution import ManifoldSpec
from manifold_lab.objective import PopulationProxy

# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE_LINES: dict = {}


@pytest.fixture(scope="session")
def anchor_spec():
    """l=2, k=0.5, d=g=1, off means +-1, sigma_off=0.05, balanced prior."""
    return ManifoldSpec(1, 1, 2.0, 0.5, (1.0,), (-1.0,), 0.05, 0.5)


@pytest.fixture(scope="session")
def anchor_proxy(anchor_spec):
    return PopulationProxy.build(anchor_spec, 200_000, seed=0)


@pytest.fixture(scope="session")
def spec6():
    """d = g = 3 geometry for derivative checks."""
    return ManifoldSpec(3, 3, 2.0, 0.5, (0.6, 0.4, 0.5), (-0.6, -0.4, -0.5), 0.1, 0.5)


@pytest.fixture(scope="session")
def proxy6(spec6):
    return PopulationProxy.build(spec6, 5_000, seed=2)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[key])
