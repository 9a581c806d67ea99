import numpy as np
import pytest

from vnspipe.fields import DiscreteVelocityField, MacGrid, extend_field
from vnspipe.geometry import PipeDomain, PoiseuilleFlow


@pytest.fixture(scope="session")
def domain():
    return PipeDomain(1.0)


@pytest.fixture(scope="session")
def grid(domain):
    return MacGrid(domain, 16, 8)


@pytest.fixture(scope="session")
def zero_ext(grid):
    return extend_field(DiscreteVelocityField.zeros(grid))


def poiseuille_ext(u_max, grid=None, lam=1.0):
    grid = grid or MacGrid(PipeDomain(1.0), 16, 8)
    return extend_field(DiscreteVelocityField.poiseuille(grid, PoiseuilleFlow(u_max, lam)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
