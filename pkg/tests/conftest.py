import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

from cbflab.geometry import SafeSet
from cbflab.system import ControlAffineSystem

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")

DISK = "1 - x1^2 - x2^2"
BALL = "1 - x1^2 - x2^2 - x3^2"
ANNULUS = "0.16 - (sqrt(x1^2 + x2^2) - 1)^2"


@pytest.fixture
def disk():
    return SafeSet(DISK, [(-1.5, 1.5)] * 2, 64, name="disk")


@pytest.fixture
def annulus():
    return SafeSet(ANNULUS, [(-2.5, 2.5)] * 2, 64, name="annulus")


@pytest.fixture
def ball():
    return SafeSet(BALL, [(-1.5, 1.5)] * 3, 32, name="ball")


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def unit_disk_system(input_set=None):
    """x' = x + u in the plane."""
    return ControlAffineSystem(2, 2, ("x1", "x2"), (("1", "0"), ("0", "1")), input_set)


def single_integrator(n=2, input_set=None):
    cols = tuple(tuple("1" if i == j else "0" for i in range(n)) for j in range(n))
    return ControlAffineSystem(n, n, ("0",) * n, cols, input_set)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
