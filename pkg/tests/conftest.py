from __future__ import annotations

import sys

import numpy as np
import pytest

from stablepolymer.rng import stream
from stablepolymer.stable_process import StableParams, build_density_grid


@pytest.fixture(scope="session")
def gauss():
    return build_density_grid(StableParams(2.0, 1.0))


@pytest.fixture(scope="session")
def grid15():
    return build_density_grid(StableParams(1.5, 1.0))


@pytest.fixture
def rng():
    return stream(12345, 9, 0)


def within_sigma(est, exact, se, k=3.0):
    return abs(est - exact) <= k * se


def mc(x):
    x = np.asarray(x, dtype=float)
    return float(x.mean()), float(x.std(ddof=1) / np.sqrt(len(x)))


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "LINES", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
