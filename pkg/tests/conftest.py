from __future__ import annotations

import numpy as np
import pytest

from sociallight.netmodel import build_grid_network


@pytest.fixture(scope="session")
def grid3():
    return build_grid_network(3, 3)


@pytest.fixture(scope="session")
def grid2():
    return build_grid_network(2, 2)


@pytest.fixture(scope="session")
def grid1():
    return build_grid_network(1, 1)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
