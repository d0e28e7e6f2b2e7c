import sys

import numpy as np
import pytest

from meshatlas.hierarchy import build_hierarchy
from meshatlas.synthdata import generate_cohort


@pytest.fixture(scope="session")
def toy_hierarchy():
    """12/42-vertex hierarchy."""
    return build_hierarchy(num_levels=2)


@pytest.fixture(scope="session")
def hierarchy3():
    """12/42/162-vertex hierarchy."""
    return build_hierarchy(num_levels=3)


@pytest.fixture(scope="session")
def toy_cohort(toy_hierarchy):
    return generate_cohort(toy_hierarchy, 24, seed=3)


@pytest.fixture(scope="session")
def cohort3(hierarchy3):
    return generate_cohort(hierarchy3, 24, seed=5)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "REPORT", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
