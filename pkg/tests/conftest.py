from __future__ import annotations

import os

import pytest
from hypothesis import HealthCheck, settings

from dramspy.config import KIB, MIB, ModelParams
from dramspy.dram import build_cell_array

settings.register_profile(
    "default",
    deadline=None,
    max_examples=int(os.environ.get("HYPOTHESIS_MAX_EXAMPLES", "60")),
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")

# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
        terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def noiseless():
    return ModelParams(noise_sigma=0.0)


@pytest.fixture(scope="session")
def small_array():
    return build_cell_array(11, 64 * KIB)


@pytest.fixture(scope="session")
def small_noiseless(noiseless):
    return build_cell_array(11, 64 * KIB, noiseless)


@pytest.fixture(scope="session")
def array_1mib():
    return build_cell_array(1, MIB)


@pytest.fixture(scope="session")
def array_1mib_noiseless(noiseless):
    return build_cell_array(1, MIB, noiseless)


@pytest.fixture(scope="session")
def array_2mib():
    return build_cell_array(1, 2 * MIB)
