import numpy as np
import pytest

from pattc.simulation import SimParams, generate_study

# Filled by tests/test_acceptance.py; printed once at the end of the session.
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])


def study(seed=0, **params):
    """RCT and observational Datasets from the simulation generator."""
    rct, obs, _ = generate_study(SimParams(seed=seed, **params))
    return rct.to_dataset(), obs.to_dataset()


@pytest.fixture(scope="session")
def default_study():
    return study(seed=101)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
