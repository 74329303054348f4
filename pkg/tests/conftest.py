import numpy as np
import pytest

from gatenet import sim
from gatenet.models import get_model

# one "[PASS|FAIL] criterion ...: detail" line per acceptance criterion,
# echoed after the run (the terminal summary escapes output capture)
CRITERION_LINES = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if CRITERION_LINES:
        terminalreporter.section("acceptance criteria")
        for line in CRITERION_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def hh_model():
    return get_model("hh1952")


@pytest.fixture(scope="session")
def tnnp_model():
    return get_model("tnnp2004")


@pytest.fixture(scope="session")
def hh_dataset(hh_model):
    """Three short squid-axon segments; fast fixture for training plumbing."""
    return sim.generate_dataset(
        hh_model, [300.0, 400.0, 500.0], seed=7,
        total_ms=1500.0, discard_ms=500.0,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(0)
