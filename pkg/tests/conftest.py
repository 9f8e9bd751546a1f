import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from levyobstacle import OperatorSpec, ProcessSpec, vg_model

settings.register_profile("ci", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("ci")

# one line per acceptance criterion, filled by tests/test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[key])


@pytest.fixture(scope="session")
def vg():
    """Variance gamma model calibrated to r = 0.05."""
    return vg_model(0.3, 0.2, -0.1).calibrated(0.05)


@pytest.fixture(scope="session")
def vg_op(vg):
    return OperatorSpec.from_model(vg)


@pytest.fixture(scope="session")
def vg_proc(vg):
    return ProcessSpec.from_model(vg)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
