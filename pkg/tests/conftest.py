import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from bayeslv.market_data import MarketParams

settings.register_profile(
    "default", max_examples=50, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.register_profile("ci", max_examples=200, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

# Acceptance lines collected by tests/test_acceptance.py, printed at session end.
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def market():
    return MarketParams(spot=100.0, rate=0.05, dividend=0.02, t_max=1.5, k_min=60.0, k_max=160.0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
