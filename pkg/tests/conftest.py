import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ldlab.engine import SimConfig

settings.register_profile("ldlab", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("ldlab")

os.environ.setdefault("LDLAB_WORKERS", "1")


@pytest.fixture
def quick():
    """Small, fast simulation settings for structural tests."""
    return SimConfig(time_step_h=2e-3, n_paths=400, batch_count=20, master_seed=7)


@pytest.fixture
def rng():
    return np.random.default_rng(2024)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
