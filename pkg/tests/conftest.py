import re

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "research",
    deadline=None,
    max_examples=40,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("research")


@pytest.fixture
def rng():
    return np.random.default_rng(2749)


_ACCEPTANCE = re.compile(r"test_acceptance\.py::test_c(\d+)")


def pytest_runtest_logreport(report):
    """One visible verdict line per acceptance criterion."""
    if report.when != "call":
        return
    m = _ACCEPTANCE.search(report.nodeid)
    if m:
        verdict = "PASS" if report.passed else "FAIL"
        print(f"\n[ACCEPTANCE] C{m.group(1)}: {verdict}", flush=True)
