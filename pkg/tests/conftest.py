import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from hypothesis import strategies as st

from fedflex.objectives import Federation, QuadraticObjective

settings.register_profile(
    "default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


def spd(rng, d, lo=1.0, hi=4.0):
    Q, _ = np.linalg.qr(rng.normal(size=(d, d)))
    return (Q * rng.uniform(lo, hi, size=d)) @ Q.T


def quad(center, scale=1.0, sigma=0.0):
    """``scale/2 ||w - center||^2`` written as ``1/2 w'Aw - b'w + c``."""
    center = np.atleast_1d(np.asarray(center, dtype=float))
    d = center.shape[0]
    A = scale * np.eye(d)
    return QuadraticObjective(A, A @ center, 0.5 * scale * center @ center, sigma)


@pytest.fixture
def two_point_fed():
    """``F_1 = 1/2 (w - 1)^2``, ``F_2 = 1/2 (w + 1)^2`` with equal weights."""
    return Federation([quad([1.0]), quad([-1.0])], [1, 1])


seeds = st.integers(min_value=0, max_value=2**32 - 1)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines.values()):
            terminalreporter.write_line(line)
