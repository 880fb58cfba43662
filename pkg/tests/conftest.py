import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from hypothesis import strategies as st

from aacrc.loss import StepLoss

settings.register_profile("default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# acceptance outcomes, printed once at the end of the session
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])


@st.composite
def step_losses(draw, max_k=6, lo=-5.0, hi=5.0):
    """Random valid StepLoss with up to ``max_k`` breakpoints."""
    k = draw(st.integers(0, max_k))
    bps = draw(st.lists(st.floats(lo, hi, allow_nan=False), min_size=k, max_size=k, unique=True))
    vals = draw(st.lists(st.floats(0.0, 1.0, allow_nan=False), min_size=k + 1, max_size=k + 1))
    return StepLoss(sorted(bps), sorted(vals))


def random_step_loss(rng, max_k=6, scale=5.0) -> StepLoss:
    k = int(rng.integers(0, max_k + 1))
    bps = np.sort(rng.uniform(-scale, scale, size=k))
    vals = np.sort(rng.uniform(0, 1, size=k + 1))
    return StepLoss(bps, vals)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
