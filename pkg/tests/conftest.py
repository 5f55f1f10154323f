import numpy as np
import pytest

from nhmm.data import WindowBatch
from nhmm.model import NhmmModel


def random_batch(rng, B, W, h, E=0, ids=None):
    return WindowBatch(
        past_y=rng.normal(size=(B, W)),
        future_y=rng.normal(size=(B, h)),
        past_w=rng.normal(size=(B, W, E)) if E else None,
        series_ids=np.array(ids or [f"s{i}" for i in range(B)], dtype=object),
        origins=np.zeros(B, dtype=np.int64),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_model():
    return NhmmModel(n_states=2, horizon=3, lookback=6, n_signals=1, hidden=(8,), seed=7)


@pytest.fixture
def small_batch(rng):
    return random_batch(rng, B=5, W=6, h=3, E=1)


# one verdict line per acceptance criterion, printed after the run
ACCEPTANCE: dict[str, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: int(k.split()[0])):
        terminalreporter.write_line(ACCEPTANCE[key])
