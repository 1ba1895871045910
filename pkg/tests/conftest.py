import numpy as np
import pytest

from selbias.ratings import RatingEvent, sufficient_stats

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in ACCEPTANCE_LINES:
        terminalreporter.write_line(line)


def random_stats(rng, k=None, n_max=50):
    """ItemStats built from a random event list with every item rated at least once."""
    k = int(rng.integers(1, 11)) if k is None else k
    counts = rng.integers(1, n_max + 1, size=k)
    events = []
    for item, c in enumerate(counts):
        mean = rng.uniform(1, 5)
        for y in np.clip(rng.normal(mean, 1.0, size=c), 0.5, 5.0):
            events.append(RatingEvent(0, item, float(y)))
    return sufficient_stats(events)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
