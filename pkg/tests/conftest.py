import numpy as np
import pytest

from ucnnpred.features import AuxSeries, RawSeries, required_sources
from ucnnpred.synthetic import business_days


def random_walk(rng, n, start=100.0, vol=0.01):
    return start * np.exp(np.cumsum(rng.normal(0.0, vol, n)))


def make_raw(n=500, seed=0, drop=0.05):
    """Random-walk instrument with every auxiliary source, each missing a few days."""
    rng = np.random.default_rng(seed)
    dates = business_days(n)
    aux = {}
    for name in required_sources():
        keep = rng.random(n) > drop
        keep[0] = True
        aux[name] = AuxSeries(name, dates[keep], random_walk(rng, n, start=1.0 + 50 * rng.random())[keep])
    return RawSeries("RW", dates, random_walk(rng, n), np.round(rng.uniform(1e5, 1e6, n)), aux)


@pytest.fixture
def raw500():
    return make_raw(500, seed=42)


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES = {}


def record(criterion, passed, detail):
    ACCEPTANCE_LINES[criterion] = f"criterion {criterion:>2}: {'PASS' if passed else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
