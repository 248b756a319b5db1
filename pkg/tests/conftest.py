import sys

import numpy as np
import pytest

from mbnf.data import split_dataset
from mbnf.loop import MarketData
from mbnf.synthetic import synthetic_market


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_market():
    """300-day, 2-stock synthetic market split 200/50/50."""
    prices = synthetic_market(300, 2, seed=3)
    split = split_dataset(prices, prices.dates[199], prices.dates[249])
    return MarketData.build(prices, split)


def write_long_csv(path, rows, shares=False):
    cols = "date,ticker,open,high,low,close,volume" + (",shares_outstanding" if shares else "")
    with open(path, "w") as fh:
        fh.write(cols + "\n")
        for r in rows:
            fh.write(",".join(str(v) for v in r) + "\n")
    return path


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for num in sorted(results):
            terminalreporter.write_line(results[num])
