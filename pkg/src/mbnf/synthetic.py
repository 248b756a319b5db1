"""Trading calendar and seeded synthetic markets for experiments and tests."""

from __future__ import annotations

import numpy as np
import pandas as pd
from pandas.tseries.holiday import (
    AbstractHolidayCalendar,
    GoodFriday,
    Holiday,
    USLaborDay,
    USMartinLutherKingJr,
    USMemorialDay,
    USPresidentsDay,
    USThanksgivingDay,
    nearest_workday,
    sunday_to_monday,
)
from pandas.tseries.offsets import CustomBusinessDay

from .data import PriceTable
from .stable import StableParams, stable_sample

# one-off exchange closures (weather, national days of mourning)
_SPECIAL_CLOSURES = ["2001-09-11", "2001-09-12", "2001-09-13", "2001-09-14", "2004-06-11",
                     "2007-01-02", "2012-10-29", "2012-10-30", "2018-12-05"]


class ExchangeCalendar(AbstractHolidayCalendar):
    """Approximate NYSE full-day holidays."""

    rules = [
        Holiday("NewYearsDay", month=1, day=1, observance=sunday_to_monday),
        USMartinLutherKingJr,
        USPresidentsDay,
        GoodFriday,
        USMemorialDay,
        Holiday("Juneteenth", month=6, day=19, start_date="2022-01-01", observance=nearest_workday),
        Holiday("IndependenceDay", month=7, day=4, observance=nearest_workday),
        USLaborDay,
        USThanksgivingDay,
        Holiday("Christmas", month=12, day=25, observance=nearest_workday),
    ]


def trading_days(start, end) -> pd.DatetimeIndex:
    """Exchange trading days in [start, end]."""
    cal = ExchangeCalendar()
    holidays = list(cal.holidays(pd.Timestamp(start) - pd.Timedelta(days=7),
                                 pd.Timestamp(end) + pd.Timedelta(days=7)))
    holidays += [pd.Timestamp(d) for d in _SPECIAL_CLOSURES]
    return pd.date_range(start, end, freq=CustomBusinessDay(holidays=holidays))


def synthetic_market(n_days: int = 1000, n_stocks: int = 3, seed: int = 0, *,
                     start="2011-01-04", price0=100.0, drift=0.08, reversion=0.05,
                     noise_alpha=1.7, noise_scale=0.6, common=0.5,
                     tickers=None) -> PriceTable:
    """Trend-stationary prices: a linear trend plus an OU-like deviation.

    ``close_t = level_t + x_t`` with ``level_t = price0 + drift * t`` and
    ``x_{t+1} = (1 - reversion) * x_t + eps_t``, where ``eps`` is symmetric
    alpha-stable noise sharing a ``common`` factor across stocks. Daily deltas
    are therefore stationary and heavy-tailed with mean ``drift``.
    """
    rng = np.random.default_rng(seed)
    dates = trading_days(start, pd.Timestamp(start) + pd.Timedelta(days=int(n_days * 1.6) + 30))[:n_days]
    if len(dates) < n_days:
        raise ValueError("calendar too short")
    noise = StableParams(noise_alpha, 0.0, 0.0, noise_scale)
    shared = stable_sample(noise, n_days, rng)
    own = stable_sample(noise, n_days * n_stocks, rng).reshape(n_days, n_stocks)
    eps = common * shared[:, None] + np.sqrt(1.0 - common ** 2) * own
    price0 = np.broadcast_to(np.asarray(price0, dtype=float), (n_stocks,))
    drift = np.broadcast_to(np.asarray(drift, dtype=float), (n_stocks,))
    x = np.zeros((n_days, n_stocks))
    for t in range(1, n_days):
        x[t] = (1.0 - reversion) * x[t - 1] + eps[t]
    level = price0 + drift * np.arange(n_days)[:, None]
    close = np.maximum(level + x, 1.0)
    spread = np.abs(rng.normal(0.0, 0.4 * noise_scale, size=(2, n_days, n_stocks)))
    opn = np.vstack([close[:1], close[:-1]])
    high = np.maximum(close, opn) + spread[0]
    low = np.maximum(np.minimum(close, opn) - spread[1], 0.5)
    volume = np.round(rng.lognormal(13.0, 0.3, size=(n_days, n_stocks)))
    shares = np.tile(rng.uniform(1e8, 5e8, size=n_stocks), (n_days, 1)).round()
    tickers = tuple(tickers) if tickers else tuple(f"S{i}" for i in range(n_stocks))
    return PriceTable(tickers, dates, opn, high, low, close, volume, shares)
