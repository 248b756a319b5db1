"""Price tables, technical indicators, stock selection and date splits."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd
from numpy.lib.stride_tricks import sliding_window_view

INDICATORS = ("macd", "sma30", "sma60", "boll", "rsi", "cci", "adx")
CSV_COLUMNS = ["date", "ticker", "open", "high", "low", "close", "volume"]
# window spreads below this fraction of the level are rounding residue, i.e. zero
_SPREAD_TOL = 1e-12


class DataError(ValueError):
    """Bad or inconsistent market data."""


@dataclass(frozen=True)
class PriceTable:
    """Aligned daily OHLCV data; every array is ``(n_days, n_tickers)``."""

    tickers: tuple[str, ...]
    dates: pd.DatetimeIndex
    open: np.ndarray
    high: np.ndarray
    low: np.ndarray
    close: np.ndarray
    volume: np.ndarray
    shares_outstanding: np.ndarray | None = None

    def __post_init__(self):
        n, d = len(self.dates), len(self.tickers)
        for name in ("open", "high", "low", "close", "volume"):
            if getattr(self, name).shape != (n, d):
                raise DataError(f"{name} has shape {getattr(self, name).shape}, expected {(n, d)}")
        if (n > 1 and not self.dates.is_monotonic_increasing) or self.dates.has_duplicates:
            raise DataError("dates must be strictly increasing")
        if np.any(self.close <= 0):
            raise DataError("non-positive close price")

    def __len__(self) -> int:
        return len(self.dates)

    @property
    def n_tickers(self) -> int:
        return len(self.tickers)

    def slice(self, start: int, stop: int) -> "PriceTable":
        so = None if self.shares_outstanding is None else self.shares_outstanding[start:stop]
        return PriceTable(self.tickers, self.dates[start:stop], self.open[start:stop],
                          self.high[start:stop], self.low[start:stop], self.close[start:stop],
                          self.volume[start:stop], so)

    def select(self, tickers) -> "PriceTable":
        idx = [self.tickers.index(t) for t in tickers]
        so = None if self.shares_outstanding is None else self.shares_outstanding[:, idx]
        return PriceTable(tuple(tickers), self.dates, self.open[:, idx], self.high[:, idx],
                          self.low[:, idx], self.close[:, idx], self.volume[:, idx], so)

    def to_frame(self) -> pd.DataFrame:
        n, d = self.close.shape
        frame = pd.DataFrame({
            "date": np.repeat(self.dates.strftime("%Y-%m-%d"), d),
            "ticker": np.tile(self.tickers, n),
            "open": self.open.ravel(), "high": self.high.ravel(), "low": self.low.ravel(),
            "close": self.close.ravel(), "volume": self.volume.ravel(),
        })
        if self.shares_outstanding is not None:
            frame["shares_outstanding"] = self.shares_outstanding.ravel()
        return frame

    def to_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False, float_format="%.10g")


@dataclass(frozen=True)
class DatasetSplit:
    train: range
    val: range
    test: range

    @property
    def sizes(self) -> tuple[int, int, int]:
        return len(self.train), len(self.val), len(self.test)


def load_ohlcv(path, tickers=None, date_range=None) -> PriceTable:
    """Read the long-format CSV (one row per date and ticker) into an aligned table.

    Dates missing for any requested ticker are dropped (inner join).
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such price file: {path}")
    df = pd.read_csv(path)
    df.columns = [c.strip().lower() for c in df.columns]
    missing = [c for c in CSV_COLUMNS if c not in df.columns]
    if missing:
        raise DataError(f"{path}: missing columns {missing}")
    df["date"] = pd.to_datetime(df["date"], format="ISO8601")
    df["ticker"] = df["ticker"].astype(str)
    available = list(dict.fromkeys(df["ticker"]))
    if tickers is None:
        tickers = available
    tickers = [str(t) for t in tickers]
    unknown = [t for t in tickers if t not in available]
    if unknown:
        raise DataError(f"unknown ticker(s): {unknown}")
    df = df[df["ticker"].isin(tickers)]
    if date_range is not None:
        lo, hi = (pd.Timestamp(x) if x is not None else None for x in date_range)
        if lo is not None:
            df = df[df["date"] >= lo]
        if hi is not None:
            df = df[df["date"] <= hi]
    if df.duplicated(["date", "ticker"]).any():
        raise DataError("duplicate (date, ticker) rows")
    if df["close"].isna().any():
        raise DataError("missing close price")
    if (df["close"] <= 0).any():
        raise DataError("non-positive close price")

    fields = ["open", "high", "low", "close", "volume"]
    has_so = "shares_outstanding" in df.columns and df["shares_outstanding"].notna().all()
    if has_so:
        fields.append("shares_outstanding")
    wide = df.pivot(index="date", columns="ticker", values=fields).sort_index()
    wide = wide.dropna(how="any")
    if wide.empty:
        raise DataError("no dates shared by all requested tickers")
    arrays = {f: wide[f][tickers].to_numpy(dtype=float) for f in fields}
    return PriceTable(tuple(tickers), pd.DatetimeIndex(wide.index), arrays["open"], arrays["high"],
                      arrays["low"], arrays["close"], arrays["volume"],
                      arrays.get("shares_outstanding"))


# -- indicators ----------------------------------------------------------------
# All helpers work along axis 0 (time) and broadcast over trailing axes, so the
# same code serves a (T, d) table and a (T, batch, d) stack of rollout windows.

def _ema(x: np.ndarray, span: int) -> np.ndarray:
    a = 2.0 / (span + 1.0)
    out = np.empty_like(x)
    out[0] = x[0]
    for t in range(1, len(x)):
        out[t] = a * x[t] + (1.0 - a) * out[t - 1]
    return out


def _backfill(values: np.ndarray, first: int) -> np.ndarray:
    """Rows before ``first`` take the value at ``first``."""
    if first > 0:
        values[:first] = values[first]
    return values


def _rolling(x: np.ndarray, window: int, fn) -> np.ndarray:
    """Apply ``fn`` over trailing windows; rows 0..window-2 are back-filled.

    Series shorter than ``window`` fall back to an expanding window.
    """
    n = len(x)
    out = np.empty_like(x)
    if n >= window:
        view = sliding_window_view(x, window, axis=0)
        out[window - 1:] = fn(view)
        return _backfill(out, window - 1)
    for t in range(n):
        out[t] = fn(np.moveaxis(x[:t + 1], 0, -1))
    return out


def _sma(x, window):
    return _rolling(x, window, lambda v: v.mean(axis=-1))


def _wilder(x: np.ndarray, period: int, start: int) -> tuple[np.ndarray, int]:
    """Wilder smoothing seeded with the mean of x[start:start+period].

    Returns the smoothed series and the first index where it is defined;
    when the series is too short the seed is the mean of what exists.
    """
    n = len(x)
    out = np.zeros_like(x)
    first = min(start + period - 1, n - 1)
    out[first] = x[start:first + 1].mean(axis=0)
    for t in range(first + 1, n):
        out[t] = (out[t - 1] * (period - 1) + x[t]) / period
    return out, first


def _rsi(close: np.ndarray, period: int = 14) -> np.ndarray:
    n = len(close)
    if n < 2:
        return np.full_like(close, 50.0)
    delta = np.zeros_like(close)
    delta[1:] = np.diff(close, axis=0)
    gain, first = _wilder(np.maximum(delta, 0.0), period, 1)
    loss, _ = _wilder(np.maximum(-delta, 0.0), period, 1)
    with np.errstate(divide="ignore", invalid="ignore"):
        rsi = 100.0 - 100.0 / (1.0 + gain / loss)
    rsi = np.where(loss == 0.0, np.where(gain == 0.0, 50.0, 100.0), rsi)
    return _backfill(rsi, first)


def _boll(close: np.ndarray, window: int = 20) -> np.ndarray:
    def fn(v):
        m = v.mean(axis=-1)
        sd = v.std(axis=-1, ddof=1) if v.shape[-1] > 1 else np.zeros(v.shape[:-1])
        last = v[..., -1]
        with np.errstate(divide="ignore", invalid="ignore"):
            z = (last - m) / (2.0 * sd)
        return np.where(sd > _SPREAD_TOL * np.abs(m), z, 0.0)
    return _rolling(close, window, fn)


def _cci(high, low, close, window: int = 20) -> np.ndarray:
    tp = (high + low + close) / 3.0

    def fn(v):
        m = v.mean(axis=-1)
        md = np.abs(v - m[..., None]).mean(axis=-1)
        with np.errstate(divide="ignore", invalid="ignore"):
            c = (v[..., -1] - m) / (0.015 * md)
        return np.where(md > _SPREAD_TOL * np.abs(m), c, 0.0)
    return _rolling(tp, window, fn)


def _adx(high, low, close, period: int = 14) -> np.ndarray:
    n = len(close)
    if n < 2:
        return np.zeros_like(close)
    tr = np.zeros_like(close)
    pdm = np.zeros_like(close)
    mdm = np.zeros_like(close)
    prev = close[:-1]
    tr[1:] = np.maximum.reduce([high[1:] - low[1:], np.abs(high[1:] - prev), np.abs(low[1:] - prev)])
    up = high[1:] - high[:-1]
    down = low[:-1] - low[1:]
    pdm[1:] = np.where((up > down) & (up > 0), up, 0.0)
    mdm[1:] = np.where((down > up) & (down > 0), down, 0.0)
    str_, first = _wilder(tr, period, 1)
    spdm, _ = _wilder(pdm, period, 1)
    smdm, _ = _wilder(mdm, period, 1)
    with np.errstate(divide="ignore", invalid="ignore"):
        pdi = np.where(str_ > 0, 100.0 * spdm / str_, 0.0)
        mdi = np.where(str_ > 0, 100.0 * smdm / str_, 0.0)
        dx = np.where(pdi + mdi > 0, 100.0 * np.abs(pdi - mdi) / (pdi + mdi), 0.0)
    adx, first_adx = _wilder(dx, period, first)
    return _backfill(adx, first_adx)


def indicator_block(close, high=None, low=None) -> np.ndarray:
    """Seven indicators for arrays shaped (T, ...); result is (T, ..., 7).

    Order: MACD, SMA30, SMA60, BOLL, RSI, CCI, ADX. Missing high/low fall back
    to the close.
    """
    close = np.asarray(close, dtype=float)
    high = close if high is None else np.asarray(high, dtype=float)
    low = close if low is None else np.asarray(low, dtype=float)
    macd = _ema(close, 12) - _ema(close, 26)
    cols = [macd, _sma(close, 30), _sma(close, 60), _boll(close), _rsi(close),
            _cci(high, low, close), _adx(high, low, close)]
    return np.stack(cols, axis=-1)


@dataclass(frozen=True)
class IndicatorTable:
    tickers: tuple[str, ...]
    dates: pd.DatetimeIndex
    values: np.ndarray  # (n_days, n_tickers, 7)

    def to_frame(self) -> pd.DataFrame:
        n, d, _ = self.values.shape
        frame = pd.DataFrame(self.values.reshape(n * d, 7), columns=list(INDICATORS))
        frame.insert(0, "ticker", np.tile(self.tickers, n))
        frame.insert(0, "date", np.repeat(self.dates.strftime("%Y-%m-%d"), d))
        return frame


def compute_indicators(prices: PriceTable) -> IndicatorTable:
    if len(prices) < 1:
        raise DataError("need at least one row")
    vals = indicator_block(prices.close, prices.high, prices.low)
    return IndicatorTable(prices.tickers, prices.dates, vals)


def rank_by_turnover(prices: PriceTable, window_days: int) -> list[tuple[str, float]]:
    """Tickers sorted by mean turnover over the last ``window_days`` (ascending).

    Turnover is volume / shares outstanding. Without share counts each ticker's
    volume is divided by its own maximum volume in the window.
    """
    if window_days < 1 or window_days > len(prices):
        raise DataError(f"window of {window_days} days exceeds {len(prices)} rows of history")
    vol = prices.volume[-window_days:]
    if prices.shares_outstanding is not None:
        ratio = vol / prices.shares_outstanding[-window_days:]
    else:
        peak = vol.max(axis=0)
        ratio = np.divide(vol, peak, out=np.zeros_like(vol), where=peak > 0)
    score = ratio.mean(axis=0)
    order = np.argsort(score, kind="stable")
    return [(prices.tickers[i], float(score[i])) for i in order]


def split_dataset(prices: PriceTable, train_end, val_end) -> DatasetSplit:
    """Contiguous split: train = dates <= train_end, val = (train_end, val_end], test = rest."""
    train_end, val_end = pd.Timestamp(train_end), pd.Timestamp(val_end)
    if not train_end < val_end:
        raise DataError("train_end must precede val_end")
    dates = prices.dates
    if train_end < dates[0] or val_end >= dates[-1]:
        raise DataError("split boundaries fall outside the data range")
    a = int(np.searchsorted(dates.values, train_end.to_datetime64(), side="right"))
    b = int(np.searchsorted(dates.values, val_end.to_datetime64(), side="right"))
    if a == 0 or b == a or b == len(dates):
        raise DataError("a split range would be empty")
    return DatasetSplit(range(0, a), range(a, b), range(b, len(dates)))
