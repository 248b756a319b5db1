"""Backtest statistics of a daily equity curve.

Returns are simple daily returns, the year has 252 trading days and the
risk-free rate is zero. Ratios whose denominator is zero are reported as
undefined (``None``) instead of infinity.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass

import numpy as np

TRADING_DAYS = 252
UNDEFINED = "undefined"

# display names in report order
COLUMNS = {
    "annualized_return": "Annualized Return",
    "cumulative_return": "Cumulative Return",
    "annualized_volatility": "Annualized Volatility",
    "sharpe": "Sharpe Ratio",
    "calmar": "Calmar Ratio",
    "stability": "Stability",
    "max_drawdown": "Maximum Drawdown",
}


@dataclass(frozen=True)
class MetricsReport:
    annualized_return: float
    cumulative_return: float
    annualized_volatility: float
    sharpe: float | None
    calmar: float | None
    stability: float | None
    max_drawdown: float

    def to_dict(self) -> dict:
        return {k: (UNDEFINED if v is None else v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, raw: dict) -> "MetricsReport":
        return cls(**{k: (None if raw[k] in (None, UNDEFINED) else float(raw[k])) for k in COLUMNS})


def max_drawdown(curve) -> float:
    curve = np.asarray(curve, dtype=float)
    return float(np.min(curve / np.maximum.accumulate(curve) - 1.0))


def stability(curve) -> float | None:
    """R^2 of an OLS line through log(curve / curve[0]) against day number."""
    curve = np.asarray(curve, dtype=float)
    if curve.size - 1 < 3:
        return None
    y = np.log(curve / curve[0])
    t = np.arange(curve.size, dtype=float)
    tc, yc = t - t.mean(), y - y.mean()
    syy = yc @ yc
    if syy == 0.0:
        return None
    return float((tc @ yc) ** 2 / ((tc @ tc) * syy))


def compute_metrics(curve, days_per_year: int = TRADING_DAYS) -> MetricsReport:
    curve = np.asarray(curve, dtype=float)
    if curve.ndim != 1 or curve.size < 2:
        raise ValueError("an equity curve needs at least two values")
    if np.any(~np.isfinite(curve)) or np.any(curve <= 0):
        raise ValueError("equity values must be finite and positive")
    rets = curve[1:] / curve[:-1] - 1.0
    n = rets.size
    cum = curve[-1] / curve[0] - 1.0
    ann = (1.0 + cum) ** (days_per_year / n) - 1.0
    vol = float(np.std(rets, ddof=1) * np.sqrt(days_per_year)) if n > 1 else 0.0
    mdd = max_drawdown(curve)
    return MetricsReport(
        annualized_return=float(ann),
        cumulative_return=float(cum),
        annualized_volatility=vol,
        sharpe=float(ann / vol) if vol > 0 else None,
        calmar=float(ann / abs(mdd)) if mdd < 0 else None,
        stability=stability(curve),
        max_drawdown=mdd,
    )


def read_equity(path) -> np.ndarray:
    """Read ``date,asset`` CSV into an array of asset values."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or "asset" not in rows[0]:
        raise ValueError(f"{path}: expected a 'date,asset' CSV")
    return np.array([float(r["asset"]) for r in rows])


def write_report(report: MetricsReport, json_path, csv_path=None) -> None:
    d = report.to_dict()
    with open(json_path, "w") as fh:
        json.dump(d, fh, indent=2)
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(COLUMNS.values())
            w.writerow([d[k] if d[k] == UNDEFINED else repr(d[k]) for k in COLUMNS])
