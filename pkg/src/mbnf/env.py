"""Portfolio trading MDP over integer share holdings.

State is (cash, prices, holdings, indicators). An action asks to trade up to
``h_max`` shares per stock. Sells run first and are clamped to the holdings;
buys then run greedily in stock order, each clamped to what the remaining cash
can pay for including its own transaction cost. The reward is the change in
net asset value, so the cost shows up in it exactly once (through the cash).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

H_MAX = 100
DEFAULT_B0 = 1e6
DEFAULT_COST = 0.001
N_INDICATORS = 7


def obs_dim(n_stocks: int, indicators: bool = True) -> int:
    return 1 + 2 * n_stocks + (N_INDICATORS * n_stocks if indicators else 0)


@dataclass(frozen=True)
class EnvState:
    balance: float
    prices: np.ndarray
    holdings: np.ndarray
    indicators: np.ndarray  # (d, 7)
    t: int = 0

    @property
    def n_stocks(self) -> int:
        return self.prices.shape[0]

    @property
    def asset(self) -> float:
        return float(self.balance + self.prices @ self.holdings)

    def observation(self, indicators: bool = True) -> np.ndarray:
        """Flat ``[B, P_1..P_d, W_1..W_d, I_1(7), ..., I_d(7)]``."""
        parts = [[self.balance], self.prices, self.holdings.astype(float)]
        if indicators:
            parts.append(np.asarray(self.indicators, dtype=float).ravel())
        return np.concatenate(parts)


@dataclass(frozen=True)
class StepResult:
    next_state: EnvState
    reward: float
    executed: np.ndarray
    cost: float


def action_scale(raw, h_max: int = H_MAX) -> np.ndarray:
    """Map raw actions in [-1, 1] to integer share counts, rounding toward zero."""
    return np.trunc(np.clip(np.asarray(raw, dtype=float), -1.0, 1.0) * h_max).astype(np.int64)


def execute(balance, prices, holdings, action, cost_pct: float):
    """Apply share orders to (possibly batched) portfolios.

    Shapes: ``balance (...)``, ``prices/holdings/action (..., d)``. Returns
    ``(balance', holdings', executed, cost)`` with float holdings that hold
    integer values.
    """
    cash = np.array(balance, dtype=float, copy=True)
    prices = np.asarray(prices, dtype=float)
    held = np.array(holdings, dtype=float, copy=True)
    action = np.asarray(action, dtype=float)
    executed = np.zeros(np.broadcast_shapes(held.shape, action.shape))
    cost = np.zeros_like(cash)
    sell = np.minimum(np.maximum(-action, 0.0), held)
    for i in range(prices.shape[-1]):
        p = prices[..., i]
        gross = p * sell[..., i]
        fee = gross * cost_pct
        cash = cash + gross - fee
        cost = cost + fee
        held[..., i] -= sell[..., i]
        executed[..., i] -= sell[..., i]
    buy_req = np.maximum(action, 0.0)
    for i in range(prices.shape[-1]):
        p = prices[..., i]
        unit = p * (1.0 + cost_pct)
        n = np.minimum(buy_req[..., i], np.floor(cash / unit))
        # floor of a rounded quotient can overshoot by one share
        n = np.where(n * p + n * p * cost_pct > cash, n - 1.0, n)
        n = np.maximum(n, 0.0)
        gross = n * p
        fee = gross * cost_pct
        cash = cash - gross - fee
        cost = cost + fee
        held[..., i] += n
        executed[..., i] += n
    return cash, held, executed, cost


def reset(prices, indicators, t0: int, B0: float = DEFAULT_B0) -> EnvState:
    """Fresh all-cash state at day ``t0``. ``prices`` is (T, d), ``indicators`` (T, d, 7)."""
    prices = np.asarray(prices, dtype=float)
    if not 0 <= t0 < prices.shape[0] - 1:
        raise IndexError(f"t0={t0} leaves no next day in a table of {prices.shape[0]} rows")
    ind = np.asarray(indicators, dtype=float)[t0]
    return EnvState(float(B0), prices[t0].copy(), np.zeros(prices.shape[1], dtype=np.int64),
                    ind.copy(), t0)


def step(state: EnvState, action, next_prices, next_indicators,
         cost_percentage: float = DEFAULT_COST) -> StepResult:
    next_prices = np.asarray(next_prices, dtype=float)
    if np.any(next_prices <= 0):
        raise ValueError("next prices must be positive")
    cash, held, executed, cost = execute(state.balance, state.prices, state.holdings,
                                         np.asarray(action), cost_percentage)
    nxt = EnvState(float(cash), next_prices.copy(), held.astype(np.int64),
                   np.asarray(next_indicators, dtype=float).reshape(state.n_stocks, N_INDICATORS),
                   state.t + 1)
    reward = nxt.asset - state.asset
    return StepResult(nxt, float(reward), executed.astype(np.int64), float(cost))


class TradingEnv:
    """Steps a portfolio through a fixed price/indicator table."""

    def __init__(self, prices, indicators, B0: float = DEFAULT_B0,
                 cost_percentage: float = DEFAULT_COST, h_max: int = H_MAX):
        self.prices = np.asarray(prices, dtype=float)
        self.indicators = np.asarray(indicators, dtype=float)
        if self.indicators.shape != (*self.prices.shape, N_INDICATORS):
            raise ValueError("indicator table must be (T, d, 7)")
        self.B0 = float(B0)
        self.cost_percentage = float(cost_percentage)
        self.h_max = int(h_max)

    @property
    def n_days(self) -> int:
        return self.prices.shape[0]

    @property
    def n_stocks(self) -> int:
        return self.prices.shape[1]

    def reset(self, t0: int = 0) -> EnvState:
        return reset(self.prices, self.indicators, t0, self.B0)

    def step(self, state: EnvState, shares) -> StepResult:
        t = state.t + 1
        if t >= self.n_days:
            raise IndexError("episode already at the last day")
        return step(state, shares, self.prices[t], self.indicators[t], self.cost_percentage)

    def done(self, state: EnvState) -> bool:
        return state.t >= self.n_days - 1


def write_trace(path, rows) -> None:
    """Episode trace CSV ``t,B,asset,reward,action_1..action_d``.

    ``rows`` holds ``(t, balance, asset, reward, shares)`` tuples.
    """
    rows = list(rows)
    d = len(rows[0][4]) if rows else 0
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "B", "asset", "reward"] + [f"action_{i + 1}" for i in range(d)])
        for t, b, asset, r, a in rows:
            w.writerow([t, repr(float(b)), repr(float(asset)), repr(float(r))] + [int(x) for x in a])
