"""Learned market dynamics for model rollouts.

Both models generate the next day's price change ``dP``. Everything else in
the next state (cash, holdings, reward, indicators) follows deterministically
from the trading rules once the new prices are known:

    P' = max(P + dP, PRICE_FLOOR)

``NfDynamics`` draws ``dP`` from a normalizing flow fitted to the
unconditional joint density of daily price deltas. ``GaussianEnsemble`` is the
MBPO-style baseline: E bootstrapped networks mapping the last delta to a
diagonal Gaussian over the next delta.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .data import indicator_block
from .env import N_INDICATORS, action_scale, execute
from .flow import FlowModel, flow_fit
from .nn import MLP, AdamState, NonFiniteError, opt_step

PRICE_FLOOR = 0.01
HISTORY_WINDOW = 120
LOGVAR_MIN, LOGVAR_MAX = -10.0, 5.0
STD_FLOOR = 1e-3
# sampled deltas are kept within the observed range widened by this share of its span
SUPPORT_MARGIN = 0.5


def price_deltas(prices) -> np.ndarray:
    prices = np.asarray(prices, dtype=float)
    if prices.ndim != 2 or prices.shape[0] < 2:
        raise ValueError("need at least two price rows")
    return np.diff(prices, axis=0)


@dataclass(frozen=True)
class TransitionSample:
    s: np.ndarray
    a: np.ndarray
    s_next: np.ndarray
    r: float
    done: bool = False
    kind: str = "model"


@dataclass
class Transitions:
    """A batch of transitions as parallel arrays (row i is one sample)."""

    obs: np.ndarray
    act: np.ndarray
    obs_next: np.ndarray
    rew: np.ndarray
    done: np.ndarray
    kind: str = "model"
    chain: np.ndarray | None = None
    step: np.ndarray | None = None

    def __len__(self) -> int:
        return self.obs.shape[0]

    def __getitem__(self, i) -> TransitionSample:
        return TransitionSample(self.obs[i], self.act[i], self.obs_next[i], float(self.rew[i]),
                                bool(self.done[i]), self.kind)

    def __iter__(self):
        return (self[i] for i in range(len(self)))


@dataclass
class PortfolioBatch:
    """Batched portfolio states plus the price history each one needs.

    ``close/high/low`` are ``(n, window, d)`` with the current day last.
    """

    balance: np.ndarray
    holdings: np.ndarray
    close: np.ndarray
    high: np.ndarray
    low: np.ndarray
    indicators: np.ndarray  # (n, d, 7)

    @property
    def prices(self) -> np.ndarray:
        return self.close[:, -1]

    @property
    def last_delta(self) -> np.ndarray:
        return self.close[:, -1] - self.close[:, -2]

    def __len__(self) -> int:
        return self.balance.shape[0]

    def observation(self, indicators: bool = True) -> np.ndarray:
        parts = [self.balance[:, None], self.prices, self.holdings]
        if indicators:
            parts.append(self.indicators.reshape(len(self), -1))
        return np.concatenate(parts, axis=1)


def history_batch(table_close, table_high, table_low, t_index, balance, holdings,
                  indicators=None, window: int = HISTORY_WINDOW) -> PortfolioBatch:
    """Build a batch from rows ``t_index`` of real price tables.

    Days before the start of the table are padded with its first row.
    ``indicators`` defaults to recomputing them on the window.
    """
    t_index = np.asarray(t_index, dtype=int)
    rows = t_index[:, None] + np.arange(-window + 1, 1)[None, :]
    rows = np.clip(rows, 0, None)
    close = np.asarray(table_close, dtype=float)[rows]
    high = np.asarray(table_high, dtype=float)[rows]
    low = np.asarray(table_low, dtype=float)[rows]
    if indicators is None:
        indicators = _window_indicators(close, high, low)
    return PortfolioBatch(np.asarray(balance, dtype=float).copy(),
                          np.asarray(holdings, dtype=float).copy(), close, high, low,
                          np.asarray(indicators, dtype=float).copy())


def _window_indicators(close, high, low) -> np.ndarray:
    block = indicator_block(np.moveaxis(close, 1, 0), np.moveaxis(high, 1, 0),
                            np.moveaxis(low, 1, 0))
    return block[-1]


def advance(batch: PortfolioBatch, shares, deltas, cost_pct: float,
            indicators: bool = True):
    """Apply orders, then move prices by ``deltas``.

    Returns ``(next_batch, reward, executed, cost)``. New history rows use the
    new price for close, high and low alike.
    """
    deltas = np.asarray(deltas, dtype=float)
    new_p = np.maximum(batch.prices + deltas, PRICE_FLOOR)
    cash, held, executed, cost = execute(batch.balance, batch.prices, batch.holdings,
                                         shares, cost_pct)
    close = np.concatenate([batch.close[:, 1:], new_p[:, None]], axis=1)
    high = np.concatenate([batch.high[:, 1:], new_p[:, None]], axis=1)
    low = np.concatenate([batch.low[:, 1:], new_p[:, None]], axis=1)
    if indicators:
        ind = _window_indicators(close, high, low)
    else:
        ind = np.zeros((len(batch), new_p.shape[1], N_INDICATORS))
    nxt = PortfolioBatch(cash, held, close, high, low, ind)
    before = batch.balance + np.sum(batch.prices * batch.holdings, axis=1)
    after = cash + np.sum(new_p * held, axis=1)
    return nxt, after - before, executed, cost


# -- normalizing-flow dynamics -------------------------------------------------


@dataclass
class NfDynamics:
    flow: FlowModel
    history: np.ndarray  # last rows of the fitting prices, (window, d)
    opt_state: AdamState | None = None
    curve: list = field(default_factory=list)
    support: tuple | None = None
    dt: int = 1

    @property
    def dim(self) -> int:
        return self.flow.dim

    def sample_deltas(self, n: int, rng: np.random.Generator) -> np.ndarray:
        # stacked exp(s) factors can throw rare draws far past anything seen in training
        out = self.flow.sample(n, rng)
        if self.support is not None:
            out = np.clip(out, *self.support)
        return out

    def loss(self, deltas) -> float:
        return float(-np.mean(self.flow.log_prob(deltas)))


def nf_dyn_fit(prices, rng: np.random.Generator | None = None, prev: NfDynamics | None = None,
               steps: int | None = None, epochs: int = 50, batch: int = 256, lr: float = 1e-3,
               n_layers: int = 6, hidden=(64, 64), window: int = HISTORY_WINDOW) -> NfDynamics:
    """Fit the flow on first differences of ``prices`` (rows are days).

    ``prev`` warm-starts from an earlier fit (parameters and optimizer moments).
    ``steps`` caps the number of gradient steps.
    """
    prices = np.asarray(prices, dtype=float)
    dyn = fit_nf_deltas(price_deltas(prices), rng, prev, steps, epochs, batch, lr, n_layers, hidden)
    dyn.history = prices[-window:].copy()
    return dyn


def fit_nf_deltas(deltas, rng: np.random.Generator | None = None, prev: NfDynamics | None = None,
                  steps: int | None = None, epochs: int = 50, batch: int = 256, lr: float = 1e-3,
                  n_layers: int = 6, hidden=(64, 64)) -> NfDynamics:
    """Same as ``nf_dyn_fit`` but from a ready-made ``(n, d)`` matrix of deltas."""
    deltas = np.asarray(deltas, dtype=float)
    if deltas.ndim != 2 or deltas.shape[0] < 1:
        raise ValueError("need at least one delta row")
    rng = np.random.default_rng(0) if rng is None else rng
    if prev is None:
        flow = FlowModel.create(deltas.shape[1], n_layers, hidden, rng)
        state = None
        history = np.zeros((2, deltas.shape[1]))
    else:
        flow, state, history = prev.flow, prev.opt_state, prev.history
    bsz = min(batch, deltas.shape[0])
    if steps is not None:
        epochs = -(-steps // max(deltas.shape[0] // bsz, 1))
    res = flow_fit(flow, deltas, epochs=epochs, batch=bsz, lr=lr, rng=rng, opt_state=state,
                   max_steps=steps)
    return NfDynamics(res.model, history, res.opt_state, res.curve, delta_support(deltas))


def delta_support(deltas, margin: float = SUPPORT_MARGIN):
    lo, hi = deltas.min(axis=0), deltas.max(axis=0)
    pad = margin * np.maximum(hi - lo, STD_FLOOR)
    return lo - pad, hi + pad


def nf_dyn_predict(dyn: NfDynamics, state, shares, rng: np.random.Generator,
                   cost_pct: float = 0.001, history=None, indicators: bool = True,
                   kind: str = "model") -> TransitionSample:
    """One predicted transition from an ``EnvState`` under integer ``shares``.

    The price history used for indicators defaults to the model's stored window
    with the state's prices as its last row.
    """
    batch = _single_batch(dyn.history if history is None else history, state)
    nxt, r, _, _ = advance(batch, np.asarray(shares, dtype=float)[None], dyn.sample_deltas(1, rng),
                           cost_pct, indicators)
    return TransitionSample(batch.observation(indicators)[0], np.asarray(shares),
                            nxt.observation(indicators)[0], float(r[0]), False, kind)


def _single_batch(history, state) -> PortfolioBatch:
    hist = np.array(history, dtype=float, copy=True)
    if hist.ndim != 2 or hist.shape[0] < 2:
        raise ValueError("history needs at least two rows")
    hist[-1] = state.prices
    return PortfolioBatch(np.array([state.balance], dtype=float),
                          np.asarray(state.holdings, dtype=float)[None],
                          hist[None], hist[None].copy(), hist[None].copy(),
                          np.asarray(state.indicators, dtype=float)[None])


# -- Gaussian ensemble baseline ------------------------------------------------


@dataclass
class GaussianEnsemble:
    net: MLP
    members: list
    opt_states: list
    mean: np.ndarray
    scale: np.ndarray
    history: np.ndarray
    curve: list = field(default_factory=list)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @property
    def size(self) -> int:
        return len(self.members)

    def member_output(self, k: int, last_delta: np.ndarray):
        """Mean and clamped log-variance of the next delta, in data units."""
        x = (np.atleast_2d(last_delta) - self.mean) / self.scale
        out = self.net.forward(self.members[k], x)
        d = self.dim
        mu = out[:, :d] * self.scale + self.mean
        logvar = np.clip(out[:, d:], LOGVAR_MIN, LOGVAR_MAX) + 2.0 * np.log(self.scale)
        return mu, logvar

    def sample_deltas(self, last_delta: np.ndarray, rng: np.random.Generator,
                      noise_scale: float = 1.0) -> np.ndarray:
        last_delta = np.atleast_2d(last_delta)
        n = last_delta.shape[0]
        pick = rng.integers(0, self.size, size=n)
        noise = rng.standard_normal((n, self.dim))
        mu = np.empty((n, self.dim))
        std = np.empty((n, self.dim))
        for k in range(self.size):
            rows = pick == k
            if rows.any():
                m, lv = self.member_output(k, last_delta[rows])
                mu[rows], std[rows] = m, np.exp(0.5 * lv)
        return mu + noise_scale * std * noise

    def loss(self, deltas) -> float:
        """Mean Gaussian NLL (nats per row) of consecutive delta pairs, averaged over members."""
        deltas = np.asarray(deltas, dtype=float)
        x, y = deltas[:-1], deltas[1:]
        vals = []
        for k in range(self.size):
            mu, lv = self.member_output(k, x)
            vals.append(np.mean(np.sum(0.5 * (np.log(2 * np.pi) + lv + (y - mu) ** 2 * np.exp(-lv)), axis=1)))
        return float(np.mean(vals))


def gaussian_nll_and_grad(net: MLP, params: np.ndarray, x: np.ndarray, y: np.ndarray):
    """Mean Gaussian NLL (without the 2*pi constant) of standardized targets."""
    out, cache = net.forward(params, x, keep=True)
    d = y.shape[1]
    mu, raw = out[:, :d], out[:, d:]
    lv = np.clip(raw, LOGVAR_MIN, LOGVAR_MAX)
    inv = np.exp(-lv)
    err = y - mu
    n = x.shape[0]
    loss = float(np.mean(np.sum(0.5 * (lv + err * err * inv), axis=1)))
    g_mu = -err * inv / n
    g_lv = 0.5 * (1.0 - err * err * inv) / n * ((raw >= LOGVAR_MIN) & (raw <= LOGVAR_MAX))
    grad, _ = net.backward(params, cache, np.concatenate([g_mu, g_lv], axis=1))
    if not np.isfinite(loss):
        raise NonFiniteError("non-finite ensemble loss")
    return loss, grad


def ens_fit(prices, rng: np.random.Generator | None = None, prev: GaussianEnsemble | None = None,
            steps: int = 200, batch: int = 256, lr: float = 1e-3, n_members: int = 5,
            hidden=(64, 64), window: int = HISTORY_WINDOW) -> GaussianEnsemble:
    """Train on (last delta -> next delta) pairs taken from consecutive price rows."""
    prices = np.asarray(prices, dtype=float)
    if prices.ndim != 2 or prices.shape[0] < 3:
        raise ValueError("ensemble needs at least three price rows")
    deltas = price_deltas(prices)
    ens = fit_ensemble_pairs(deltas[:-1], deltas[1:], rng, prev, steps, batch, lr, n_members, hidden)
    ens.history = prices[-window:].copy()
    return ens


def fit_ensemble_pairs(x, y, rng: np.random.Generator | None = None,
                       prev: GaussianEnsemble | None = None, steps: int = 200, batch: int = 256,
                       lr: float = 1e-3, n_members: int = 5, hidden=(64, 64)) -> GaussianEnsemble:
    """Each member takes ``steps`` Adam steps on its own bootstrap resample of the pairs."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.ndim != 2 or x.shape[0] == 0 or x.shape != y.shape:
        raise ValueError("ensemble needs a non-empty set of (n, d) feature/target pairs")
    rng = np.random.default_rng(0) if rng is None else rng
    both = np.vstack([x, y])
    mean = both.mean(axis=0)
    scale = np.maximum(both.std(axis=0), STD_FLOOR)
    xs, ys = (x - mean) / scale, (y - mean) / scale
    n, d = xs.shape
    if prev is None:
        net = MLP((d, *hidden, 2 * d))
        members = [net.init(rng) for _ in range(n_members)]
        states = [AdamState.zeros(net.n_params) for _ in range(n_members)]
        history = np.zeros((2, d))
    else:
        net, members, states = prev.net, list(prev.members), list(prev.opt_states)
        history = prev.history
    bsz = min(batch, n)
    curve = []
    for k in range(len(members)):
        boot = rng.integers(0, n, size=n)
        params, state = members[k], states[k]
        losses = []
        for _ in range(steps):
            idx = boot[rng.integers(0, n, size=bsz)]
            loss, g = gaussian_nll_and_grad(net, params, xs[idx], ys[idx])
            params, state = opt_step("adam", params, g, lr, state)
            losses.append(loss)
        members[k], states[k] = params, state
        curve.append(float(np.mean(losses)) if losses else float("nan"))
    return GaussianEnsemble(net, members, states, mean, scale, history, curve)


def ens_predict(ens: GaussianEnsemble, state, shares, rng: np.random.Generator,
                cost_pct: float = 0.001, history=None, indicators: bool = True,
                noise_scale: float = 1.0, kind: str = "model") -> TransitionSample:
    batch = _single_batch(ens.history if history is None else history, state)
    deltas = ens.sample_deltas(batch.last_delta, rng, noise_scale)
    nxt, r, _, _ = advance(batch, np.asarray(shares, dtype=float)[None], deltas, cost_pct, indicators)
    return TransitionSample(batch.observation(indicators)[0], np.asarray(shares),
                            nxt.observation(indicators)[0], float(r[0]), False, kind)


def sample_model_deltas(dyn, batch: PortfolioBatch, rng: np.random.Generator) -> np.ndarray:
    if isinstance(dyn, GaussianEnsemble):
        return dyn.sample_deltas(batch.last_delta, rng)
    return dyn.sample_deltas(len(batch), rng)


def model_rollout(dyn, policy, start: PortfolioBatch, horizon: int, rng: np.random.Generator,
                  cost_pct: float = 0.001, indicators: bool = True, h_max: int = 100) -> Transitions:
    """Chain ``horizon`` predicted steps from every start state.

    ``policy(obs) -> raw actions in [-1, 1]``. Rows are ordered chain by chain,
    so within a chain row i+1 starts where row i ended.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    n = len(start)
    obs_l, act_l, nxt_l, rew_l = [], [], [], []
    batch = start
    for _ in range(horizon):
        obs = batch.observation(indicators)
        raw = np.asarray(policy(obs), dtype=float)
        shares = action_scale(raw, h_max)
        deltas = sample_model_deltas(dyn, batch, rng)
        batch, r, _, _ = advance(batch, shares, deltas, cost_pct, indicators)
        obs_l.append(obs)
        act_l.append(raw)
        nxt_l.append(batch.observation(indicators))
        rew_l.append(r)

    def chain_major(parts):
        return np.stack(parts, axis=1).reshape(n * horizon, *parts[0].shape[1:])

    return Transitions(chain_major(obs_l), chain_major(act_l), chain_major(nxt_l),
                       chain_major(rew_l), np.zeros(n * horizon, dtype=bool), "model",
                       np.repeat(np.arange(n), horizon), np.tile(np.arange(horizon), n))


def with_history(dyn, history):
    """Copy of a fitted model whose default history window is ``history``."""
    return replace(dyn, history=np.asarray(history, dtype=float).copy())
