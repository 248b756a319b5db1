"""Model-based training loop (MBNF / MBPO) and policy evaluation.

One loop step:

1. act in the real training market and append the transition to the env buffer;
2. every ``refit_every`` steps (once past warm-up) refit the dynamics model on
   the env buffer and push ``rollout_batch`` model rollouts of length
   ``horizon`` into the agent buffer;
3. run ``updates_per_step`` SAC updates on agent-buffer batches.

An episode is one pass over the training split; the portfolio then resets.
All randomness comes from per-purpose streams spawned from one seed, so runs
are reproducible and the MBNF and MBPO loops see the same real transitions
until their first model fit.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import DatasetSplit, PriceTable, compute_indicators
from .dynamics import (HISTORY_WINDOW, GaussianEnsemble, NfDynamics, Transitions, fit_ensemble_pairs,
                       fit_nf_deltas, history_batch, model_rollout)
from .env import DEFAULT_B0, DEFAULT_COST, H_MAX, TradingEnv, action_scale, obs_dim
from .metrics import compute_metrics
from .sac import SacAgent, SacConfig, sac_update, sample_action

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LoopSchedule:
    total_steps: int = 3750
    refit_every: int = 250
    model_steps: int = 200
    updates_per_step: int = 4
    horizon: int = 1
    rollout_batch: int = 256
    warmup: int = 500
    env_capacity: int = 100_000
    agent_capacity: int = 100_000

    def __post_init__(self):
        for name in ("total_steps", "refit_every", "horizon", "rollout_batch", "env_capacity",
                     "agent_capacity"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be a positive integer")
        for name in ("model_steps", "updates_per_step", "warmup"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.refit_every > self.total_steps:
            raise ValueError("refit_every exceeds total_steps: the model would never be fit")

    def refit_steps(self) -> list[int]:
        """1-based env steps after which the model is refit."""
        return [t for t in range(self.refit_every, self.total_steps + 1, self.refit_every)
                if t >= self.warmup]

    def expected_sizes(self) -> tuple[int, int]:
        """Final (env buffer, agent buffer) sizes implied by the schedule."""
        n_agent = len(self.refit_steps()) * self.rollout_batch * self.horizon
        return min(self.total_steps, self.env_capacity), min(n_agent, self.agent_capacity)


@dataclass(frozen=True)
class LoopConfig:
    model: str = "mbnf"
    indicators: bool = True
    B0: float = DEFAULT_B0
    cost_percentage: float = DEFAULT_COST
    h_max: int = H_MAX
    reward_scale: float = 1e-4
    sac: SacConfig = field(default_factory=SacConfig)
    flow_layers: int = 6
    flow_hidden: tuple[int, ...] = (64, 64)
    model_lr: float = 1e-3
    model_batch: int = 256
    ensemble_size: int = 5
    window: int = HISTORY_WINDOW
    checkpoint_every_episode: bool = True

    def __post_init__(self):
        if self.model not in ("mbnf", "mbpo"):
            raise ValueError(f"unknown model kind {self.model!r}")
        if self.B0 <= 0 or self.cost_percentage < 0 or self.h_max < 1 or self.reward_scale <= 0:
            raise ValueError("B0, h_max and reward_scale must be positive and cost non-negative")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["sac"]["hidden"] = list(self.sac.hidden)
        out["flow_hidden"] = list(self.flow_hidden)
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "LoopConfig":
        raw = dict(raw)
        sac = raw.pop("sac", {}) or {}
        if "hidden" in sac:
            sac = {**sac, "hidden": tuple(sac["hidden"])}
        if "flow_hidden" in raw:
            raw["flow_hidden"] = tuple(raw["flow_hidden"])
        return cls(sac=SacConfig(**sac), **raw)


class ReplayBuffer:
    """FIFO ring buffer of transitions with a per-row day index (-1 for model rows)."""

    def __init__(self, capacity: int, obs_size: int, act_size: int, kind: str = "env"):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity, self.kind = int(capacity), kind
        self.obs = np.zeros((capacity, obs_size))
        self.act = np.zeros((capacity, act_size))
        self.obs_next = np.zeros((capacity, obs_size))
        self.rew = np.zeros(capacity)
        self.done = np.zeros(capacity, dtype=bool)
        self.t_index = np.full(capacity, -1, dtype=np.int64)
        self._next = 0
        self.size = 0

    def __len__(self) -> int:
        return self.size

    def add(self, obs, act, obs_next, rew, done=False, t_index=-1) -> None:
        i = self._next
        self.obs[i], self.act[i], self.obs_next[i] = obs, act, obs_next
        self.rew[i], self.done[i], self.t_index[i] = rew, done, t_index
        self._next = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def add_batch(self, tr: Transitions) -> None:
        for i in range(len(tr)):
            self.add(tr.obs[i], tr.act[i], tr.obs_next[i], tr.rew[i], tr.done[i])

    def order(self) -> np.ndarray:
        """Row positions from oldest to newest."""
        if self.size < self.capacity:
            return np.arange(self.size)
        return (np.arange(self.capacity) + self._next) % self.capacity

    def sample_index(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.size == 0:
            raise ValueError("cannot sample from an empty buffer")
        if n <= self.size:
            return rng.choice(self.size, size=n, replace=False)
        return rng.integers(0, self.size, size=n)

    def sample(self, n: int, rng: np.random.Generator):
        idx = self.sample_index(min(n, self.size), rng)
        return self.obs[idx], self.act[idx], self.rew[idx], self.obs_next[idx]

    def arrays(self) -> dict:
        o = self.order()
        return {"obs": self.obs[o], "act": self.act[o], "obs_next": self.obs_next[o],
                "rew": self.rew[o], "done": self.done[o], "t_index": self.t_index[o]}

    @classmethod
    def from_arrays(cls, arrays: dict, kind: str, capacity: int | None = None) -> "ReplayBuffer":
        n = len(arrays["rew"])
        buf = cls(capacity or max(n, 1), arrays["obs"].shape[1], arrays["act"].shape[1], kind)
        for i in range(n):
            buf.add(arrays["obs"][i], arrays["act"][i], arrays["obs_next"][i], arrays["rew"][i],
                    arrays["done"][i], arrays["t_index"][i])
        return buf


@dataclass
class MarketData:
    """Prices, causal indicators and the train/val/test split for one experiment."""

    prices: PriceTable
    indicators: np.ndarray
    split: DatasetSplit

    @classmethod
    def build(cls, prices: PriceTable, split: DatasetSplit) -> "MarketData":
        return cls(prices, compute_indicators(prices).values, split)

    @property
    def n_stocks(self) -> int:
        return self.prices.n_tickers

    def env(self, part: str, cfg: LoopConfig) -> TradingEnv:
        rng = getattr(self.split, part)
        return TradingEnv(self.prices.close[rng.start:rng.stop], self.indicators[rng.start:rng.stop],
                          cfg.B0, cfg.cost_percentage, cfg.h_max)


@dataclass(frozen=True)
class ObsNormalizer:
    shift: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, data: MarketData, cfg: LoopConfig) -> "ObsNormalizer":
        """Cash as a fraction of B0, prices relative to the first training day,
        holdings as fraction of B0 at those prices, indicators z-scored on train."""
        tr = data.split.train
        p0 = data.prices.close[tr.start]
        d = data.n_stocks
        shift = [np.zeros(1), np.zeros(d), np.zeros(d)]
        scale = [np.array([cfg.B0]), p0, np.full(d, cfg.B0) / p0]
        if cfg.indicators:
            ind = data.indicators[tr.start:tr.stop]
            mu, sd = ind.mean(axis=0), ind.std(axis=0)
            shift.append(mu.ravel())
            scale.append(np.where(sd > 1e-8, sd, 1.0).ravel())
        return cls(np.concatenate(shift), np.concatenate(scale))

    def __call__(self, obs):
        return (np.asarray(obs, dtype=float) - self.shift) / self.scale

    def to_dict(self) -> dict:
        return {"shift": self.shift.tolist(), "scale": self.scale.tolist()}

    @classmethod
    def from_dict(cls, raw: dict) -> "ObsNormalizer":
        return cls(np.asarray(raw["shift"], dtype=float), np.asarray(raw["scale"], dtype=float))


@dataclass
class LoopResult:
    agent: SacAgent
    normalizer: ObsNormalizer
    env_buffer: ReplayBuffer
    agent_buffer: ReplayBuffer
    dynamics: NfDynamics | GaussianEnsemble | None
    log_rows: list
    refits: list
    config: LoopConfig
    schedule: LoopSchedule
    seed: int


LOG_FIELDS = ["step", "episode", "t", "reward", "R_t", "critic_loss", "actor_loss",
              "entropy_estimate", "model_loss"]


def _rng_streams(seed: int) -> dict:
    names = ("init", "env", "model", "rollout", "update")
    kids = np.random.SeedSequence(seed).spawn(len(names))
    return {n: np.random.default_rng(k) for n, k in zip(names, kids)}


def policy_fn(agent: SacAgent, norm: ObsNormalizer, rng: np.random.Generator | None = None,
              deterministic: bool = False):
    """Raw-observation policy: ``obs -> raw actions in [-1, 1]``."""
    def act(obs):
        a, _ = sample_action(agent, norm(obs), rng, deterministic=deterministic)
        return a
    return act


def _fit_model(kind, env_buf: ReplayBuffer, data: MarketData, prev, cfg: LoopConfig,
               schedule: LoopSchedule, rng):
    arr = env_buf.arrays()
    d = data.n_stocks
    deltas = arr["obs_next"][:, 1:1 + d] - arr["obs"][:, 1:1 + d]
    if kind == "mbnf":
        dyn = fit_nf_deltas(deltas, rng, prev, steps=schedule.model_steps, batch=cfg.model_batch,
                            lr=cfg.model_lr, n_layers=cfg.flow_layers, hidden=cfg.flow_hidden)
        return dyn, dyn.loss(deltas)
    close = data.prices.close
    t = arr["t_index"]
    last = close[t] - close[np.maximum(t - 1, 0)]
    dyn = fit_ensemble_pairs(last, deltas, rng, prev, steps=schedule.model_steps,
                             batch=cfg.model_batch, lr=cfg.model_lr,
                             n_members=cfg.ensemble_size, hidden=cfg.flow_hidden)
    return dyn, dyn.loss(np.vstack([last[:1], deltas]))


def _start_states(env_buf: ReplayBuffer, data: MarketData, n: int, rng, cfg: LoopConfig):
    idx = env_buf.sample_index(n, rng)
    d = data.n_stocks
    obs = env_buf.obs[idx]
    ind = obs[:, 1 + 2 * d:].reshape(n, d, 7) if cfg.indicators else np.zeros((n, d, 7))
    p = data.prices
    return history_batch(p.close, p.high, p.low, env_buf.t_index[idx], obs[:, 0],
                         obs[:, 1 + d:1 + 2 * d], ind, cfg.window)


def run_loop(data: MarketData, schedule: LoopSchedule, seed: int, cfg: LoopConfig,
             out_dir=None) -> LoopResult:
    """Train one agent; ``cfg.model`` picks the flow (mbnf) or ensemble (mbpo) dynamics."""
    streams = _rng_streams(seed)
    env = data.env("train", cfg)
    if env.n_days < 2:
        raise ValueError("training split must hold at least two days")
    d = data.n_stocks
    od = obs_dim(d, cfg.indicators)
    norm = ObsNormalizer.fit(data, cfg)
    agent = SacAgent.create(od, d, streams["init"], cfg.sac)
    env_buf = ReplayBuffer(schedule.env_capacity, od, d, "env")
    agent_buf = ReplayBuffer(schedule.agent_capacity, od, d, "model")
    refit_at = set(schedule.refit_steps())
    out = Path(out_dir) if out_dir is not None else None
    offset = data.split.train.start

    dyn = None
    rows, refits = [], []
    state = env.reset(0)
    episode, R = 0, 0.0
    for step in range(1, schedule.total_steps + 1):
        obs = state.observation(cfg.indicators)
        if step <= schedule.warmup:
            raw = streams["env"].uniform(-1.0, 1.0, size=d)
        else:
            raw = sample_action(agent, norm(obs), streams["env"])[0]
        res = env.step(state, action_scale(raw, cfg.h_max))
        done = env.done(res.next_state)
        env_buf.add(obs, raw, res.next_state.observation(cfg.indicators), res.reward, done,
                    offset + state.t)
        R += res.reward
        row = {"step": step, "episode": episode, "t": state.t, "reward": res.reward, "R_t": R,
               "critic_loss": None, "actor_loss": None, "entropy_estimate": None, "model_loss": None}

        if step in refit_at:
            dyn, mloss = _fit_model(cfg.model, env_buf, data, dyn, cfg, schedule, streams["model"])
            start = _start_states(env_buf, data, schedule.rollout_batch, streams["rollout"], cfg)
            roll = model_rollout(dyn, policy_fn(agent, norm, streams["rollout"]), start,
                                 schedule.horizon, streams["rollout"], cfg.cost_percentage,
                                 cfg.indicators, cfg.h_max)
            agent_buf.add_batch(roll)
            row["model_loss"] = mloss
            refits.append({"step": step, "env_size": len(env_buf), "agent_size": len(agent_buf),
                           "model_loss": mloss})

        if len(agent_buf) > 0 and schedule.updates_per_step > 0:
            stats = []
            for _ in range(schedule.updates_per_step):
                o, a, r, o2 = agent_buf.sample(cfg.sac.batch, streams["update"])
                agent, s = sac_update(agent, (norm(o), a, r * cfg.reward_scale, norm(o2)),
                                      streams["update"])
                stats.append(s)
            for key in ("critic_loss", "actor_loss", "entropy_estimate"):
                row[key] = float(np.mean([s[key] for s in stats]))
        rows.append(row)

        if done:
            if out is not None and cfg.checkpoint_every_episode:
                save_checkpoint(out / "checkpoints" / f"episode_{episode:03d}", agent, dyn)
            episode += 1
            state = env.reset(0)
        else:
            state = res.next_state

    result = LoopResult(agent, norm, env_buf, agent_buf, dyn, rows, refits, cfg, schedule, seed)
    if out is not None:
        write_run(out, result, data)
    return result


def run_mbnf(data: MarketData, schedule: LoopSchedule, seed: int, cfg: LoopConfig | None = None,
             out_dir=None) -> LoopResult:
    cfg = cfg or LoopConfig()
    return run_loop(data, schedule, seed, _with_model(cfg, "mbnf"), out_dir)


def run_mbpo(data: MarketData, schedule: LoopSchedule, seed: int, cfg: LoopConfig | None = None,
             out_dir=None) -> LoopResult:
    cfg = cfg or LoopConfig()
    return run_loop(data, schedule, seed, _with_model(cfg, "mbpo"), out_dir)


def _with_model(cfg: LoopConfig, kind: str) -> LoopConfig:
    return replace(cfg, model=kind)


# -- evaluation ---------------------------------------------------------------


def evaluate(policy, env: TradingEnv, episodes: int = 1, rng: np.random.Generator | None = None):
    """Step ``policy(obs, rng) -> raw actions`` through the whole table.

    Returns a list of equity curves (one per episode), each of length
    ``env.n_days``; policies without randomness only need one episode.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    curves = []
    for _ in range(episodes):
        state = env.reset(0)
        curve = [state.asset]
        while not env.done(state):
            raw = policy(state.observation(), rng)
            state = env.step(state, action_scale(raw, env.h_max)).next_state
            curve.append(state.asset)
        curves.append(np.array(curve))
    return curves


def agent_policy(agent: SacAgent, norm: ObsNormalizer, indicators: bool = True):
    """Deterministic evaluation policy (tanh of the policy mean)."""
    d = agent.act_dim

    def act(obs, rng=None):
        if not indicators:
            obs = obs[:1 + 2 * d]
        a, _ = sample_action(agent, norm(obs[None]), None, deterministic=True)
        return a[0]
    return act


def random_policy(n_stocks: int):
    def act(obs, rng):
        return rng.uniform(-1.0, 1.0, size=n_stocks)
    return act


def hold_policy(n_stocks: int):
    def act(obs, rng=None):
        return np.zeros(n_stocks)
    return act


# -- persistence ----------------------------------------------------------------


def save_checkpoint(directory, agent: SacAgent, dyn) -> None:
    d = Path(directory)
    agent.save(d)
    if isinstance(dyn, NfDynamics):
        dyn.flow.save(d / "flow.bin")
    elif isinstance(dyn, GaussianEnsemble):
        from .nn import mlp_meta, save_params
        meta = {**mlp_meta(dyn.net), "mean": dyn.mean.tolist(), "scale": dyn.scale.tolist()}
        for k, p in enumerate(dyn.members):
            save_params(d / f"ensemble_{k}.bin", p, meta)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path, fields, rows) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(fields) + "\n")
        for r in rows:
            fh.write(",".join(_fmt(r[k]) for k in fields) + "\n")


def write_equity(path, dates, curve) -> None:
    with open(path, "w") as fh:
        fh.write("date,asset\n")
        for day, v in zip(dates, curve):
            fh.write(f"{day:%Y-%m-%d},{float(v)!r}\n")


def write_run(out: Path, result: LoopResult, data: MarketData) -> None:
    """Write logs, buffers, evaluation curves and metrics into ``out``."""
    from .analysis import export_buffer
    out.mkdir(parents=True, exist_ok=True)
    config = {"seed": result.seed, "schedule": asdict(result.schedule), **result.config.to_dict(),
              "tickers": list(data.prices.tickers), "versions": _versions()}
    (out / "config.json").write_text(json.dumps(config, indent=2, sort_keys=True))
    write_csv(out / "train_log.csv", LOG_FIELDS, result.log_rows)
    write_csv(out / "refits.csv", ["step", "env_size", "agent_size", "model_loss"], result.refits)
    np.savez(out / "buffers.npz", **{f"env_{k}": v for k, v in result.env_buffer.arrays().items()},
             **{f"model_{k}": v for k, v in result.agent_buffer.arrays().items()})
    (out / "normalizer.json").write_text(json.dumps(result.normalizer.to_dict()))
    save_checkpoint(out / "checkpoints" / "final", result.agent, result.dynamics)
    cfg = result.config
    policy = agent_policy(result.agent, result.normalizer, cfg.indicators)
    for part in ("val", "test"):
        rng = getattr(data.split, part)
        curve = evaluate(policy, data.env(part, cfg))[0]
        write_equity(out / f"equity_{part}.csv", data.prices.dates[rng.start:rng.stop], curve)
        if part == "test":
            report = compute_metrics(curve)
            (out / "metrics_test.json").write_text(json.dumps(report.to_dict(), indent=2))
    if len(result.env_buffer) and len(result.agent_buffer):
        export_buffer(out / "buffer_export.csv", result.env_buffer, result.agent_buffer)


def _versions() -> dict:
    import platform
    from importlib.metadata import PackageNotFoundError, version
    out = {"python": platform.python_version(), "numpy": np.__version__}
    try:
        out["artifact"] = version("artifact")
    except PackageNotFoundError:
        pass
    return out
