"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 usage error (unknown subcommand
or bad flags), 3 invalid configuration.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import analysis, causality, metrics
from .data import DataError, compute_indicators, load_ohlcv, split_dataset
from .env import DEFAULT_B0, DEFAULT_COST, H_MAX
from .loop import LoopConfig, LoopSchedule, MarketData, ObsNormalizer, run_loop
from .sac import SacAgent, SacConfig, critic_targets
from .stable import fit_stable, histogram_table, price_diff_series
from .synthetic import synthetic_market

log = logging.getLogger("mbnf")


class ConfigError(ValueError):
    """Raised for configuration files that fail validation (exit code 3)."""


@dataclass
class RunConfig:
    prices: str | None = None
    synthetic: dict | None = None
    tickers: list | None = None
    date_range: list | None = None
    train_end: str | None = None
    val_end: str | None = None
    cost_percentage: float = DEFAULT_COST
    B0: float = DEFAULT_B0
    h_max: int = H_MAX
    schedule: dict = field(default_factory=dict)
    seeds: list = field(default_factory=lambda: list(range(10)))
    model: str = "mbnf"
    indicators: bool = True
    reward_scale: float = 1e-4
    sac: dict = field(default_factory=dict)
    flow_layers: int = 6
    flow_hidden: list = field(default_factory=lambda: [64, 64])
    model_lr: float = 1e-3
    model_batch: int = 256
    ensemble_size: int = 5
    out_dir: str = "runs"

    @classmethod
    def from_json(cls, path) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**raw)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if (self.prices is None) == (self.synthetic is None):
            raise ConfigError("set exactly one of 'prices' (CSV path) or 'synthetic'")
        if self.model not in ("mbnf", "mbpo"):
            raise ConfigError(f"model must be 'mbnf' or 'mbpo', not {self.model!r}")
        if not self.seeds or not all(isinstance(s, int) for s in self.seeds):
            raise ConfigError("seeds must be a non-empty list of integers")
        try:
            self.loop_schedule()
            self.loop_config()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def loop_schedule(self) -> LoopSchedule:
        return LoopSchedule(**self.schedule)

    def loop_config(self) -> LoopConfig:
        sac = dict(self.sac)
        if "hidden" in sac:
            sac["hidden"] = tuple(sac["hidden"])
        return LoopConfig(model=self.model, indicators=self.indicators, B0=self.B0,
                          cost_percentage=self.cost_percentage, h_max=self.h_max,
                          reward_scale=self.reward_scale, sac=SacConfig(**sac),
                          flow_layers=self.flow_layers, flow_hidden=tuple(self.flow_hidden),
                          model_lr=self.model_lr, model_batch=self.model_batch,
                          ensemble_size=self.ensemble_size)

    def market(self) -> MarketData:
        if self.synthetic is not None:
            prices = synthetic_market(**self.synthetic)
            if self.tickers:
                prices = prices.select(self.tickers)
        else:
            prices = load_ohlcv(self.prices, self.tickers, self.date_range)
        if self.train_end is None or self.val_end is None:
            n = len(prices)
            a, b = int(n * 0.7), int(n * 0.8)
            train_end, val_end = prices.dates[a - 1], prices.dates[b - 1]
        else:
            train_end, val_end = self.train_end, self.val_end
        return MarketData.build(prices, split_dataset(prices, train_end, val_end))


def run_name(model: str, indicators: bool, seed: int) -> str:
    return f"{model}{'' if indicators else '_noind'}_seed{seed}"


# -- subcommands -----------------------------------------------------------------


def cmd_indicators(args) -> int:
    prices = load_ohlcv(args.prices, args.tickers)
    compute_indicators(prices).to_frame().to_csv(args.out, index=False, float_format="%.12g")
    return 0


def cmd_fit_stable(args) -> int:
    prices = load_ohlcv(args.prices, args.tickers)
    out = Path(args.out)
    hist_dir = Path(args.hist_dir) if args.hist_dir else out.parent
    hist_dir.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["ticker", "alpha", "beta", "mu", "sigma"])
        for i, ticker in enumerate(prices.tickers):
            deltas = price_diff_series(prices.close[:, i])
            p = fit_stable(deltas)
            w.writerow([ticker, repr(p.alpha), repr(p.beta), repr(p.mu), repr(p.sigma)])
            table = histogram_table(deltas, p, bins=args.bins)
            with open(hist_dir / f"hist_{ticker}.csv", "w", newline="") as hf:
                hw = csv.writer(hf)
                hw.writerow(list(table))
                for row in zip(*table.values()):
                    hw.writerow([repr(float(v)) for v in row])
    return 0


def cmd_train(args) -> int:
    cfg = RunConfig.from_json(args.config)
    if args.model:
        cfg.model = args.model
    if args.no_indicators:
        cfg.indicators = False
    seeds = [args.seed] if args.seed is not None else cfg.seeds
    data = cfg.market()
    schedule, loop_cfg = cfg.loop_schedule(), cfg.loop_config()
    base = Path(args.out) if args.out else Path(cfg.out_dir)
    for seed in seeds:
        out = base if (args.out and len(seeds) == 1) else base / run_name(cfg.model, cfg.indicators, seed)
        log.info("training %s seed %d -> %s", cfg.model, seed, out)
        run_loop(data, schedule, seed, loop_cfg, out)
        cfg_dump = {**asdict(cfg), "seed": seed}
        (out / "run_config.json").write_text(json.dumps(cfg_dump, indent=2, sort_keys=True))
    return 0


def cmd_backtest(args) -> int:
    curve = metrics.read_equity(args.equity)
    report = metrics.compute_metrics(curve)
    stem = Path(args.equity).with_suffix("")
    json_path = Path(args.out_json) if args.out_json else Path(f"{stem}_metrics.json")
    csv_path = Path(args.out_csv) if args.out_csv else Path(f"{stem}_metrics.csv")
    metrics.write_report(report, json_path, csv_path)
    print(json.dumps(report.to_dict()))
    return 0


def cmd_causality(args) -> int:
    prices = load_ohlcv(args.prices, args.tickers)
    cfg = causality.PcConfig(args.E, args.tau, args.k, args.h)
    mat = causality.causality_matrix(prices, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name in ("positive", "negative", "dark"):
        causality.write_matrix(out / f"{name}.csv", mat.tickers, getattr(mat, name))
    for theta in (0.3, 0.5, 0.7):
        for name in ("positive", "negative"):
            suffix = "" if name == "positive" else "_negative"
            causality.write_edges(out / f"edges_theta{int(round(theta * 100))}{suffix}.csv",
                                  mat.tickers, getattr(mat, name), theta)
    return 0


def _checkpoint_dirs(path: Path) -> list[tuple[str, Path]]:
    if (path / "policy.bin").exists():
        return [(path.name, path)]
    root = path / "checkpoints" if (path / "checkpoints").is_dir() else path
    eps = [(p.name.split("_", 1)[1], p) for p in sorted(root.glob("episode_*")) if p.is_dir()]
    if (root / "final").is_dir():
        eps.append(("final", root / "final"))
    if not eps:
        raise FileNotFoundError(f"no checkpoints under {path}")
    return eps


def _run_root(ckpt: Path) -> Path:
    for p in [ckpt, *ckpt.parents]:
        if (p / "buffers.npz").exists():
            return p
    raise FileNotFoundError(f"no run directory (buffers.npz) above {ckpt}")


def critic_loss_fn(agent: SacAgent, obs, act, y):
    """Critic-1 squared error on a fixed batch, as (loss, grad) closures over its parameters."""
    net = agent.q_net
    x = np.concatenate([obs, act], axis=1)
    n = x.shape[0]

    def loss(p):
        e = net.forward(p, x)[:, 0] - y
        return 0.5 * float(np.mean(e * e))

    def grad(p):
        q, cache = net.forward(p, x, keep=True)
        g, _ = net.backward(p, cache, ((q[:, 0] - y) / n)[:, None])
        return g

    return loss, grad


def cmd_sharpness(args) -> int:
    from .flow import FlowModel
    path = Path(args.checkpoint)
    rows = []
    rng = np.random.default_rng(args.seed)
    for label, ckpt in _checkpoint_dirs(path):
        root = _run_root(ckpt)
        buf = np.load(root / "buffers.npz")
        run_cfg = json.loads((root / "config.json").read_text())
        if args.target == "critic":
            agent = SacAgent.load(ckpt)
            norm = ObsNormalizer.from_dict(json.loads((root / "normalizer.json").read_text()))
            pool = "model" if len(buf["model_rew"]) else "env"
            n = len(buf[f"{pool}_rew"])
            idx = rng.choice(n, size=min(args.batch, n), replace=False)
            obs, obs2 = norm(buf[f"{pool}_obs"][idx]), norm(buf[f"{pool}_obs_next"][idx])
            act = buf[f"{pool}_act"][idx]
            y = critic_targets(agent, obs2, buf[f"{pool}_rew"][idx] * run_cfg["reward_scale"],
                               np.random.default_rng(args.seed))
            loss, grad = critic_loss_fn(agent, obs, act, y)
            params = agent.q1
        else:
            if not (ckpt / "flow.bin").exists():
                raise FileNotFoundError(f"{ckpt} holds no flow checkpoint")
            flow = FlowModel.load(ckpt / "flow.bin")
            d = flow.dim
            deltas = buf["env_obs_next"][:, 1:1 + d] - buf["env_obs"][:, 1:1 + d]
            loss = lambda p: flow.nll_and_grad(deltas, p)[0]  # noqa: E731
            grad = lambda p: flow.nll_and_grad(deltas, p)[1]  # noqa: E731
            params = flow.params
        res = analysis.sharpness(loss, params, tol=args.tol, max_iter=args.max_iter, grad=grad, rng=rng)
        rows.append((label, res))
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["episode", "lambda_max"])
        for label, res in rows:
            w.writerow([label, repr(res.lambda_max)])
    return 0


def cmd_export_buffer(args) -> int:
    from .loop import ReplayBuffer
    buf = np.load(Path(args.run) / "buffers.npz")
    env = ReplayBuffer.from_arrays({k[4:]: buf[k] for k in buf.files if k.startswith("env_")}, "env")
    model = ReplayBuffer.from_arrays({k[6:]: buf[k] for k in buf.files if k.startswith("model_")}, "model")
    n = analysis.export_buffer(args.out, env, model)
    print(f"{n} rows")
    return 0


def _load_run(path: Path) -> dict:
    cfg = json.loads((path / "config.json").read_text())
    rep = json.loads((path / "metrics_test.json").read_text())
    with open(path / "equity_test.csv", newline="") as fh:
        eq = list(csv.DictReader(fh))
    return {"model": cfg["model"], "indicators": bool(cfg["indicators"]), "seed": cfg["seed"],
            "metrics": rep, "dates": [r["date"] for r in eq],
            "asset": np.array([float(r["asset"]) for r in eq])}


def _group_label(model: str, indicators: bool) -> str:
    return f"{model.upper()} ({'with' if indicators else 'without'} indicators)"


def cmd_report(args) -> int:
    dirs = []
    for p in map(Path, args.runs):
        if (p / "metrics_test.json").exists():
            dirs.append(p)
        else:
            dirs += sorted(q.parent for q in p.glob("*/metrics_test.json"))
    if not dirs:
        raise FileNotFoundError("no run directories with metrics_test.json found")
    runs = [_load_run(d) for d in dirs]
    groups: dict = {}
    for r in runs:
        groups.setdefault((r["model"], r["indicators"]), []).append(r)
    keys = sorted(groups, key=lambda k: (k[0], not k[1]))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = {}
    with open(out / "summary_long.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model", "indicators", "metric", "mean", "min", "max", "n_seeds"])
        for key in keys:
            for m in metrics.COLUMNS:
                vals = [r["metrics"][m] for r in groups[key]]
                vals = np.array([v for v in vals if v != metrics.UNDEFINED], dtype=float)
                stats = (float(np.mean(vals)), float(np.min(vals)), float(np.max(vals))) if vals.size else None
                summary[key, m] = stats
                cells = [repr(s) for s in stats] if stats else [metrics.UNDEFINED] * 3
                w.writerow([key[0], str(key[1]).lower(), m, *cells, vals.size])
    with open(out / "table4.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["Backtest Indicators"] + [_group_label(*k) for k in keys])
        for m, label in metrics.COLUMNS.items():
            w.writerow([label] + [repr(summary[k, m][0]) if summary[k, m] else metrics.UNDEFINED
                                  for k in keys])
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model", "metric", "with_indicators", "without_indicators"])
        for model in sorted({k[0] for k in keys}):
            if (model, True) in groups and (model, False) in groups:
                for m in metrics.COLUMNS:
                    pair = [summary[(model, flag), m] for flag in (True, False)]
                    w.writerow([model, m] + [repr(p[0]) if p else metrics.UNDEFINED for p in pair])
    for key in keys:
        curves = [r["asset"] for r in groups[key]]
        n = min(len(c) for c in curves)
        rets = np.array([c[1:n] / c[:n - 1] - 1.0 for c in curves])
        dates = groups[key][0]["dates"][1:n]
        name = f"daily_returns_{key[0]}{'' if key[1] else '_noind'}.csv"
        with open(out / name, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["date", "mean", "min", "max"])
            for i, day in enumerate(dates):
                col = rets[:, i]
                w.writerow([day, repr(float(col.mean())), repr(float(col.min())), repr(float(col.max()))])
    return 0


def cmd_synth(args) -> int:
    synthetic_market(args.days, args.stocks, args.seed).to_csv(args.out)
    return 0


# -- parser ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mbnf", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("indicators", help="compute the seven technical indicators")
    p.add_argument("--prices", required=True)
    p.add_argument("--tickers", nargs="*")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_indicators)

    p = sub.add_parser("fit-stable", help="fit alpha-stable laws to daily price differences")
    p.add_argument("--prices", required=True)
    p.add_argument("--tickers", nargs="*")
    p.add_argument("--out", required=True)
    p.add_argument("--hist-dir")
    p.add_argument("--bins", type=int, default=60)
    p.set_defaults(func=cmd_fit_stable)

    p = sub.add_parser("train", help="train MBNF or MBPO agents")
    p.add_argument("--config", required=True)
    p.add_argument("--model", choices=("mbnf", "mbpo"))
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--no-indicators", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("backtest", help="metrics of an equity curve")
    p.add_argument("--equity", required=True)
    p.add_argument("--out-json")
    p.add_argument("--out-csv")
    p.set_defaults(func=cmd_backtest)

    p = sub.add_parser("causality", help="pattern-causality matrices and threshold graphs")
    p.add_argument("--prices", required=True)
    p.add_argument("--tickers", nargs="*")
    p.add_argument("--out", required=True)
    p.add_argument("--E", type=int, default=3)
    p.add_argument("--tau", type=int, default=1)
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--h", type=int, default=1)
    p.set_defaults(func=cmd_causality)

    p = sub.add_parser("sharpness", help="dominant Hessian eigenvalue per checkpoint")
    p.add_argument("--target", choices=("critic", "flow"), required=True)
    p.add_argument("--checkpoint", required=True, help="run directory or checkpoint directory")
    p.add_argument("--out", required=True)
    p.add_argument("--batch", type=int, default=256)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--max-iter", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_sharpness)

    p = sub.add_parser("export-buffer", help="dump env and model buffers to CSV")
    p.add_argument("--run", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_buffer)

    p = sub.add_parser("report", help="aggregate seed runs into comparison tables")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("synth", help="write a seeded synthetic market CSV")
    p.add_argument("--out", required=True)
    p.add_argument("--days", type=int, default=1000)
    p.add_argument("--stocks", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 3
    except (DataError, FileNotFoundError, ValueError, RuntimeError, FloatingPointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
