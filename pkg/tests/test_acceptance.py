"""Acceptance criteria, one test per criterion.

Each test records a PASS/FAIL line; the lines are printed together at the end
of the session (see ``conftest.pytest_terminal_summary``). Run alone with
``pytest tests/test_acceptance.py -v`` or ``python tests/test_acceptance.py``.
"""

import json
import math
import statistics
import sys
import time

import numpy as np
import pytest
from scipy import stats

from mbnf.analysis import sharpness
from mbnf.causality import pattern_causality
from mbnf.cli import main
from mbnf.data import split_dataset
from mbnf.env import TradingEnv, action_scale
from mbnf.flow import FlowModel, flow_fit, flow_forward, flow_inverse
from mbnf.loop import (LoopConfig, LoopSchedule, MarketData, agent_policy, evaluate, random_policy,
                       run_loop)
from mbnf.metrics import compute_metrics
from mbnf.nn import MLP, grad
from mbnf.sac import SacConfig
from mbnf.stable import StableParams, fit_stable, stable_sample
from mbnf.synthetic import synthetic_market

RESULTS = {}


def record(num, name, ok, detail):
    RESULTS[num] = f"criterion {num:2d} {'PASS' if ok else 'FAIL'}  {name}: {detail}"
    assert ok, RESULTS[num]


def rel_err(a, b):
    # the floor keeps roundoff on an all-zero gradient (dead ReLU units) from reading as a failure
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-4))


def central_diff(f, x, h=1e-6):
    return np.array([(f(x + e) - f(x - e)) / (2 * h) for e in np.eye(x.size) * h])


def random_flow(dim, seed, layers=4):
    m = FlowModel.create(dim, layers, (16, 16), identity=False)
    r = np.random.default_rng(seed)
    # biases drawn too: zero biases put every hidden unit of an input-free (1-D) coupling net on its kink
    m = m.with_params(r.normal(0.0, 0.3, size=m.params.size))
    m.mean, m.scale = r.normal(size=dim), r.uniform(0.5, 2.0, size=dim)
    return m


def test_01_flow_correctness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    worst_rt = 0.0
    for dim in (2, 4, 10):
        m = random_flow(dim, dim)
        x = rng.normal(size=(1000, dim)) * 2
        worst_rt = max(worst_rt, float(np.max(np.abs(flow_inverse(m, flow_forward(m, x)[0]) - x))))
    worst_ld = 0.0
    for dim in (2, 3, 4, 5, 6):
        m = random_flow(dim, 20 + dim)
        for x in rng.normal(size=(5, dim)):
            J = central_diff(lambda v: flow_forward(m, v)[0], x).T
            det = np.linalg.det(J)
            worst_ld = max(worst_ld, abs(np.exp(flow_forward(m, x)[1]) - det) / abs(det))
    secs = time.perf_counter() - t0
    record(1, "flow correctness", worst_rt < 1e-6 and worst_ld < 1e-4 and secs < 10,
           f"round-trip {worst_rt:.1e} (<1e-6), log-det rel {worst_ld:.1e} (<1e-4), {secs:.1f}s (<10s)")


def heldout_ll(model, x):
    return float(np.mean(model.log_prob(x)))


def test_02_density_recovery():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    train, held = rng.standard_normal((10_000, 2)), rng.standard_normal((10_000, 2))
    fit = flow_fit(FlowModel.create(2, 6, (64, 64), rng), train, epochs=20, batch=256, lr=1e-3, rng=rng)
    iid = heldout_ll(fit.model, held)
    chol = np.linalg.cholesky([[1.0, 0.9], [0.9, 1.0]])
    train, held = train @ chol.T, rng.standard_normal((10_000, 2)) @ chol.T
    fit = flow_fit(FlowModel.create(2, 6, (64, 64), rng), train, epochs=20, batch=256, lr=1e-3, rng=rng)
    mu, sd = train.mean(axis=0), train.std(axis=0)
    indep = float(np.mean(np.sum(stats.norm.logpdf(held, mu, sd), axis=1)))
    gap = heldout_ll(fit.model, held) - indep
    secs = time.perf_counter() - t0
    record(2, "density recovery", iid >= -2.95 and gap >= 0.5 and secs < 120,
           f"N(0,I) held-out {iid:.4f} (>=-2.95, optimum -2.8379), rho=0.9 gap {gap:.3f} nats (>=0.5), "
           f"{secs:.1f}s (<120s)")


def test_03_gradient_integrity():
    rng = np.random.default_rng(0)
    worst_net = worst_flow = 0.0
    for i in range(100):
        sizes = (int(rng.integers(1, 5)), *rng.integers(1, 6, size=int(rng.integers(0, 3))), int(rng.integers(1, 4)))
        net = MLP(tuple(int(s) for s in sizes), ["identity", "tanh"][i % 2])
        p = rng.normal(size=net.n_params)
        x, up = rng.normal(size=(3, sizes[0])), rng.normal(size=(3, sizes[-1]))
        gp, gx = grad(net, p, x, up)
        f = lambda q, xx: float(np.sum(up * net.forward(q, xx)))  # noqa: E731
        worst_net = max(worst_net, rel_err(gp, central_diff(lambda q: f(q, x), p)),
                        rel_err(gx.ravel(), central_diff(lambda v: f(p, v.reshape(x.shape)), x.ravel())))
        m = random_flow(int(rng.integers(1, 5)), 1000 + i, layers=2)
        data = rng.normal(size=(4, m.dim))
        _, g = m.nll_and_grad(data)
        # small step: with random weights some ReLU pre-activations sit within 1e-6 of their kink
        num = central_diff(lambda q: m.nll_and_grad(data, q)[0], m.params, h=1e-7)
        worst_flow = max(worst_flow, rel_err(g, num))
    record(3, "gradient integrity", worst_net < 1e-5 and worst_flow < 1e-5,
           f"max rel err net {worst_net:.1e}, flow NLL {worst_flow:.1e} (<1e-5, 100 instances)")


def test_04_environment_ledger():
    rng = np.random.default_rng(0)
    worst, negative = 0.0, 0
    for _ in range(1000):
        T, d = int(rng.integers(2, 40)), int(rng.integers(1, 5))
        prices = 10 * np.exp(np.cumsum(rng.normal(0, 0.05, size=(T, d)), axis=0))
        env = TradingEnv(prices, np.zeros((T, d, 7)), B0=rng.uniform(100, 1e6), cost_percentage=0.0)
        s = env.reset()
        start, total = s.asset, 0.0
        while not env.done(s):
            res = env.step(s, action_scale(rng.uniform(-1, 1, d)))
            s, total = res.next_state, total + res.reward
            negative += int(s.balance < 0 or np.any(s.holdings < 0))
        worst = max(worst, abs(s.asset - start - total))
    record(4, "environment ledger", worst < 1e-6 and negative == 0,
           f"max |Asset_T - Asset_0 - sum r| {worst:.1e} (<1e-6), negative B/W states {negative}")


def metric_oracle(curve):
    rets = [curve[i] / curve[i - 1] - 1 for i in range(1, len(curve))]
    cum = curve[-1] / curve[0] - 1
    ann = (1 + cum) ** (252 / len(rets)) - 1
    vol = statistics.stdev(rets) * math.sqrt(252)
    peak, mdd = curve[0], 0.0
    for v in curve:
        peak = max(peak, v)
        mdd = min(mdd, v / peak - 1)
    stab = stats.linregress(range(len(curve)), [math.log(v / curve[0]) for v in curve]).rvalue ** 2
    return [ann, cum, vol, ann / vol, ann / abs(mdd), stab, mdd]


def test_05_metrics_oracle():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(10, 600))
        curve = list(1e6 * np.exp(np.cumsum(np.r_[0, rng.normal(0.0002, 0.015, n - 1)])))
        m = compute_metrics(curve)
        got = [m.annualized_return, m.cumulative_return, m.annualized_volatility, m.sharpe, m.calmar,
               m.stability, m.max_drawdown]
        worst = max(worst, max(abs(a - b) / max(1.0, abs(b)) for a, b in zip(got, metric_oracle(curve))))
    fx = compute_metrics([100, 120, 90, 130])
    fixture_ok = fx.max_drawdown == -0.25 and abs(fx.cumulative_return - 0.30) < 1e-15
    record(5, "metrics oracle", worst < 1e-9 and fixture_ok,
           f"max deviation {worst:.1e} (<1e-9, 100 curves), fixture MDD {fx.max_drawdown}, "
           f"cumulative {fx.cumulative_return:.15f}")


def test_06_stable_round_trip():
    from matplotlib import cbook
    t0 = time.perf_counter()
    worst_a = worst_s = 0.0
    for i, alpha in enumerate((1.2, 1.5, 1.8, 2.0)):
        for j, beta in enumerate((-0.5, 0.0, 0.5)):
            p = StableParams(alpha, beta, 0.0, 1.0)
            fit = fit_stable(stable_sample(p, 50_000, np.random.default_rng(10 * i + j)))
            worst_a, worst_s = max(worst_a, abs(fit.alpha - alpha)), max(worst_s, abs(fit.sigma - 1.0))
    gauss = fit_stable(np.random.default_rng(0).standard_normal(50_000)).alpha
    goog = cbook.get_sample_data("goog.npz")["price_data"]["adj_close"]
    real = fit_stable(np.diff(goog)).alpha
    secs = time.perf_counter() - t0
    ok = worst_a <= 0.1 and worst_s <= 0.1 and gauss >= 1.9 and 1.2 <= real <= 1.8 and secs < 60
    record(6, "stable-law round trip", ok,
           f"grid max |alpha err| {worst_a:.3f} (<=0.1), max sigma rel err {worst_s:.3f} (<=0.1), "
           f"Gaussian alpha {gauss:.3f} (>=1.9), GOOG daily deltas alpha {real:.3f} (in [1.2,1.8]), {secs:.1f}s")


def test_07_causality_sanity():
    rng = np.random.default_rng(0)
    x = rng.normal(size=2000)
    same, mirror = pattern_causality(x, x), pattern_causality(x, -x)
    null = [pattern_causality(rng.normal(size=2000), rng.normal(size=2000)) for _ in range(20)]
    top = max(max(s.positive, s.negative) for s in null)
    ok = same.positive >= 0.9 and mirror.negative >= 0.9 and top < 0.45
    record(7, "causality sanity", ok,
           f"y=x positive {same.positive:.3f}, y=-x negative {mirror.negative:.3f} (>=0.9), "
           f"null max {top:.3f} (<0.45 over 20 reps)")


LEARN_SCHEDULE = LoopSchedule(total_steps=1500, refit_every=250, model_steps=200, updates_per_step=4,
                              warmup=250)


def learning_market():
    prices = synthetic_market(1000, 3, seed=0)
    return MarketData.build(prices, split_dataset(prices, prices.dates[749], prices.dates[799]))


def test_08_learning_signal():
    t0 = time.perf_counter()
    data = learning_market()
    test_env = data.env("test", LoopConfig())
    agent_ret, random_ret, mbpo_ret = [], [], []
    for seed in range(10):
        for kind, out in (("mbnf", agent_ret), ("mbpo", mbpo_ret)):
            cfg = LoopConfig(model=kind)
            res = run_loop(data, LEARN_SCHEDULE, seed, cfg)
            curve = evaluate(agent_policy(res.agent, res.normalizer), test_env)[0]
            out.append(compute_metrics(curve).cumulative_return)
        curve = evaluate(random_policy(3), test_env, 1, np.random.default_rng(seed))[0]
        random_ret.append(compute_metrics(curve).cumulative_return)
    p = stats.wilcoxon(agent_ret, random_ret, alternative="greater").pvalue
    secs = time.perf_counter() - t0
    ok = np.mean(agent_ret) > np.mean(random_ret) and p < 0.05 and len(mbpo_ret) == 10 and secs < 1800
    record(8, "MBNF learning signal", ok,
           f"MBNF mean {np.mean(agent_ret):.4f} vs random {np.mean(random_ret):.4f}, one-sided Wilcoxon "
           f"p={p:.4f} (<0.05), MBPO completed {len(mbpo_ret)}/10 (mean {np.mean(mbpo_ret):.4f}), "
           f"{secs / 60:.1f} min for both")


TINY = LoopConfig(sac=SacConfig(hidden=(16,), batch=8), flow_layers=2, flow_hidden=(8,), model_batch=16,
                  ensemble_size=2, checkpoint_every_episode=False)


def test_09_schedule_law():
    prices = synthetic_market(300, 2, seed=3)
    data = MarketData.build(prices, split_dataset(prices, prices.dates[199], prices.dates[249]))
    rng = np.random.default_rng(0)
    mismatches = []
    for i in range(20):
        total = int(rng.integers(2, 40))
        s = LoopSchedule(total_steps=total, refit_every=int(rng.integers(1, total + 1)), model_steps=2,
                         updates_per_step=1, horizon=int(rng.integers(1, 4)), rollout_batch=int(rng.integers(1, 9)),
                         warmup=int(rng.integers(0, total + 1)), env_capacity=int(rng.integers(5, 60)),
                         agent_capacity=int(rng.integers(5, 60)))
        kind = ("mbnf", "mbpo")[i % 2]
        res = run_loop(data, s, i, LoopConfig(**{**TINY.__dict__, "model": kind}))
        if (len(res.env_buffer), len(res.agent_buffer)) != s.expected_sizes():
            mismatches.append(s)
    record(9, "loop schedule law", not mismatches,
           f"{20 - len(mismatches)}/20 random schedules match the counting formula")


def test_10_sharpness_oracle():
    rng = np.random.default_rng(0)
    worst = 0.0
    for dim in (2, 3, 5, 10, 20, 30, 50):
        for _ in range(3):
            m = rng.normal(size=(dim, dim))
            A = (m + m.T) / 2
            w = np.linalg.eigvalsh(A)
            dominant = w[np.argmax(np.abs(w))]
            loss = lambda p: 0.5 * p @ A @ p  # noqa: E731
            g = None if dim <= 5 else (lambda p: A @ p)
            res = sharpness(loss, rng.normal(size=dim), tol=1e-12, max_iter=20_000, grad=g)
            worst = max(worst, abs(res.lambda_max - dominant) / abs(dominant))
    fixture = sharpness(lambda p: 0.5 * (3 * p[0] ** 2 + p[1] ** 2), np.zeros(2)).lambda_max
    record(10, "sharpness oracle", worst < 1e-3 and abs(fixture - 3) < 1e-3,
           f"max rel err vs eigh {worst:.1e} (<1e-3, dims up to 50), diag(3,1) -> {fixture:.6f}")


TRAIN_CFG = {
    "synthetic": {"n_days": 200, "n_stocks": 2, "seed": 1},
    "schedule": {"total_steps": 40, "refit_every": 20, "model_steps": 5, "updates_per_step": 1,
                 "rollout_batch": 16, "warmup": 10},
    "sac": {"hidden": [16], "batch": 8},
    "flow_layers": 2, "flow_hidden": [8], "model_batch": 16, "ensemble_size": 2,
}


def test_11_determinism(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps(TRAIN_CFG))
    differing = []
    for model in ("mbnf", "mbpo"):
        for rep in ("a", "b"):
            assert main(["train", "--config", str(cfg), "--model", model, "--seed", "7",
                         "--out", str(tmp_path / f"{model}_{rep}")]) == 0
        a, b = tmp_path / f"{model}_a", tmp_path / f"{model}_b"
        for f in sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file()):
            if (a / f).read_bytes() != (b / f).read_bytes():
                differing.append(f"{model}/{f}")
    record(11, "determinism", not differing,
           "repeated train runs byte-identical (all files, mbnf and mbpo)" if not differing
           else f"differing files: {differing}")


def test_12_ablation_harness(tmp_path):
    runs = tmp_path / "runs"
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({**TRAIN_CFG, "seeds": [0, 1, 2], "out_dir": str(runs)}))
    codes = [main(["train", "--config", str(cfg)]), main(["train", "--config", str(cfg), "--no-indicators"]),
             main(["report", "--runs", str(runs), "--out", str(tmp_path / "report")])]
    rows = (tmp_path / "report" / "ablation.csv").read_text().splitlines() if codes == [0, 0, 0] else []
    paired = [r for r in rows[1:] if r.startswith("mbnf,")]
    noind_obs = np.load(runs / "mbnf_noind_seed0" / "buffers.npz")["env_obs"].shape[1]
    ok = codes == [0, 0, 0] and len(paired) == 7 and noind_obs == 1 + 2 * 2
    record(12, "ablation harness", ok,
           f"exit codes {codes}, {len(paired)} paired with/without metric rows (7 expected), "
           f"no-indicator observation width {noind_obs}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
