from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mbnf.dynamics import (PRICE_FLOOR, NfDynamics, advance, ens_fit, ens_predict, fit_ensemble_pairs,
                           history_batch, model_rollout, nf_dyn_fit, nf_dyn_predict, price_deltas)
from mbnf.env import reset
from mbnf.flow import FlowModel


class ZeroDraws:
    """Generator stand-in whose normal draws are all zero."""

    def standard_normal(self, shape):
        return np.zeros(shape)

    def integers(self, lo, hi, size=None):
        return np.zeros(size, dtype=int)


def forced(delta):
    """Identity flow shifted to ``delta``: a zero base draw yields exactly ``delta``."""
    delta = np.atleast_1d(np.asarray(delta, dtype=float))
    flow = FlowModel.create(delta.size, 2, (4,))
    flow.mean = delta
    return NfDynamics(flow, np.ones((3, delta.size)))


def state_at(price, holdings=0, balance=1000.0):
    s = reset(np.full((2, 1), float(price)), np.zeros((2, 1, 7)), 0, balance)
    return type(s)(s.balance, s.prices, np.array([holdings]), s.indicators, 0)


def test_zero_delta_no_op():
    tr = nf_dyn_predict(forced(0.0), state_at(10.0), [0], ZeroDraws(), indicators=False)
    assert tr.s_next[1] == 10.0 and tr.r == 0.0


def test_mark_to_market_gain():
    tr = nf_dyn_predict(forced(2.0), state_at(10.0, holdings=5), [0], ZeroDraws(), cost_pct=0.0,
                        indicators=False)
    assert tr.s_next[1] == 12.0 and tr.r == 10.0


def test_price_floor():
    tr = nf_dyn_predict(forced(-1.0), state_at(0.5), [0], ZeroDraws(), indicators=False)
    assert tr.s_next[1] == PRICE_FLOOR


def test_constant_prices_give_tight_samples():
    dyn = nf_dyn_fit(np.full((200, 2), 5.0), np.random.default_rng(0), epochs=3, batch=64)
    s = dyn.sample_deltas(5000, np.random.default_rng(1))
    assert np.all(s.std(axis=0) < 0.05)


def test_recovers_delta_mean():
    rng = np.random.default_rng(0)
    prices = 50 + np.cumsum(rng.normal(0.1, 0.2, size=(4001, 1)), axis=0)
    dyn = nf_dyn_fit(prices, rng, epochs=8, batch=256, n_layers=4, hidden=(16, 16))
    assert dyn.sample_deltas(100_000, rng).mean() == pytest.approx(np.diff(prices[:, 0]).mean(), abs=0.02)
    assert abs(np.diff(prices[:, 0]).mean() - 0.1) < 0.01


def test_refit_is_deterministic():
    prices = 10 + np.cumsum(np.random.default_rng(2).normal(size=(100, 2)), axis=0) * 0.1
    a = nf_dyn_fit(prices, np.random.default_rng(7), epochs=2, batch=32)
    b = nf_dyn_fit(prices, np.random.default_rng(7), epochs=2, batch=32)
    assert np.array_equal(a.flow.params, b.flow.params)


def test_flow_trains_on_first_differences(monkeypatch):
    import mbnf.dynamics as dyn_mod
    seen = {}
    real = dyn_mod.flow_fit

    def spy(model, data, **kw):
        seen["data"] = data
        return real(model, data, **kw)
    monkeypatch.setattr(dyn_mod, "flow_fit", spy)
    prices = np.random.default_rng(0).uniform(5, 10, size=(30, 3))
    nf_dyn_fit(prices, epochs=1, batch=8)
    assert np.array_equal(seen["data"], np.diff(prices, axis=0))
    with pytest.raises(ValueError):
        price_deltas(prices[:1])


def test_ensemble_learns_constant_delta():
    prices = 10 + 0.5 * np.arange(300.0)[:, None] * np.ones((1, 2))
    ens = ens_fit(prices, np.random.default_rng(0), steps=300, batch=64, n_members=3, hidden=(16,))
    for k in range(ens.size):
        mu, _ = ens.member_output(k, np.array([[0.5, 0.5]]))
        assert np.all(np.abs(mu - 0.5) < 0.01)


def test_single_member_zero_noise_is_deterministic():
    rng = np.random.default_rng(0)
    prices = 10 + np.cumsum(rng.normal(size=(60, 1)), axis=0) * 0.1
    ens = ens_fit(prices, rng, steps=20, batch=16, n_members=1, hidden=(8,))
    s = state_at(prices[-1, 0])
    a = ens_predict(ens, s, [1], np.random.default_rng(1), noise_scale=0.0, indicators=False)
    b = ens_predict(ens, s, [1], np.random.default_rng(2), noise_scale=0.0, indicators=False)
    assert np.array_equal(a.s_next, b.s_next) and a.r == b.r


def test_members_differ():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(100, 2))
    ens = fit_ensemble_pairs(x, x + 1, rng, steps=10, batch=16, n_members=2, hidden=(8,))
    assert not np.array_equal(ens.members[0], ens.members[1])
    with pytest.raises(ValueError):
        fit_ensemble_pairs(np.zeros((0, 2)), np.zeros((0, 2)))


def test_ensemble_nll_near_generating_law():
    rng = np.random.default_rng(0)
    deltas = rng.normal([0.2, -0.1], [0.5, 1.5], size=(6001, 2))
    ens = fit_ensemble_pairs(deltas[:4000], deltas[1:4001], rng, steps=1500, batch=256, lr=3e-3,
                             n_members=2, hidden=(32,))
    held = deltas[4001:]
    exact = np.sum(0.5 * np.log(2 * np.pi * np.e * np.array([0.5, 1.5]) ** 2))
    assert abs(ens.loss(held) - exact) < 0.1


def make_start(n, price=10.0, window=5):
    close = np.full((n + 1, 1), price)
    return history_batch(close, close, close, np.full(n, n), np.full(n, 1000.0), np.zeros((n, 1)),
                         window=window)


def test_rollout_counts_and_chains():
    dyn = forced(0.3)
    out = model_rollout(dyn, lambda obs: np.zeros((len(obs), 1)), make_start(32), 1,
                        np.random.default_rng(0), indicators=False)
    assert len(out) == 32 and out.kind == "model"
    out = model_rollout(dyn, lambda obs: np.full((len(obs), 1), 0.05), make_start(4), 3,
                        np.random.default_rng(0), indicators=False)
    for c in range(4):
        rows = np.nonzero(out.chain == c)[0]
        for i, j in zip(rows[:-1], rows[1:]):
            assert np.array_equal(out.obs[j], out.obs_next[i])


def test_rollout_hand_arithmetic():
    # buy 5 shares per step at cost 0 while the price rises by 1 each day
    out = model_rollout(forced(1.0), lambda obs: np.full((len(obs), 1), 0.05), make_start(2), 3,
                        ZeroDraws(), cost_pct=0.0, indicators=False)
    expected = np.tile([5.0, 10.0, 15.0], 2)  # holdings after each buy times the +1 move
    assert np.allclose(out.rew, expected)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31))
def test_predicted_states_stay_valid(seed):
    r = np.random.default_rng(seed)
    n, d = 8, 2
    close = r.uniform(0.05, 3, size=(10, d))
    batch = history_batch(close, close, close, np.full(n, 9), r.uniform(0, 500, n),
                          r.integers(0, 50, size=(n, d)).astype(float), window=5)
    for _ in range(4):
        batch, _, _, _ = advance(batch, r.integers(-100, 101, size=(n, d)), r.normal(0, 2, size=(n, d)),
                                 0.01, indicators=False)
        assert np.all(batch.balance >= 0) and np.all(batch.holdings >= 0)
        assert np.all(batch.prices >= PRICE_FLOOR)


def test_predict_recomputes_indicators():
    hist = np.linspace(10, 20, 130)[:, None]
    s = state_at(20.0)
    dyn = forced(1.0)
    tr = nf_dyn_predict(dyn, s, [0], ZeroDraws(), history=hist)
    assert tr.s_next.shape == (1 + 1 + 1 + 7,)
    # SMA30 of the extended window
    ext = np.append(hist[1:, 0], 21.0)
    assert tr.s_next[3 + 1] == pytest.approx(ext[-30:].mean())


def test_history_namespace_state_accepted():
    s = SimpleNamespace(balance=10.0, prices=np.array([2.0]), holdings=np.array([0]),
                        indicators=np.zeros((1, 7)))
    tr = nf_dyn_predict(forced(0.0), s, [0], ZeroDraws(), indicators=False)
    assert tr.s_next[0] == 10.0
