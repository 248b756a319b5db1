import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mbnf.analysis import export_buffer, read_buffer, sharpness
from mbnf.loop import ReplayBuffer


def quad(A):
    return (lambda p: 0.5 * p @ A @ p), (lambda p: A @ p)


def test_diag_fixture():
    loss, grad = quad(np.diag([3.0, 1.0]))
    res = sharpness(loss, np.array([0.3, -0.2]))
    assert res.lambda_max == pytest.approx(3.0, abs=1e-3) and res.converged


def test_identity_hessian():
    loss, grad = quad(np.eye(4))
    assert sharpness(loss, np.ones(4), grad=grad).lambda_max == pytest.approx(1.0, abs=1e-3)


def random_sym(n, seed):
    r = np.random.default_rng(seed)
    m = r.normal(size=(n, n))
    return (m + m.T) / 2


@pytest.mark.parametrize("seed", range(5))
def test_random_5x5_against_eigh(seed):
    A = random_sym(5, seed)
    loss, grad = quad(A)
    w = np.linalg.eigvalsh(A)
    dominant = w[np.argmax(np.abs(w))]
    res = sharpness(loss, np.zeros(5), tol=1e-10, max_iter=5000, grad=grad)
    assert abs(res.lambda_max - dominant) <= 1e-3 * abs(dominant)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.1, 10))
def test_scaling_linearity(seed, c):
    A = random_sym(4, seed) + 6 * np.eye(4)  # positive definite: no sign ambiguity
    loss, grad = quad(A)
    base = sharpness(None, np.zeros(4), tol=1e-10, max_iter=5000, grad=grad).lambda_max
    scaled = sharpness(None, np.zeros(4), tol=1e-10, max_iter=5000, grad=lambda p: c * grad(p)).lambda_max
    assert scaled == pytest.approx(c * base, rel=1e-6)


def test_iteration_count_independent_after_convergence():
    A = np.diag([5.0, 2.0, 1.0])
    _, grad = quad(A)
    a = sharpness(None, np.zeros(3), tol=1e-9, max_iter=2000, grad=grad)
    b = sharpness(None, np.zeros(3), tol=1e-9, max_iter=4000, grad=grad)
    assert a.converged and abs(a.lambda_max - b.lambda_max) <= 1e-9 * 5


def test_non_convergence_flagged():
    _, grad = quad(np.diag([1.0, 0.999]))
    res = sharpness(None, np.zeros(2), tol=1e-14, max_iter=3, grad=grad)
    assert not res.converged and res.iterations == 3


def test_needs_loss_or_grad():
    with pytest.raises(ValueError):
        sharpness(None, np.zeros(2))


def filled(kind, n, seed):
    r = np.random.default_rng(seed)
    buf = ReplayBuffer(10, 3, 2, kind)
    for _ in range(n):
        buf.add(r.normal(size=3), r.uniform(-1, 1, 2), r.normal(size=3), r.normal())
    return buf


def test_export_counts_and_round_trip(tmp_path):
    env, model = filled("env", 3, 0), filled("model", 2, 1)
    assert export_buffer(tmp_path / "b.csv", env, model) == 5
    back = read_buffer(tmp_path / "b.csv")
    assert list(back["kind"]) == ["real"] * 3 + ["model"] * 2
    assert np.allclose(back["delta"], back["obs_next"] - back["obs"], atol=1e-12)
    for key, n in (("obs", 3), ("act", 2), ("obs_next", 3), ("rew", None)):
        want = np.concatenate([env.arrays()[key], model.arrays()[key]])
        assert np.max(np.abs(back[key] - want)) <= 1e-12
    header = (tmp_path / "b.csv").read_text().splitlines()[0].split(",")
    assert header[:4] == ["kind", "s_0", "s_1", "s_2"] and header[-1] == "delta_2"


def test_export_rejects_empty(tmp_path):
    with pytest.raises(ValueError):
        export_buffer(tmp_path / "b.csv", ReplayBuffer(2, 3, 2), ReplayBuffer(2, 3, 2))
