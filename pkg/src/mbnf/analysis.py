"""Loss-curvature probes and buffer export.

``sharpness`` estimates the dominant Hessian eigenvalue of a loss by power
iteration. Hessian-vector products are central differences of the gradient,
so only first-order derivatives are needed.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class SharpnessResult:
    lambda_max: float
    iterations: int
    residual: float
    converged: bool


def numeric_grad(loss, params: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    g = np.empty_like(params)
    for i in range(params.size):
        e = np.zeros_like(params)
        e[i] = eps
        g[i] = (loss(params + e) - loss(params - e)) / (2.0 * eps)
    return g


def hvp(grad, params: np.ndarray, v: np.ndarray, eps: float) -> np.ndarray:
    return (grad(params + eps * v) - grad(params - eps * v)) / (2.0 * eps)


def sharpness(loss=None, params=None, tol: float = 1e-6, max_iter: int = 1000, grad=None,
              rng: np.random.Generator | None = None) -> SharpnessResult:
    """Dominant (largest-magnitude) Hessian eigenvalue at ``params``, with its sign.

    ``grad`` maps parameters to the loss gradient; without it a central
    finite-difference gradient of ``loss`` is used. Stops when the relative
    change of the Rayleigh quotient drops below ``tol``; ``residual`` is
    ``||Hv - lambda v||`` for the final unit vector ``v``.
    """
    params = np.asarray(params, dtype=float)
    if grad is None:
        if loss is None:
            raise ValueError("need a loss or a gradient function")
        grad = lambda p: numeric_grad(loss, p)  # noqa: E731
    rng = np.random.default_rng(0) if rng is None else rng
    eps = 1e-4 * (1.0 + np.linalg.norm(params))
    v = rng.standard_normal(params.size)
    v /= np.linalg.norm(v)
    lam = 0.0
    hv = hvp(grad, params, v, eps)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        new_lam = float(v @ hv)
        norm = np.linalg.norm(hv)
        if norm == 0.0:
            lam, converged = 0.0, True
            break
        done = it > 1 and abs(new_lam - lam) <= tol * max(abs(new_lam), 1e-12)
        lam = new_lam
        if done:
            converged = True
            break
        v = hv / norm
        hv = hvp(grad, params, v, eps)
    residual = float(np.linalg.norm(hv - lam * v))
    return SharpnessResult(lam, it, residual, converged)


# -- buffer export ----------------------------------------------------------------


def _header(obs_size: int, act_size: int) -> list[str]:
    return (["kind"] + [f"s_{i}" for i in range(obs_size)] + [f"a_{i}" for i in range(act_size)]
            + [f"s_next_{i}" for i in range(obs_size)] + ["r"]
            + [f"delta_{i}" for i in range(obs_size)])


def export_buffer(path, env_buffer, model_buffer) -> int:
    """Write both buffers as ``kind,s...,a...,s_next...,r,delta...`` rows.

    ``kind`` is ``real`` for env rows and ``model`` for rollout rows; ``delta``
    is ``s_next - s``. Returns the number of rows written.
    """
    parts = [("real", env_buffer.arrays()), ("model", model_buffer.arrays())]
    total = sum(len(a["rew"]) for _, a in parts)
    if total == 0:
        raise ValueError("both buffers are empty")
    obs_size, act_size = env_buffer.obs.shape[1], env_buffer.act.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(_header(obs_size, act_size))
        for kind, a in parts:
            delta = a["obs_next"] - a["obs"]
            for i in range(len(a["rew"])):
                w.writerow([kind] + [repr(float(x)) for x in a["obs"][i]]
                           + [repr(float(x)) for x in a["act"][i]]
                           + [repr(float(x)) for x in a["obs_next"][i]] + [repr(float(a["rew"][i]))]
                           + [repr(float(x)) for x in delta[i]])
    return total


def read_buffer(path) -> dict:
    """Parse an exported buffer back into arrays (plus the ``kind`` column)."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = list(reader)
    obs_size = sum(h.startswith("s_") and not h.startswith("s_next_") for h in header)
    act_size = sum(h.startswith("a_") for h in header)
    vals = np.array([[float(x) for x in r[1:]] for r in rows]).reshape(len(rows), -1)
    o = 0
    out = {"kind": np.array([r[0] for r in rows])}
    for name, size in (("obs", obs_size), ("act", act_size), ("obs_next", obs_size), ("rew", 1),
                       ("delta", obs_size)):
        out[name] = vals[:, o:o + size]
        o += size
    out["rew"] = out["rew"][:, 0]
    return out
