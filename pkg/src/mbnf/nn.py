"""Small fully-connected networks with hand-written reverse mode.

Everything is float64 and works on batches: inputs are ``(n, in)`` arrays
(1-D inputs are treated as a batch of one). Parameters live in one flat
vector so optimizers, checkpoints and curvature probes can treat a network
as a point in R^p.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

_ACTIVATIONS = ("identity", "tanh", "relu")


class NonFiniteError(FloatingPointError):
    """Raised when a gradient, loss or intermediate value stops being finite."""


@dataclass(frozen=True)
class MLP:
    """Layer widths plus activations; holds no parameters itself.

    Hidden layers use ReLU. The output activation is ``identity`` or ``tanh``.
    """

    sizes: tuple[int, ...]
    out_act: str = "identity"

    def __post_init__(self):
        object.__setattr__(self, "sizes", tuple(int(s) for s in self.sizes))
        if len(self.sizes) < 2:
            raise ValueError("an MLP needs at least an input and an output width")
        if any(s < 0 for s in self.sizes) or any(s == 0 for s in self.sizes[1:]):
            raise ValueError(f"bad layer widths {self.sizes}")
        if self.out_act not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.out_act!r}")

    @property
    def n_in(self) -> int:
        return self.sizes[0]

    @property
    def n_out(self) -> int:
        return self.sizes[-1]

    @property
    def n_params(self) -> int:
        return sum(a * b + b for a, b in zip(self.sizes[:-1], self.sizes[1:]))

    def layout(self) -> list[tuple[int, int, int]]:
        """(offset, fan_in, fan_out) for each layer; weights first, then bias."""
        return self._layout

    @cached_property
    def _layout(self) -> list[tuple[int, int, int]]:
        out, off = [], 0
        for a, b in zip(self.sizes[:-1], self.sizes[1:]):
            out.append((off, a, b))
            off += a * b + b
        return out

    def unpack(self, params: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        if params.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got shape {params.shape}")
        layers = []
        for off, a, b in self.layout():
            W = params[off:off + a * b].reshape(a, b)
            layers.append((W, params[off + a * b:off + a * b + b]))
        return layers

    def init(self, rng: np.random.Generator, zero_output: bool = False) -> np.ndarray:
        """Kaiming-uniform hidden layers, U(+-1/sqrt(fan_in)) output layer, zero biases."""
        params = np.zeros(self.n_params)
        layout = self.layout()
        for i, (off, a, b) in enumerate(layout):
            if a == 0:
                continue
            last = i == len(layout) - 1
            if last and zero_output:
                continue
            bound = 1.0 / np.sqrt(a) if last else np.sqrt(6.0 / a)
            params[off:off + a * b] = rng.uniform(-bound, bound, size=a * b)
        return params

    def forward(self, params: np.ndarray, x: np.ndarray, keep: bool = False):
        """Evaluate the network; with ``keep=True`` also return the backward cache."""
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        h = x[None, :] if single else x
        if h.shape[-1] != self.n_in:
            raise ValueError(f"input width {h.shape[-1]} != {self.n_in}")
        layers = self.unpack(params)
        cache = [h]
        for i, (W, b) in enumerate(layers):
            z = h @ W + b
            if i < len(layers) - 1:
                h = np.maximum(z, 0.0)
            elif self.out_act == "tanh":
                h = np.tanh(z)
            elif self.out_act == "relu":
                h = np.maximum(z, 0.0)
            else:
                h = z
            cache.append(h)
        y = h[0] if single else h
        return (y, (single, cache)) if keep else y

    def backward(self, params: np.ndarray, cache, upstream: np.ndarray):
        """Vector-Jacobian product: returns (d<upstream, y>/dparams, d.../dx)."""
        single, acts = cache
        g = np.asarray(upstream, dtype=float)
        if single:
            g = g[None, :]
        if g.shape != acts[-1].shape:
            raise ValueError(f"upstream shape {g.shape} != output shape {acts[-1].shape}")
        layers = self.unpack(params)
        layout = self._layout
        grads = np.zeros(self.n_params)
        n_layers = len(layers)
        for i in range(n_layers - 1, -1, -1):
            W, _ = layers[i]
            out = acts[i + 1]
            if i < n_layers - 1 or self.out_act == "relu":
                # subgradient of ReLU at 0 is 0
                g = g * (out > 0.0)
            elif self.out_act == "tanh":
                g = g * (1.0 - out * out)
            off, a, b = layout[i]
            grads[off:off + a * b] = (acts[i].T @ g).ravel()
            grads[off + a * b:off + a * b + b] = g.sum(axis=0)
            g = g @ W.T
        return grads, (g[0] if single else g)


def forward(net: MLP, params: np.ndarray, x: np.ndarray) -> np.ndarray:
    return net.forward(params, x)


def grad(net: MLP, params: np.ndarray, x: np.ndarray, upstream: np.ndarray):
    """Gradient of <upstream, forward(x)> w.r.t. parameters and input."""
    _, cache = net.forward(params, x, keep=True)
    return net.backward(params, cache, upstream)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)

    def copy(self) -> "AdamState":
        return AdamState(self.m.copy(), self.v.copy(), self.t)


def opt_step(kind: str, params: np.ndarray, grads: np.ndarray, lr: float,
             state: AdamState | None = None, betas=(0.9, 0.999), eps: float = 1e-8):
    """One optimizer update. Returns ``(new_params, new_state)``; inputs are not mutated.

    ``kind`` is ``"sgd"`` (theta - lr * g) or ``"adam"``.
    """
    grads = np.asarray(grads, dtype=float)
    if grads.shape != params.shape:
        raise ValueError(f"gradient shape {grads.shape} != parameter shape {params.shape}")
    if not np.all(np.isfinite(grads)):
        raise NonFiniteError("non-finite gradient")
    if kind == "sgd":
        return params - lr * grads, state
    if kind != "adam":
        raise ValueError(f"unknown optimizer {kind!r}")
    if state is None:
        state = AdamState.zeros(params.size)
    b1, b2 = betas
    t = state.t + 1
    m = b1 * state.m + (1 - b1) * grads
    v = b2 * state.v + (1 - b2) * grads * grads
    m_hat = m / (1 - b1 ** t)
    v_hat = v / (1 - b2 ** t)
    return params - lr * m_hat / (np.sqrt(v_hat) + eps), AdamState(m, v, t)


def save_params(path, params: np.ndarray, meta: dict | None = None) -> None:
    """Write ``path`` (u64 LE length + f64 LE values) and ``path.json`` sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    flat = np.ascontiguousarray(params, dtype="<f8").ravel()
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", flat.size))
        fh.write(flat.tobytes())
    sidecar = Path(str(path) + ".json")
    sidecar.write_text(json.dumps(meta or {}, indent=2, sort_keys=True))


def load_params(path) -> tuple[np.ndarray, dict]:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 8:
        raise ValueError(f"{path}: truncated checkpoint")
    (n,) = struct.unpack("<Q", raw[:8])
    if len(raw) != 8 + 8 * n:
        raise ValueError(f"{path}: header says {n} values, file holds {(len(raw) - 8) / 8}")
    params = np.frombuffer(raw[8:], dtype="<f8").astype(float)
    sidecar = Path(str(path) + ".json")
    meta = json.loads(sidecar.read_text()) if sidecar.exists() else {}
    return params, meta


def mlp_meta(net: MLP) -> dict:
    return {"sizes": list(net.sizes), "out_act": net.out_act, "hidden_act": "relu"}


def mlp_from_meta(meta: dict) -> MLP:
    return MLP(tuple(meta["sizes"]), meta.get("out_act", "identity"))
