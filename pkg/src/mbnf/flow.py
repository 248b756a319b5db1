"""Real-NVP affine coupling flow with exact log-likelihood.

Each coupling layer keeps one block of coordinates fixed and maps the other
block ``xb -> xb * exp(s(xa)) + t(xa)``. Consecutive layers swap which block
is held fixed. Data are standardized per dimension before entering the flow
and the standardization's log-Jacobian is part of ``log_prob``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .nn import MLP, AdamState, NonFiniteError, load_params, opt_step, save_params

log = logging.getLogger(__name__)

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class Coupling:
    """Index bookkeeping for one coupling layer; the nets live in FlowModel.params."""

    dim: int
    parity: int
    s_net: MLP
    t_net: MLP

    @property
    def n_pass(self) -> int:
        return self.dim // 2

    @property
    def pass_idx(self) -> np.ndarray:
        d = self.n_pass
        return np.arange(d) if self.parity == 0 else np.arange(self.dim - d, self.dim)

    @property
    def trans_idx(self) -> np.ndarray:
        d = self.n_pass
        return np.arange(d, self.dim) if self.parity == 0 else np.arange(self.dim - d)


@dataclass
class FlowModel:
    dim: int
    layers: list[Coupling]
    params: np.ndarray
    mean: np.ndarray
    scale: np.ndarray
    s_clamp: float = 5.0
    hidden: tuple[int, ...] = (64, 64)
    _slices: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        self._slices = []
        off = 0
        for layer in self.layers:
            ns, nt = layer.s_net.n_params, layer.t_net.n_params
            self._slices.append((slice(off, off + ns), slice(off + ns, off + ns + nt)))
            off += ns + nt
        if self.params.shape != (off,):
            raise ValueError(f"flow expects {off} parameters, got {self.params.shape}")

    @classmethod
    def create(cls, dim: int, n_layers: int = 6, hidden=(64, 64), rng=None,
               s_clamp: float = 5.0, identity: bool = True) -> "FlowModel":
        """Build a flow; ``identity=True`` zero-initializes every s/t output layer."""
        if dim < 1 or n_layers < 1:
            raise ValueError("need dim >= 1 and n_layers >= 1")
        rng = np.random.default_rng(0) if rng is None else rng
        layers, chunks = [], []
        for i in range(n_layers):
            parity = i % 2
            n_pass = dim // 2
            n_trans = dim - n_pass
            s_net = MLP((n_pass, *hidden, n_trans))
            t_net = MLP((n_pass, *hidden, n_trans))
            layers.append(Coupling(dim, parity, s_net, t_net))
            chunks += [s_net.init(rng, zero_output=identity), t_net.init(rng, zero_output=identity)]
        return cls(dim, layers, np.concatenate(chunks), np.zeros(dim), np.ones(dim),
                   s_clamp=s_clamp, hidden=tuple(hidden))

    def copy(self) -> "FlowModel":
        return FlowModel(self.dim, list(self.layers), self.params.copy(), self.mean.copy(),
                         self.scale.copy(), self.s_clamp, self.hidden)

    def with_params(self, params: np.ndarray) -> "FlowModel":
        return FlowModel(self.dim, list(self.layers), np.asarray(params, dtype=float),
                         self.mean, self.scale, self.s_clamp, self.hidden)

    # -- core maps on standardized coordinates ------------------------------

    def _scale_shift(self, i: int, xa: np.ndarray, params: np.ndarray, keep: bool = False):
        layer = self.layers[i]
        ss, ts = self._slices[i]
        if keep:
            raw, s_cache = layer.s_net.forward(params[ss], xa, keep=True)
            t, t_cache = layer.t_net.forward(params[ts], xa, keep=True)
        else:
            raw = layer.s_net.forward(params[ss], xa)
            t = layer.t_net.forward(params[ts], xa)
        th = np.tanh(raw / self.s_clamp)
        s = self.s_clamp * th
        if keep:
            return s, t, (th, s_cache, t_cache)
        return s, t

    def _forward(self, x: np.ndarray, params: np.ndarray, keep: bool = False):
        z = np.array(x, dtype=float, copy=True)
        log_det = np.zeros(z.shape[0])
        caches = []
        for i, layer in enumerate(self.layers):
            pi, ti = layer.pass_idx, layer.trans_idx
            xa, xb = z[:, pi], z[:, ti]
            if keep:
                s, t, c = self._scale_shift(i, xa, params, keep=True)
            else:
                s, t = self._scale_shift(i, xa, params)
            es = np.exp(s)
            z[:, ti] = xb * es + t
            log_det += s.sum(axis=1)
            if keep:
                caches.append((xb, es, c))
        if not np.all(np.isfinite(z)) or not np.all(np.isfinite(log_det)):
            raise NonFiniteError("non-finite value in flow forward pass")
        return (z, log_det, caches) if keep else (z, log_det)

    def _inverse(self, z: np.ndarray, params: np.ndarray) -> np.ndarray:
        x = np.array(z, dtype=float, copy=True)
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            pi, ti = layer.pass_idx, layer.trans_idx
            s, t = self._scale_shift(i, x[:, pi], params)
            x[:, ti] = (x[:, ti] - t) * np.exp(-s)
        if not np.all(np.isfinite(x)):
            raise NonFiniteError("non-finite value in flow inverse pass")
        return x

    # -- public API -----------------------------------------------------------

    def standardize(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=float) - self.mean) / self.scale

    def destandardize(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=float) * self.scale + self.mean

    def forward(self, x: np.ndarray):
        """Map data to latent space. Returns (z, log_det) including standardization."""
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        xs = self.standardize(x[None] if single else x)
        z, ld = self._forward(xs, self.params)
        ld = ld - np.log(self.scale).sum()
        return (z[0], float(ld[0])) if single else (z, ld)

    def inverse(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        single = z.ndim == 1
        x = self.destandardize(self._inverse(z[None] if single else z, self.params))
        return x[0] if single else x

    def log_prob(self, x: np.ndarray):
        z, ld = self.forward(x)
        sq = np.sum(np.square(z), axis=-1)
        return -0.5 * self.dim * LOG_2PI - 0.5 * sq + ld

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if n < 1:
            raise ValueError("n must be >= 1")
        return self.inverse(rng.standard_normal((n, self.dim)))

    def nll_and_grad(self, x: np.ndarray, params: np.ndarray | None = None):
        """Mean negative log-likelihood of rows of ``x`` and its parameter gradient."""
        params = self.params if params is None else params
        xs = self.standardize(np.atleast_2d(x))
        n = xs.shape[0]
        z, ld, caches = self._forward(xs, params, keep=True)
        nll = (0.5 * self.dim * LOG_2PI + 0.5 * np.sum(z * z, axis=1) - ld).mean()
        nll += np.log(self.scale).sum()
        grads = np.zeros_like(params)
        g = z / n
        g_ld = -1.0 / n
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            pi, ti = layer.pass_idx, layer.trans_idx
            xb, es, (th, s_cache, t_cache) = caches[i]
            ss, ts = self._slices[i]
            g_zb = g[:, ti]
            g_s = g_zb * xb * es + g_ld
            g_raw = g_s * (1.0 - th * th)
            gp_s, gx_s = layer.s_net.backward(params[ss], s_cache, g_raw)
            gp_t, gx_t = layer.t_net.backward(params[ts], t_cache, g_zb)
            grads[ss] = gp_s
            grads[ts] = gp_t
            g_new = np.empty_like(g)
            g_new[:, ti] = g_zb * es
            g_new[:, pi] = g[:, pi] + gx_s + gx_t
            g = g_new
        if not np.isfinite(nll):
            raise NonFiniteError("non-finite flow loss")
        return float(nll), grads

    def fit_standardization(self, data: np.ndarray, floor: float = 1e-3) -> None:
        data = np.asarray(data, dtype=float)
        self.mean = data.mean(axis=0)
        self.scale = np.maximum(data.std(axis=0), floor)

    def meta(self) -> dict:
        return {"kind": "realnvp", "dim": self.dim, "n_layers": len(self.layers),
                "hidden": list(self.hidden), "s_clamp": self.s_clamp,
                "mask": "alternating halves, pass-through size floor(D/2)",
                "mean": self.mean.tolist(), "scale": self.scale.tolist()}

    def save(self, path) -> None:
        save_params(path, self.params, self.meta())

    @classmethod
    def load(cls, path) -> "FlowModel":
        params, meta = load_params(path)
        model = cls.create(meta["dim"], meta["n_layers"], tuple(meta["hidden"]), s_clamp=meta["s_clamp"])
        model = model.with_params(params)
        model.mean = np.asarray(meta["mean"], dtype=float)
        model.scale = np.asarray(meta["scale"], dtype=float)
        return model


def flow_forward(model: FlowModel, x):
    return model.forward(x)


def flow_inverse(model: FlowModel, z):
    return model.inverse(z)


def log_prob(model: FlowModel, x):
    return model.log_prob(x)


def flow_sample(model: FlowModel, n: int, rng: np.random.Generator):
    return model.sample(n, rng)


@dataclass
class FitResult:
    model: FlowModel
    curve: list[float]
    opt_state: AdamState | None = None


def flow_fit(model: FlowModel, data: np.ndarray, epochs: int = 50, batch: int = 256,
             lr: float = 1e-3, rng: np.random.Generator | None = None,
             standardize: bool = True, opt_state: AdamState | None = None,
             max_steps: int | None = None) -> FitResult:
    """Maximize mean log-likelihood with minibatch Adam.

    Returns the trained copy of ``model`` and the per-epoch mean log-likelihood
    (averaged over that epoch's minibatches). ``max_steps`` caps the total number
    of gradient steps, which is how the training loop asks for exactly N updates.
    """
    data = np.asarray(data, dtype=float)
    if data.ndim != 2 or data.shape[1] != model.dim:
        raise ValueError(f"data must be (n, {model.dim})")
    n = data.shape[0]
    if not 1 <= batch <= n:
        raise ValueError(f"need n >= batch >= 1 (n={n}, batch={batch})")
    rng = np.random.default_rng(0) if rng is None else rng
    model = model.copy()
    if standardize:
        model.fit_standardization(data)
    params = model.params
    state = opt_state.copy() if opt_state is not None else AdamState.zeros(params.size)
    curve = []
    steps = 0
    for _ in range(epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n - batch + 1, batch):
            idx = order[start:start + batch]
            try:
                loss, g = model.nll_and_grad(data[idx], params)
                params, state = opt_step("adam", params, g, lr, state)
            except NonFiniteError as exc:
                raise NonFiniteError(f"flow training diverged at step {steps}: {exc}") from exc
            losses.append(loss)
            steps += 1
            if max_steps is not None and steps >= max_steps:
                break
        curve.append(-float(np.mean(losses)))
        if max_steps is not None and steps >= max_steps:
            break
    model.params = params
    return FitResult(model, curve, state)


def write_curve(path, curve) -> None:
    path = Path(path)
    with open(path, "w") as fh:
        fh.write("epoch,mean_loglik\n")
        for i, v in enumerate(curve):
            fh.write(f"{i},{v!r}\n")


def topology_json(model: FlowModel) -> str:
    return json.dumps(model.meta(), indent=2, sort_keys=True)
