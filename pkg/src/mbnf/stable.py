"""Alpha-stable laws: characteristic function, sampling and quantile fitting.

Parameterization is the usual S1 form: for alpha != 1

    phi(u) = exp(-sigma^a |u|^a (1 - i beta sign(u) tan(pi a / 2)) + i mu u)

and for alpha == 1

    phi(u) = exp(-sigma |u| (1 + i beta (2/pi) sign(u) ln|u|) + i mu u).

With alpha = 2 the law is N(mu, 2 sigma^2).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.interpolate import RegularGridInterpolator


@dataclass(frozen=True)
class StableParams:
    alpha: float
    beta: float
    mu: float
    sigma: float

    def __post_init__(self):
        if not 0.0 < self.alpha <= 2.0:
            raise ValueError(f"alpha must lie in (0, 2], got {self.alpha}")
        if not -1.0 <= self.beta <= 1.0:
            raise ValueError(f"beta must lie in [-1, 1], got {self.beta}")
        if self.sigma < 0.0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")


def price_diff_series(prices) -> np.ndarray:
    """Day-over-day differences P[t+1] - P[t]."""
    p = np.asarray(prices, dtype=float)
    if p.shape[0] < 2:
        raise ValueError("need at least two prices")
    return np.diff(p, axis=0)


def stable_char_fn(params: StableParams, u):
    u = np.asarray(u, dtype=float)
    a, b, mu, s = params.alpha, params.beta, params.mu, params.sigma
    au = np.abs(u)
    if a != 1.0:
        expo = -(s ** a) * au ** a * (1.0 - 1j * b * np.sign(u) * np.tan(np.pi * a / 2.0))
    else:
        with np.errstate(divide="ignore", invalid="ignore"):
            logu = np.where(au > 0, np.log(np.where(au > 0, au, 1.0)), 0.0)
        expo = -s * au * (1.0 + 1j * b * (2.0 / np.pi) * np.sign(u) * logu)
    return np.exp(expo + 1j * mu * u)


def stable_sample(params: StableParams, n: int, rng: np.random.Generator) -> np.ndarray:
    """Chambers-Mallows-Stuck draws in the S1 parameterization."""
    if n < 1:
        raise ValueError("n must be >= 1")
    a, b, mu, s = params.alpha, params.beta, params.mu, params.sigma
    v = rng.uniform(-np.pi / 2.0, np.pi / 2.0, size=n)
    w = rng.standard_exponential(size=n)
    if a != 1.0:
        t = b * np.tan(np.pi * a / 2.0)
        shift = np.arctan(t) / a
        amp = (1.0 + t * t) ** (1.0 / (2.0 * a))
        x = (amp * np.sin(a * (v + shift)) / np.cos(v) ** (1.0 / a)
             * (np.cos(v - a * (v + shift)) / w) ** ((1.0 - a) / a))
        return s * x + mu
    half_pi = np.pi / 2.0
    x = (2.0 / np.pi) * ((half_pi + b * v) * np.tan(v)
                         - b * np.log((half_pi * w * np.cos(v)) / (half_pi + b * v)))
    out = s * x + mu
    if s > 0:
        out += (2.0 / np.pi) * b * s * np.log(s)
    return out


# McCulloch (1986) lookup tables.
# alpha and beta as functions of nu_alpha = (q95 - q05) / (q75 - q25) and
# nu_beta = (q95 + q05 - 2 q50) / (q95 - q05).
_NU_ALPHA = np.array([2.439, 2.5, 2.6, 2.7, 2.8, 3.0, 3.2, 3.5, 4.0, 5.0, 6.0, 8.0, 10.0, 15.0, 25.0])
_NU_BETA = np.array([0.0, 0.1, 0.2, 0.3, 0.5, 0.7, 1.0])
_ALPHA_TABLE = np.array([
    [2.000, 2.000, 2.000, 2.000, 2.000, 2.000, 2.000],
    [1.916, 1.924, 1.924, 1.924, 1.924, 1.924, 1.924],
    [1.808, 1.813, 1.829, 1.829, 1.829, 1.829, 1.829],
    [1.729, 1.730, 1.737, 1.745, 1.745, 1.745, 1.745],
    [1.664, 1.663, 1.663, 1.668, 1.676, 1.676, 1.676],
    [1.563, 1.560, 1.553, 1.548, 1.547, 1.547, 1.547],
    [1.484, 1.480, 1.471, 1.460, 1.448, 1.438, 1.438],
    [1.391, 1.386, 1.378, 1.364, 1.337, 1.318, 1.318],
    [1.279, 1.273, 1.266, 1.250, 1.210, 1.184, 1.150],
    [1.128, 1.121, 1.114, 1.101, 1.067, 1.027, 0.973],
    [1.029, 1.021, 1.014, 1.004, 0.974, 0.935, 0.874],
    [0.896, 0.892, 0.884, 0.883, 0.855, 0.823, 0.769],
    [0.818, 0.812, 0.806, 0.801, 0.780, 0.756, 0.691],
    [0.698, 0.695, 0.692, 0.689, 0.676, 0.656, 0.597],
    [0.593, 0.590, 0.588, 0.586, 0.579, 0.563, 0.513],
])
_BETA_TABLE = np.array([
    [0, 2.160, 1.000, 1.000, 1.000, 1.000, 1.000],
    [0, 1.592, 3.390, 1.000, 1.000, 1.000, 1.000],
    [0, 0.759, 1.800, 1.000, 1.000, 1.000, 1.000],
    [0, 0.482, 1.048, 1.694, 1.000, 1.000, 1.000],
    [0, 0.360, 0.760, 1.232, 2.229, 1.000, 1.000],
    [0, 0.253, 0.518, 0.823, 1.575, 1.000, 1.000],
    [0, 0.203, 0.410, 0.632, 1.244, 1.906, 1.000],
    [0, 0.165, 0.332, 0.499, 0.943, 1.560, 1.000],
    [0, 0.136, 0.271, 0.404, 0.689, 1.230, 2.195],
    [0, 0.109, 0.216, 0.323, 0.539, 0.827, 1.917],
    [0, 0.096, 0.190, 0.284, 0.472, 0.693, 1.759],
    [0, 0.082, 0.163, 0.243, 0.412, 0.601, 1.596],
    [0, 0.074, 0.147, 0.220, 0.377, 0.546, 1.482],
    [0, 0.064, 0.128, 0.191, 0.330, 0.478, 1.362],
    [0, 0.056, 0.112, 0.167, 0.285, 0.428, 1.274],
])
# scale and location tables, indexed by (alpha, |beta|)
_ALPHA_GRID = np.array([0.5, 0.6, 0.7, 0.8, 0.9, 1.0, 1.1, 1.2, 1.3, 1.4, 1.5, 1.6, 1.7, 1.8, 1.9, 2.0])
_BETA_GRID = np.array([0.0, 0.25, 0.5, 0.75, 1.0])
_NU_C_TABLE = np.array([
    [2.588, 3.073, 4.534, 6.636, 9.144],
    [2.337, 2.634, 3.542, 4.808, 6.247],
    [2.189, 2.392, 3.004, 3.844, 4.775],
    [2.098, 2.244, 2.676, 3.265, 3.912],
    [2.040, 2.149, 2.461, 2.886, 3.356],
    [2.000, 2.085, 2.311, 2.624, 2.973],
    [1.980, 2.040, 2.205, 2.435, 2.696],
    [1.965, 2.007, 2.125, 2.294, 2.491],
    [1.955, 1.984, 2.067, 2.188, 2.333],
    [1.946, 1.967, 2.022, 2.106, 2.211],
    [1.939, 1.952, 1.988, 2.045, 2.116],
    [1.933, 1.940, 1.962, 1.997, 2.043],
    [1.927, 1.930, 1.943, 1.961, 1.987],
    [1.921, 1.922, 1.927, 1.936, 1.947],
    [1.914, 1.915, 1.916, 1.918, 1.921],
    [1.908, 1.908, 1.908, 1.908, 1.908],
])
_NU_ZETA_TABLE = np.array([
    [0, -0.061, -0.279, -0.659, -1.198],
    [0, -0.078, -0.272, -0.581, -0.997],
    [0, -0.089, -0.262, -0.520, -0.853],
    [0, -0.096, -0.250, -0.469, -0.742],
    [0, -0.099, -0.237, -0.424, -0.652],
    [0, -0.098, -0.223, -0.380, -0.576],
    [0, -0.095, -0.208, -0.346, -0.508],
    [0, -0.090, -0.192, -0.310, -0.447],
    [0, -0.084, -0.173, -0.276, -0.390],
    [0, -0.075, -0.154, -0.241, -0.335],
    [0, -0.066, -0.134, -0.206, -0.283],
    [0, -0.056, -0.111, -0.170, -0.232],
    [0, -0.043, -0.088, -0.132, -0.179],
    [0, -0.030, -0.061, -0.092, -0.123],
    [0, -0.017, -0.032, -0.049, -0.064],
    [0, 0.000, 0.000, 0.000, 0.000],
])

_psi_alpha = RegularGridInterpolator((_NU_ALPHA, _NU_BETA), _ALPHA_TABLE)
_psi_beta = RegularGridInterpolator((_NU_ALPHA, _NU_BETA), _BETA_TABLE)
_phi_c = RegularGridInterpolator((_ALPHA_GRID, _BETA_GRID), _NU_C_TABLE)
_phi_zeta = RegularGridInterpolator((_ALPHA_GRID, _BETA_GRID), _NU_ZETA_TABLE)

MIN_SAMPLES = 100
ALPHA_FLOOR = 0.5


def fit_stable(samples) -> StableParams:
    """McCulloch quantile estimator.

    alpha and beta come from the tail/skew quantile ratios, the scale from the
    inter-quartile range, and the location from the median corrected for skew.
    alpha is clipped to [0.5, 2]; at alpha = 2 beta is reported as 0.
    """
    x = np.asarray(samples, dtype=float).ravel()
    x = x[np.isfinite(x)]
    if x.size < MIN_SAMPLES:
        raise ValueError(f"need at least {MIN_SAMPLES} samples, got {x.size}")
    q05, q25, q50, q75, q95 = np.percentile(x, [5, 25, 50, 75, 95])
    if q95 - q05 <= 0 or q75 - q25 <= 0:
        raise ValueError("degenerate sample: quantile spread is zero")
    nu_alpha = (q95 - q05) / (q75 - q25)
    nu_beta = (q95 + q05 - 2.0 * q50) / (q95 - q05)
    if nu_alpha < _NU_ALPHA[0]:
        alpha, beta = 2.0, 0.0
    else:
        pt = [[min(nu_alpha, _NU_ALPHA[-1]), min(abs(nu_beta), 1.0)]]
        alpha = float(np.clip(_psi_alpha(pt)[0], ALPHA_FLOOR, 2.0))
        beta = float(np.clip(np.sign(nu_beta) * _psi_beta(pt)[0], -1.0, 1.0))
        if alpha >= 2.0:
            beta = 0.0
    q = [[alpha, abs(beta)]]
    sigma = (q75 - q25) / float(_phi_c(q)[0])
    zeta = q50 + sigma * float(np.sign(beta) * _phi_zeta(q)[0])
    if abs(alpha - 1.0) > 1e-12:
        mu = zeta - beta * sigma * np.tan(np.pi * alpha / 2.0)
    else:
        mu = zeta - beta * (2.0 / np.pi) * sigma * np.log(sigma)
    return StableParams(alpha, beta, float(mu), float(sigma))


def histogram_table(samples, params: StableParams | None = None, bins: int = 60):
    """Histogram densities, optionally next to a Monte Carlo density of ``params``.

    Returns a dict of columns: bin_left, bin_right, density[, fitted_density].
    """
    x = np.asarray(samples, dtype=float)
    lo, hi = np.percentile(x, [0.5, 99.5])
    edges = np.linspace(lo, hi, bins + 1)
    dens, _ = np.histogram(x, bins=edges, density=True)
    out = {"bin_left": edges[:-1], "bin_right": edges[1:], "density": dens}
    if params is not None:
        draws = stable_sample(params, 200_000, np.random.default_rng(0))
        inside = (draws >= lo) & (draws <= hi)
        fitted, _ = np.histogram(draws[inside], bins=edges)
        out["fitted_density"] = fitted / (draws.size * np.diff(edges))
    return out
