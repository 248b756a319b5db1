"""Pattern causality between pairs of series via sign-signature voting.

For each time point the k nearest neighbours of X's delay-embedded state are
found. Their futures (h steps ahead) are averaged with inverse-distance
weights, once in X's embedding and once in Y's, giving a predicted X pattern
and a predicted Y pattern built from the same neighbours. Each pattern is
reduced to the signs of its consecutive differences. A point votes positive
when the two signatures agree, negative when one is the exact mirror of the
other and dark otherwise.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

WEIGHT_EPS = 1e-12


@dataclass(frozen=True)
class PcConfig:
    E: int = 3
    tau: int = 1
    k: int = 3
    h: int = 1

    def __post_init__(self):
        if self.E < 2 or self.tau < 1 or self.k < 1 or self.h < 1:
            raise ValueError("need E >= 2, tau >= 1, k >= 1, h >= 1")

    @property
    def min_length(self) -> int:
        return (self.E - 1) * self.tau + self.h + self.k + 1


class PcStrength(NamedTuple):
    positive: float
    negative: float
    dark: float


@dataclass(frozen=True)
class CausalityMatrix:
    tickers: tuple
    positive: np.ndarray
    negative: np.ndarray
    dark: np.ndarray


def delay_embed(x, E: int, tau: int) -> np.ndarray:
    """Rows ``[x[t-(E-1)tau], ..., x[t-tau], x[t]]`` for every t with a full window."""
    x = np.asarray(x, dtype=float)
    span = (E - 1) * tau
    if x.size <= span:
        raise ValueError("series shorter than one embedding window")
    return np.stack([x[i * tau:x.size - span + i * tau] for i in range(E)], axis=1)


def signatures(patterns: np.ndarray) -> np.ndarray:
    return np.sign(np.diff(patterns, axis=-1)).astype(np.int8)


def pattern_causality(x, y, cfg: PcConfig | None = None) -> PcStrength:
    cfg = cfg or PcConfig()
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("x and y must be 1-D series of equal length")
    if x.size < cfg.min_length:
        raise ValueError(f"series of length {x.size} is too short (need {cfg.min_length})")
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        raise ValueError("zero-variance series has no defined signatures")
    mx, my = delay_embed(x, cfg.E, cfg.tau), delay_embed(y, cfg.E, cfg.tau)
    m = mx.shape[0] - cfg.h  # points whose future is known
    pts = mx[:m]
    dist = np.sqrt(np.sum((pts[:, None, :] - pts[None, :, :]) ** 2, axis=-1))
    np.fill_diagonal(dist, np.inf)
    # stable sort: equal distances go to the lower index
    nbr = np.argsort(dist, axis=1, kind="stable")[:, :cfg.k]
    dn = np.take_along_axis(dist, nbr, axis=1)
    w = 1.0 / (dn + WEIGHT_EPS)
    w /= w.sum(axis=1, keepdims=True)
    pred_x = np.einsum("tk,tke->te", w, mx[nbr + cfg.h])
    pred_y = np.einsum("tk,tke->te", w, my[nbr + cfg.h])
    sx, sy = signatures(pred_x), signatures(pred_y)
    same = np.all(sx == sy, axis=1)
    mirror = np.all(sx == -sy, axis=1) & ~same
    pos, neg = float(same.mean()), float(mirror.mean())
    return PcStrength(pos, neg, 1.0 - pos - neg)


def causality_matrix(prices, cfg: PcConfig | None = None) -> CausalityMatrix:
    """Pairwise strengths on first-differenced closes; entry (i, j) is ticker i -> ticker j."""
    cfg = cfg or PcConfig()
    close = np.asarray(prices.close, dtype=float)
    d = close.shape[1]
    if d < 2:
        raise ValueError("need at least two tickers")
    diffs = np.diff(close, axis=0)
    out = np.zeros((3, d, d))
    for i in range(d):
        for j in range(d):
            out[:, i, j] = pattern_causality(diffs[:, i], diffs[:, j], cfg)
    return CausalityMatrix(tuple(prices.tickers), out[0], out[1], out[2])


def threshold_graph(matrix, theta: float) -> np.ndarray:
    """Directed adjacency: edge i -> j iff matrix[i, j] > theta (no self loops)."""
    if not 0.0 <= theta <= 1.0:
        raise ValueError("theta must lie in [0, 1]")
    adj = np.asarray(matrix, dtype=float) > theta
    np.fill_diagonal(adj, False)
    return adj


def write_matrix(path, tickers, matrix) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([""] + list(tickers))
        for t, row in zip(tickers, matrix):
            w.writerow([t] + [repr(float(v)) for v in row])


def write_edges(path, tickers, matrix, theta: float) -> int:
    adj = threshold_graph(matrix, theta)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["source", "target", "weight"])
        for i, j in zip(*np.nonzero(adj)):
            w.writerow([tickers[i], tickers[j], repr(float(matrix[i][j]))])
    return int(adj.sum())
