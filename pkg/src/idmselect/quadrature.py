"""Gauss-Legendre rules and per-subject composite integration grids.

Integrands here are smooth within each baseline knot span but only C^(order-2)
across interior knots, so every subject's integration interval is split at the
interior knots (and optionally into bounded-length pieces) with a fixed-size
Gauss-Legendre rule per piece.  Subjects are padded to a common node count
with zero weights so all downstream work is plain array arithmetic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DataError


@dataclass(frozen=True)
class QuadratureRule:
    """Gauss-Legendre nodes/weights on (-1, 1)."""

    nodes: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float)
        weights = np.asarray(self.weights, dtype=float)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "weights", weights)
        if nodes.shape != weights.shape or nodes.ndim != 1:
            raise DataError("quadrature nodes/weights must be matching vectors")
        if np.any(weights <= 0):
            raise DataError("quadrature weights must be positive")
        if abs(weights.sum() - 2.0) > 1e-12:
            raise DataError("Gauss-Legendre weights on (-1,1) must sum to 2")

    @property
    def n_points(self) -> int:
        return self.nodes.shape[0]


def gauss_legendre(n: int) -> QuadratureRule:
    nodes, weights = np.polynomial.legendre.leggauss(int(n))
    return QuadratureRule(nodes, weights)


def _segment_edges(lo: float, hi: float, cuts: tuple[float, ...], max_len: float | None) -> list[float]:
    edges = [lo]
    for c in cuts:
        if lo < c < hi:
            edges.append(c)
    edges.append(hi)
    if max_len is not None and max_len > 0:
        refined = [edges[0]]
        for a, b in zip(edges[:-1], edges[1:]):
            pieces = max(1, math.ceil((b - a) / max_len - 1e-12))
            for i in range(1, pieces):
                refined.append(a + (b - a) * i / pieces)
            refined.append(b)
        edges = refined
    return edges


def subject_grids(
    lo: np.ndarray,
    hi: np.ndarray,
    rule: QuadratureRule,
    cuts: tuple[float, ...] = (),
    max_len: float | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Composite per-subject grids for integrals over [lo_i, hi_i].

    Returns (points, weights), each of shape (n, M) with M the padded node
    count; padding carries zero weight and an in-interval dummy point.
    Zero-width intervals get all-zero weights.
    """
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    if np.any(hi < lo - 1e-12):
        raise DataError("integration upper bound below lower bound")
    n = lo.shape[0]
    q = rule.n_points
    all_pts: list[np.ndarray] = []
    all_wts: list[np.ndarray] = []
    for i in range(n):
        if hi[i] - lo[i] <= 0:
            all_pts.append(np.full(q, lo[i]))
            all_wts.append(np.zeros(q))
            continue
        edges = _segment_edges(lo[i], hi[i], cuts, max_len)
        pts = []
        wts = []
        for a, b in zip(edges[:-1], edges[1:]):
            half = 0.5 * (b - a)
            pts.append(0.5 * (a + b) + half * rule.nodes)
            wts.append(half * rule.weights)
        all_pts.append(np.concatenate(pts))
        all_wts.append(np.concatenate(wts))
    m = max(p.shape[0] for p in all_pts)
    points = np.empty((n, m))
    weights = np.zeros((n, m))
    for i in range(n):
        k = all_pts[i].shape[0]
        points[i, :k] = all_pts[i]
        points[i, k:] = lo[i] if hi[i] <= lo[i] else 0.5 * (lo[i] + hi[i])
        weights[i, :k] = all_wts[i]
    return points, weights
