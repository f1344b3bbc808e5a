"""Wasserstein distances between empirical measures.

One-dimensional distances are exact (quantile matching, CDF integral).
Multivariate W1 between two uniform point clouds of equal size is an
assignment problem, solved exhaustively for tiny inputs and with the
Hungarian-type solver from scipy otherwise.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from htsgd.errors import InvalidArgumentError
from htsgd.rand_models import EmpiricalSample1D

EXHAUSTIVE_MAX = 10
ASSIGNMENT_MAX = 200


@dataclass(frozen=True)
class TransportResult:
    distance: float
    p: float
    method: str


@dataclass(frozen=True)
class RateFit:
    slope: float
    intercept: float
    r2: float
    points: list

    def to_json(self, n_grid=None, distances=None) -> str:
        rec = asdict(self)
        rec["points"] = [list(p) for p in self.points]
        if n_grid is not None:
            rec["grid"] = [int(n) for n in n_grid]
        if distances is not None:
            rec["distances"] = [float(v) for v in distances]
        return json.dumps(rec, sort_keys=True)


def _values(x) -> np.ndarray:
    v = np.sort(np.asarray(x, dtype=float).ravel())
    if v.size == 0:
        raise InvalidArgumentError("empirical samples must be nonempty")
    return v


def wp_empirical_1d(x, y, p: float = 1.0) -> TransportResult:
    """``W_p`` between two 1D empirical measures via their quantile functions."""
    if not p >= 1:
        raise InvalidArgumentError(f"p must be >= 1, got {p}")
    xs, ys = _values(x), _values(y)
    if xs.size == ys.size:
        diff = np.abs(xs - ys)
        w = np.full(xs.size, 1.0 / xs.size)
    else:
        # quantile functions are constant between consecutive jump levels
        levels = np.union1d(np.arange(1, xs.size) / xs.size, np.arange(1, ys.size) / ys.size)
        edges = np.concatenate(([0.0], levels, [1.0]))
        w = np.diff(edges)
        mid = 0.5 * (edges[:-1] + edges[1:])
        ix = np.minimum((mid * xs.size).astype(int), xs.size - 1)
        iy = np.minimum((mid * ys.size).astype(int), ys.size - 1)
        diff = np.abs(xs[ix] - ys[iy])
    if p == 1:
        dist = float(np.sum(w * diff))
    else:
        dist = float(np.sum(w * diff ** p) ** (1.0 / p))
    return TransportResult(dist, float(p), "sorted_matching")


def w1_cdf_integral(x, y) -> TransportResult:
    """``W_1`` as the integral of ``|F_x - F_y|`` over the merged breakpoints."""
    xs, ys = _values(x), _values(y)
    pts = np.union1d(xs, ys)
    if pts.size == 1:
        return TransportResult(0.0, 1.0, "cdf_integral")
    fx = np.searchsorted(xs, pts[:-1], side="right") / xs.size
    fy = np.searchsorted(ys, pts[:-1], side="right") / ys.size
    return TransportResult(float(np.sum(np.abs(fx - fy) * np.diff(pts))), 1.0, "cdf_integral")


def _check_clouds(X, Y):
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if Y.ndim == 1:
        Y = Y[:, None]
    if X.shape != Y.shape or X.shape[0] == 0:
        raise InvalidArgumentError(f"point sets must be nonempty with equal shapes, got {X.shape}, {Y.shape}")
    return X, Y


def _exhaustive(cost: np.ndarray) -> float:
    m = cost.shape[0]
    best = math.inf
    rows = np.arange(m)
    perms = itertools.permutations(range(m))
    while True:
        block = np.array(list(itertools.islice(perms, 50_000)), dtype=np.intp)
        if block.size == 0:
            break
        best = min(best, float(cost[rows, block].sum(axis=1).min()))
    return best


def w1_assignment_oracle(X, Y, method: str = "auto") -> TransportResult:
    """Exact ``W_1`` between uniform measures on the rows of ``X`` and ``Y``.

    ``method`` is "exhaustive" (all permutations, m <= 10), "assignment"
    (optimal assignment, m <= 200) or "auto" (exhaustive up to 6 points).
    """
    X, Y = _check_clouds(X, Y)
    m = X.shape[0]
    if method == "auto":
        method = "exhaustive" if m <= 6 else "assignment"
    cost = cdist(X, Y)
    if method == "exhaustive":
        if m > EXHAUSTIVE_MAX:
            raise InvalidArgumentError(f"exhaustive search is capped at {EXHAUSTIVE_MAX} points, got {m}")
        return TransportResult(_exhaustive(cost) / m, 1.0, "assignment")
    if method == "assignment":
        if m > ASSIGNMENT_MAX:
            raise InvalidArgumentError(f"assignment oracle is capped at {ASSIGNMENT_MAX} points, got {m}")
        r, c = linear_sum_assignment(cost)
        return TransportResult(float(cost[r, c].sum()) / m, 1.0, "assignment")
    raise InvalidArgumentError(f"unknown method {method!r}")


def wp_point_clouds(X, Y, p: float = 1.0) -> float:
    """``W_p`` between uniform measures on equal-size point clouds, no size cap.

    Used for minibatch-pair measures in the bound checks; cost is cubic in
    the number of points.
    """
    if not p >= 1:
        raise InvalidArgumentError(f"p must be >= 1, got {p}")
    X, Y = _check_clouds(X, Y)
    cost = cdist(X, Y) ** p
    r, c = linear_sum_assignment(cost)
    return float(cost[r, c].mean() ** (1.0 / p))


def norm_project(points) -> EmpiricalSample1D:
    """Sorted Euclidean norms of the rows."""
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 1:
        pts = pts[:, None]
    if pts.shape[0] == 0:
        raise InvalidArgumentError("need at least one point")
    return EmpiricalSample1D(np.linalg.norm(pts, axis=1))


def fit_rate(n_grid, distances) -> RateFit:
    """Least-squares line through ``(log n, log distance)``."""
    n = np.asarray(n_grid, dtype=float).ravel()
    dist = np.asarray(distances, dtype=float).ravel()
    if n.size < 3 or n.size != dist.size:
        raise InvalidArgumentError("need at least 3 matching grid points")
    if np.any(dist <= 0) or np.any(n <= 0):
        raise InvalidArgumentError("grid sizes and distances must be positive")
    if np.any(np.diff(n) <= 0):
        raise InvalidArgumentError("grid must be strictly increasing")
    lx, ly = np.log(n), np.log(dist)
    slope, intercept = np.polyfit(lx, ly, 1)
    resid = ly - (slope * lx + intercept)
    ss_tot = float(np.sum((ly - ly.mean()) ** 2))
    ss_res = float(np.sum(resid ** 2))
    r2 = 1.0 if ss_tot <= 1e-300 else max(0.0, 1.0 - ss_res / ss_tot)
    if abs(slope) < 1e-15:
        slope = 0.0
    return RateFit(float(slope), float(intercept), r2,
                   [(float(a), float(b)) for a, b in zip(lx, ly)])


def reference_sample(sampler, size: int = 10**6, seed: int = 20240601) -> EmpiricalSample1D:
    """Large seed-pinned sample standing in for a law that is only samplable."""
    from htsgd.rng import RngStream

    return EmpiricalSample1D(sampler(RngStream(seed).generator, size))


__all__ = [
    "ASSIGNMENT_MAX",
    "EXHAUSTIVE_MAX",
    "RateFit",
    "TransportResult",
    "fit_rate",
    "norm_project",
    "reference_sample",
    "w1_assignment_oracle",
    "w1_cdf_integral",
    "wp_empirical_1d",
    "wp_point_clouds",
]
