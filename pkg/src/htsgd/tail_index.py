"""Tail-index estimation and tail diagnostics for chain ensembles.

The estimator is the block log-moment estimator for alpha-stable data: with
``m = K1 * K2`` values ``X_i`` and block sums ``Y_i`` over ``K1`` blocks of
``K2`` consecutive values,

    1 / alpha_hat = (mean_i log|Y_i| - mean_j log|X_j|) / log K2.

A sum of ``K2`` i.i.d. alpha-stable variables is ``K2 ** (1 / alpha)`` times
one of them, which is what the log-difference measures. Light-tailed inputs
give estimates near 2.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

from htsgd.errors import DegenerateSampleError, EmptyInputError, InvalidArgumentError
from htsgd.rand_models import EmpiricalSample1D
from htsgd.rng import as_generator


@dataclass(frozen=True)
class TailIndexEstimate:
    alpha_hat: float
    K1: int
    K2: int
    m_used: int


@dataclass(frozen=True)
class TailDiagnostics:
    ccdf_points: list
    qq_points: list
    loglog_hist: list

    def to_csv(self, path) -> None:
        """One file, three sections, each introduced by ``# <name>`` and a header row."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            for name, cols, rows in (("ccdf", ("t", "probability"), self.ccdf_points),
                                     ("qq", ("theoretical", "sample"), self.qq_points),
                                     ("loglog", ("log_center", "log_count"), self.loglog_hist)):
                fh.write(f"# {name}\n")
                w.writerow(cols)
                for r in rows:
                    w.writerow([repr(float(v)) for v in r])


def _healthy_rows(ensemble) -> np.ndarray:
    rows = ensemble.iterates[~np.asarray(ensemble.diverged_flags, dtype=bool)]
    if rows.shape[0] == 0:
        raise EmptyInputError("every chain in the ensemble diverged")
    return rows


def pool_and_center(ensemble) -> EmpiricalSample1D:
    """Drop diverged chains, center each coordinate, pool all coordinates."""
    rows = _healthy_rows(ensemble)
    return EmpiricalSample1D((rows - rows.mean(axis=0)).ravel())


def chain_norms(ensemble) -> EmpiricalSample1D:
    return EmpiricalSample1D(np.linalg.norm(_healthy_rows(ensemble), axis=1))


def default_blocks(m: int) -> tuple:
    k = math.isqrt(m)
    return k, k


def estimate_alpha(sample, K1: int = None, K2: int = None, rng=None) -> TailIndexEstimate:
    """Block estimate of the tail index from a random permutation of ``sample``.

    ``K2`` is the block length and ``K1`` the number of blocks; both default to
    ``floor(sqrt(m))``. ``rng`` fixes the permutation (seed 0 if omitted).
    Exact zeros are left out of whichever log-mean they would enter.
    """
    x = np.asarray(sample, dtype=float).ravel()
    if K1 is None or K2 is None:
        d1, d2 = default_blocks(x.size)
        K1 = d1 if K1 is None else K1
        K2 = d2 if K2 is None else K2
    if K1 < 1 or K2 < 2:
        raise InvalidArgumentError(f"need K1 >= 1 and K2 >= 2, got K1={K1}, K2={K2}")
    m = K1 * K2
    if x.size < m:
        raise InvalidArgumentError(f"sample of length {x.size} is shorter than K1*K2 = {m}")
    gen = as_generator(rng)
    x = x[gen.permutation(x.size)[:m]]
    y = x.reshape(K1, K2).sum(axis=1)
    ax = np.abs(x)
    ay = np.abs(y)
    ax = ax[ax > 0]
    ay = ay[ay > 0]
    if ax.size == 0 or ay.size == 0:
        raise InvalidArgumentError("no nonzero entries left for the log-moments")
    inv = (np.mean(np.log(ay)) - np.mean(np.log(ax))) / math.log(K2)
    if not (inv > 0) or not math.isfinite(inv):
        raise InvalidArgumentError(f"log-moment difference {inv!r} gives no positive index")
    return TailIndexEstimate(1.0 / inv, int(K1), int(K2), m)


def tail_ccdf(norms, t_grid) -> list:
    """Empirical ``P(X > t)`` at each grid point."""
    v = np.sort(np.asarray(norms, dtype=float).ravel())
    if v.size == 0:
        raise EmptyInputError("empty sample")
    t = np.asarray(t_grid, dtype=float).ravel()
    above = v.size - np.searchsorted(v, t, side="right")
    return [(float(ti), float(c) / v.size) for ti, c in zip(t, above)]


def loglog_tail_slope(norms, tail_fraction: float = 0.1) -> float:
    """Least-squares slope of log CCDF against log t over the upper ``tail_fraction``.

    Approximates ``-alpha`` for power-law tails.
    """
    v = np.sort(np.asarray(norms, dtype=float).ravel())
    v = v[v > 0]
    m = v.size
    k = int(math.floor(tail_fraction * m))
    if k < 3:
        raise InvalidArgumentError("too few points in the tail for a slope fit")
    top = v[m - k:]
    # P(X >= x_(i)) for the i-th largest, strictly positive
    surv = np.arange(k, 0, -1) / m
    slope, _ = np.polyfit(np.log(top), np.log(surv), 1)
    return float(slope)


def tail_diagnostics(ensemble, bins: int = 20, qq_levels: int = 199) -> TailDiagnostics:
    """QQ points against a moment-matched Gaussian, CCDF and log-log histogram of chain norms."""
    rows = _healthy_rows(ensemble)
    if rows.shape[0] < 10:
        raise InvalidArgumentError(f"need at least 10 healthy chains, got {rows.shape[0]}")
    if bins < 1:
        raise InvalidArgumentError("bins must be positive")
    pooled = rows.ravel()
    mu, sd = pooled.mean(), pooled.std()
    if not sd > 0:
        raise DegenerateSampleError("pooled iterates have zero variance")
    probs = (np.arange(1, qq_levels + 1) - 0.5) / qq_levels
    qq = list(zip(stats.norm.ppf(probs, loc=mu, scale=sd), np.quantile(pooled, probs)))

    norms = np.linalg.norm(rows, axis=1)
    pos = norms[norms > 0]
    hist = []
    ccdf = []
    if pos.size:
        lo, hi = pos.min(), pos.max()
        if hi > lo:
            edges = np.geomspace(lo, hi, bins + 1)
            counts, _ = np.histogram(pos, bins=edges)
            log_edges = np.log(edges)
            centers = 0.5 * (log_edges[:-1] + log_edges[1:])
            hist = [(float(c), math.log(k)) for c, k in zip(centers, counts) if k > 0]
            ccdf = tail_ccdf(norms, edges[:-1])
        else:
            hist = [(math.log(lo), math.log(pos.size))]
            ccdf = tail_ccdf(norms, [lo])
    return TailDiagnostics(ccdf, [(float(a), float(b)) for a, b in qq], hist)


__all__ = [
    "TailDiagnostics",
    "TailIndexEstimate",
    "chain_norms",
    "default_blocks",
    "estimate_alpha",
    "loglog_tail_slope",
    "pool_and_center",
    "tail_ccdf",
    "tail_diagnostics",
]
