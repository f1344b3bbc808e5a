"""Contraction moments and tail-exponent roots.

For a random nonnegative factor ``g`` (the norm of ``I - eta A`` for the
quadratic model, ``r(z)`` or ``R(z)`` for the logistic model) the tail
exponent solves ``h(alpha) = log E[g ** alpha] = 0`` with ``alpha > 0``.
``h`` is convex with ``h(0) = 0`` and ``h'(0) = E log g``; a positive root
exists iff ``E log g < 0`` and ``P(g > 1) > 0``.

Monte Carlo solves fix one sample of ``g`` and reuse it for every ``alpha``
(common random numbers), which keeps the empirical ``h`` convex and
deterministic. In one dimension the quadratic factor has an explicit law,
``|1 - eta * sigma^2 * chi2_b / b|``, and ``h`` is evaluated by quadrature;
this is the only way to reach the very large exponents of small step sizes,
whose moment equation is driven by events of probability far below any
feasible sample size.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np
from scipy import integrate, optimize, special

from htsgd.errors import InvalidArgumentError, NoRootError, NotContractiveError, StabilityError
from htsgd.rng import as_generator

DEFAULT_MAX_EXPONENT = 100.0


@dataclass(frozen=True)
class ContractionStats:
    delta: float
    log_moment: float
    mc_samples: int
    std_err_delta: float


@dataclass(frozen=True)
class ExponentEstimate:
    exponent: float
    residual: float
    bracket: tuple
    mc_samples: int

    def to_record(self, **params) -> dict:
        rec = dict(params)
        rec.update(asdict(self))
        rec["bracket"] = list(self.bracket)
        return rec

    def to_json(self, **params) -> str:
        return json.dumps(self.to_record(**params), sort_keys=True)


# ---------------------------------------------------------------------------
# root finding on a convex log-moment curve


def _bracket_and_bisect(h: Callable[[float], float], tol: float, max_exponent: float):
    lo, hi = 0.0, 1.0
    h_hi = h(hi)
    while h_hi <= 0:
        if hi >= max_exponent:
            raise NoRootError(f"log-moment stays negative up to the exponent cap {max_exponent}")
        lo, hi = hi, min(2.0 * hi, max_exponent)
        h_hi = h(hi)
    h_lo = h(lo) if lo > 0 else 0.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        h_mid = h(mid)
        if h_mid < 0:
            lo, h_lo = mid, h_mid
        else:
            hi, h_hi = mid, h_mid
        if hi - lo <= 1e-13 * hi:
            break
    # report the interior midpoint; endpoints only if the midpoint misses tol
    root = 0.5 * (lo + hi)
    res = h(root)
    if abs(res) > tol:
        cands = [(abs(h_hi), hi, h_hi)]
        if lo > 0:
            cands.append((abs(h_lo), lo, h_lo))
        _, root, res = min(cands)
    if abs(res) > tol:
        raise NoRootError(f"bisection stalled with residual {res:.3g} > tol {tol:.3g}")
    return root, res, (lo, hi)


def _log_moment_curve(log_g: np.ndarray):
    m = log_g.size

    def h(alpha):
        return float(special.logsumexp(alpha * log_g) - math.log(m))

    return h


def solve_exponent_from_values(g, tol: float = 1e-10,
                               max_exponent: float = DEFAULT_MAX_EXPONENT) -> ExponentEstimate:
    """Root of ``log mean(g ** alpha) = 0`` for a fixed sample ``g``."""
    g = np.asarray(g, dtype=float).ravel()
    if g.size == 0 or np.any(g < 0) or not np.all(np.isfinite(g)):
        raise InvalidArgumentError("g values must be finite and nonnegative")
    with np.errstate(divide="ignore"):
        log_g = np.log(g)
    if not np.mean(log_g) < 0:
        raise NotContractiveError(f"mean log g = {np.mean(log_g):.6g} is not negative")
    if not np.any(g > 1):
        raise NoRootError("no sampled factor exceeds 1, so E[g^alpha] < 1 for every alpha > 0")
    root, res, br = _bracket_and_bisect(_log_moment_curve(log_g), tol, max_exponent)
    return ExponentEstimate(root, res, br, g.size)


def solve_exponent_general(g_sampler, mc: int, tol: float = 1e-10, rng=None,
                           max_exponent: float = DEFAULT_MAX_EXPONENT) -> ExponentEstimate:
    """Draw ``mc`` factors once with ``g_sampler(generator, mc)`` and solve on that sample."""
    g = np.asarray(g_sampler(as_generator(rng), int(mc)), dtype=float)
    return solve_exponent_from_values(g, tol, max_exponent)


# ---------------------------------------------------------------------------
# quadratic model


def sample_contraction_norms(eta: float, sigma: float, b: int, d: int, mc: int, rng) -> np.ndarray:
    """``mc`` draws of the spectral norm of ``I - eta A``, ``A = (1/b) sum a a^T``."""
    gen = as_generator(rng)
    if d == 1:
        a = gen.normal(0.0, sigma, size=(mc, b))
        return np.abs(1.0 - eta * np.mean(a * a, axis=1))
    out = np.empty(mc)
    chunk = max(1, 2_000_000 // (b * d))
    for s in range(0, mc, chunk):
        k = min(chunk, mc - s)
        a = gen.normal(0.0, sigma, size=(k, b, d))
        if b < d:
            # nonzero spectrum of A equals that of the b x b Gram matrix; A also has 0
            lam = np.linalg.eigvalsh(a @ a.transpose(0, 2, 1) / b)
            out[s:s + k] = np.maximum(1.0, np.max(np.abs(1.0 - eta * lam), axis=1))
        else:
            lam = np.linalg.eigvalsh(a.transpose(0, 2, 1) @ a / b)
            out[s:s + k] = np.max(np.abs(1.0 - eta * lam), axis=1)
    return out


def contraction_stats_quadratic(eta: float, sigma: float, b: int, d: int, mc: int,
                                rng=None) -> ContractionStats:
    if mc < 100:
        raise InvalidArgumentError("need at least 100 Monte Carlo samples")
    g = sample_contraction_norms(eta, sigma, b, d, mc, rng)
    with np.errstate(divide="ignore"):
        logs = np.log(g)
    return ContractionStats(float(g.mean()), float(logs.mean()), int(mc),
                            float(g.std(ddof=1) / math.sqrt(mc)))


class _ChiSquareFactor:
    """Exact law of ``|1 - c * S|`` with ``S ~ chi2_b`` (so ``c = eta sigma^2 / b``).

    Integrates over ``r = sqrt(S)`` (chi law), splitting at the kink
    ``r0 = c ** -0.5`` and rescaling by the peak of the log-integrand so that
    exponents in the thousands stay within floating range.
    """

    def __init__(self, c: float, b: int):
        self.c = c
        self.b = b
        self.r0 = 1.0 / math.sqrt(c)
        self.log_norm = -(b / 2 - 1) * math.log(2.0) - special.gammaln(b / 2)

    def _log_pdf(self, r):
        return (self.b - 1) * np.log(r) - 0.5 * r * r + self.log_norm

    def _log_factor(self, r):
        with np.errstate(divide="ignore"):
            return np.log(np.abs(1.0 - self.c * r * r))

    def _log_integral(self, alpha, lo, hi):
        def L(r):
            return alpha * self._log_factor(r) + self._log_pdf(r)

        grid = np.linspace(lo, hi, 4001)[1:-1]
        vals = L(grid)
        i = int(np.argmax(vals))
        a = grid[max(i - 1, 0)]
        z = grid[min(i + 1, grid.size - 1)]
        if z > a:
            opt = optimize.minimize_scalar(lambda r: -L(r), bounds=(a, z), method="bounded",
                                           options={"xatol": 1e-12 * max(1.0, z)})
            peak, lmax = float(opt.x), float(-opt.fun)
            if vals[i] > lmax:
                peak, lmax = float(grid[i]), float(vals[i])
        else:
            peak, lmax = float(grid[i]), float(vals[i])
        val, _ = integrate.quad(lambda r: math.exp(L(r) - lmax) if lo < r < hi else 0.0,
                                lo, hi, points=[peak], limit=400,
                                epsabs=0.0, epsrel=1e-11)
        return lmax + math.log(val) if val > 0 else -math.inf

    def _upper(self, alpha):
        hi = 2.0 * max(self.r0, math.sqrt(2.0 * alpha + self.b)) + 10.0
        return hi

    def log_moment_fn(self, alpha: float) -> float:
        """``log E |1 - c S| ** alpha``."""
        if alpha == 0:
            return 0.0
        lower = self._log_integral(alpha, 0.0, self.r0)
        upper = self._log_integral(alpha, self.r0, self._upper(alpha))
        return float(np.logaddexp(lower, upper))

    def mean_log(self) -> float:
        f = lambda r: self._log_factor(r) * math.exp(self._log_pdf(r)) if r > 0 else 0.0
        v1, _ = integrate.quad(f, 0.0, self.r0, limit=400)
        v2, _ = integrate.quad(f, self.r0, np.inf, limit=400)
        return v1 + v2


def solve_alpha_quadratic(eta: float, sigma: float, b: int, d: int, mc: int = 10**6,
                          tol: float = 1e-9, rng=None,
                          max_exponent: float = DEFAULT_MAX_EXPONENT,
                          method: str = "auto") -> ExponentEstimate:
    """Tail exponent of online SGD on the quadratic model: ``E ||I - eta A|| ** alpha = 1``.

    ``method="exact"`` (the default in one dimension) uses quadrature over the
    chi-square law; ``method="mc"`` uses ``mc`` common random numbers.
    """
    if method == "auto":
        method = "exact" if d == 1 else "mc"
    if method == "exact":
        if d != 1:
            raise InvalidArgumentError("exact evaluation is only available for d = 1")
        if not (eta > 0 and sigma > 0):
            raise InvalidArgumentError("eta and sigma must be positive")
        law = _ChiSquareFactor(eta * sigma * sigma / b, b)
        mlog = law.mean_log()
        if not mlog < 0:
            raise NotContractiveError(f"E log|1 - eta A| = {mlog:.6g} is not negative")
        root, res, br = _bracket_and_bisect(law.log_moment_fn, tol, max_exponent)
        return ExponentEstimate(root, res, br, 0)
    if method != "mc":
        raise InvalidArgumentError(f"unknown method {method!r}")
    if mc < 100:
        raise InvalidArgumentError("need at least 100 Monte Carlo samples")
    g = sample_contraction_norms(eta, sigma, b, d, mc, rng)
    return solve_exponent_from_values(g, tol, max_exponent)


def quadratic_log_moment(eta: float, sigma: float, b: int, alpha: float) -> float:
    """Exact ``log E |1 - eta A| ** alpha`` in one dimension."""
    return _ChiSquareFactor(eta * sigma * sigma / b, b).log_moment_fn(alpha)


# ---------------------------------------------------------------------------
# logistic model with random ridge coefficient


def logreg_r(a, lam, gamma):
    """``|1 - gamma lam|``: the Jacobian factor far from the origin."""
    return np.abs(1.0 - gamma * np.asarray(lam, dtype=float)) + 0.0 * np.asarray(a, dtype=float)


def logreg_R(a, lam, gamma):
    """Largest Jacobian factor, ``max(|1 - gamma lam|, |1 - gamma lam - gamma a^2 / 4|)``."""
    a = np.asarray(a, dtype=float)
    base = 1.0 - gamma * np.asarray(lam, dtype=float)
    return np.maximum(np.abs(base), np.abs(base - gamma * a * a / 4.0))


def expected_r_closed_form(gamma: float, mu: float) -> float:
    """``E |1 - gamma lam|`` for ``lam ~ Exponential(rate mu)``."""
    if not (gamma > 0 and mu > 0):
        raise InvalidArgumentError("gamma and mu must be positive")
    return (2.0 * gamma * math.exp(-mu / gamma) - gamma) / mu + 1.0


def expected_R_closed_form(gamma: float, mu: float, sigma2: float) -> float:
    """Closed form for ``E |1 - gamma a^2/4 - gamma lam|``, ``a ~ N(0, sigma2)``.

    The derivation assumes ``1 - gamma a^2 / 4 >= 0`` pointwise; where Gaussian
    ``a`` violates it the integrand is overestimated, so the value is an upper
    bound of the exact expectation. Needs ``sigma2 * mu < 2``.
    """
    if not (gamma > 0 and mu > 0 and sigma2 > 0):
        raise InvalidArgumentError("gamma, mu and sigma2 must be positive")
    if sigma2 * mu >= 2:
        raise StabilityError(f"sigma2 * mu = {sigma2 * mu:g} violates sigma2 * mu < 2")
    return (2.0 * math.sqrt(2.0) * gamma / (mu * math.sqrt(2.0 - sigma2 * mu))
            * math.exp(-mu / gamma) - gamma * (1.0 / mu + sigma2 / 4.0) + 1.0)


def logreg_factor_sampler(kind: str, gamma: float, mu: float, sigma2: float):
    """Sampler ``(generator, m) -> factors`` for ``kind`` in {"r", "R", "R_inner"}.

    ``R_inner`` is ``|1 - gamma a^2/4 - gamma lam|``, the quantity the second
    closed form targets.
    """

    def sample(gen, m):
        a = gen.normal(0.0, math.sqrt(sigma2), size=m)
        lam = gen.exponential(1.0 / mu, size=m)
        if kind == "r":
            return logreg_r(a, lam, gamma)
        if kind == "R":
            return logreg_R(a, lam, gamma)
        if kind == "R_inner":
            return np.abs(1.0 - gamma * a * a / 4.0 - gamma * lam)
        raise InvalidArgumentError(f"unknown factor kind {kind!r}")

    return sample


# ---------------------------------------------------------------------------


def w1_bound_rhs(c0: float, eta: float, delta: float, transport_distance: float) -> float:
    """``c0 * eta * W / (1 - delta)``; any Lipschitz constant is folded into ``W``."""
    if not delta < 1:
        raise NotContractiveError(f"contraction moment delta = {delta} is not below 1")
    if c0 <= 0 or eta < 0 or transport_distance < 0:
        raise InvalidArgumentError("c0 must be positive; eta and the distance nonnegative")
    return c0 * eta * transport_distance / (1.0 - delta)


def moment_constant(samples, q: float) -> float:
    """``(E ||X|| ** q) ** (1/q) + 1`` from ensemble rows (or scalars)."""
    x = np.asarray(samples, dtype=float)
    norms = np.abs(x) if x.ndim == 1 else np.linalg.norm(x, axis=1)
    return float(np.mean(norms ** q) ** (1.0 / q) + 1.0)


__all__ = [
    "ContractionStats",
    "DEFAULT_MAX_EXPONENT",
    "ExponentEstimate",
    "contraction_stats_quadratic",
    "expected_R_closed_form",
    "expected_r_closed_form",
    "logreg_R",
    "logreg_factor_sampler",
    "logreg_r",
    "moment_constant",
    "quadratic_log_moment",
    "sample_contraction_norms",
    "solve_alpha_quadratic",
    "solve_exponent_from_values",
    "solve_exponent_general",
    "w1_bound_rhs",
]
