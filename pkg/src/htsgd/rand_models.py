"""Synthetic data: linear and logistic regression datasets, minibatch pairs,
and symmetric alpha-stable samples for estimator calibration.

Row indices are 0-based throughout.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from itertools import combinations

import numpy as np

from htsgd.errors import CapacityError, InvalidArgumentError
from htsgd.rng import as_generator

DEFAULT_ENUMERATION_CAP = 100_000


def _positive(name, value):
    if not (value > 0) or not math.isfinite(value):
        raise InvalidArgumentError(f"{name} must be a finite positive number, got {value!r}")


def _nonnegative(name, value):
    if not (value >= 0) or not math.isfinite(value):
        raise InvalidArgumentError(f"{name} must be a finite nonnegative number, got {value!r}")


def _positive_int(name, value):
    if int(value) != value or value < 1:
        raise InvalidArgumentError(f"{name} must be a positive integer, got {value!r}")


@dataclass(frozen=True, eq=False)
class EmpiricalSample1D:
    """Uniformly weighted scalar sample, stored sorted ascending."""

    values: np.ndarray

    def __post_init__(self):
        v = np.sort(np.asarray(self.values, dtype=float).ravel())
        if v.size == 0:
            raise InvalidArgumentError("an empirical sample needs at least one value")
        if not np.all(np.isfinite(v)):
            raise InvalidArgumentError("empirical sample values must be finite")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def __len__(self):
        return self.values.size

    def __array__(self, dtype=None, copy=None):
        return self.values if dtype is None else self.values.astype(dtype)

    def scaled(self, c: float) -> "EmpiricalSample1D":
        return EmpiricalSample1D(self.values * c)


@dataclass(frozen=True, eq=False)
class LinRegModel:
    """Generative model for the quadratic problem with a fixed ground truth.

    Online SGD draws fresh rows from it; :func:`gen_linreg_dataset` draws the
    ground truth and a finite dataset from the same family.
    """

    x_true: np.ndarray
    sigma: float = 1.0
    sigma_y: float = 3.0

    @property
    def d(self) -> int:
        return self.x_true.size

    def sample_rows(self, rng, count: int):
        """Draw ``count`` rows: features first, then target noise."""
        gen = as_generator(rng)
        a = gen.normal(0.0, self.sigma, size=(count, self.d))
        q = a @ self.x_true + self.sigma_y * gen.normal(size=count)
        return a, q


@dataclass(frozen=True, eq=False)
class LinRegDataset:
    x_true: np.ndarray
    features: np.ndarray
    targets: np.ndarray
    sigma: float
    sigma_x: float
    sigma_y: float

    def __post_init__(self):
        f = np.atleast_2d(np.asarray(self.features, dtype=float))
        t = np.asarray(self.targets, dtype=float).ravel()
        x = np.asarray(self.x_true, dtype=float).ravel()
        if f.shape[0] < 1 or f.shape[1] < 1:
            raise InvalidArgumentError("dataset needs n >= 1 rows and d >= 1 columns")
        if f.shape != (t.size, x.size):
            raise InvalidArgumentError(
                f"shape mismatch: features {f.shape}, targets {t.shape}, x_true {x.shape}")
        if not (np.all(np.isfinite(f)) and np.all(np.isfinite(t)) and np.all(np.isfinite(x))):
            raise InvalidArgumentError("dataset entries must be finite")
        for arr in (f, t, x):
            arr.setflags(write=False)
        object.__setattr__(self, "features", f)
        object.__setattr__(self, "targets", t)
        object.__setattr__(self, "x_true", x)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def model(self) -> LinRegModel:
        """The generative model this dataset was drawn from (for online runs)."""
        return LinRegModel(self.x_true, self.sigma, self.sigma_y)

    def head(self, n: int) -> "LinRegDataset":
        """First ``n`` rows; datasets of growing size share their prefix."""
        if not 1 <= n <= self.n:
            raise InvalidArgumentError(f"head({n}) outside 1..{self.n}")
        return LinRegDataset(self.x_true, self.features[:n], self.targets[:n],
                             self.sigma, self.sigma_x, self.sigma_y)

    def points(self) -> dict:
        return {"a": self.features, "q": self.targets}

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([f"f{j}" for j in range(self.d)] + ["target"])
            for row, t in zip(self.features, self.targets):
                w.writerow([repr(float(v)) for v in row] + [repr(float(t))])


@dataclass(frozen=True, eq=False)
class LogRegModel:
    """One-dimensional logistic regression with random ridge coefficients.

    ``lambda ~ Exponential(rate=mu_rate)`` (mean ``1 / mu_rate``); labels are
    ``Bernoulli(sigmoid(a * x_gen))``.
    """

    sigma2: float = 1.0
    mu_rate: float = 0.1
    x_gen: float = 1.0

    def __post_init__(self):
        _positive("sigma2", self.sigma2)
        _positive("mu_rate", self.mu_rate)

    def sample_points(self, rng, count: int) -> dict:
        gen = as_generator(rng)
        a = gen.normal(0.0, math.sqrt(self.sigma2), size=count)
        lam = gen.exponential(1.0 / self.mu_rate, size=count)
        p = 1.0 / (1.0 + np.exp(-a * self.x_gen))
        y = (gen.random(count) < p).astype(float)
        return {"a": a, "y": y, "lam": lam}


@dataclass(frozen=True, eq=False)
class LogRegDataset:
    features: np.ndarray
    labels: np.ndarray
    lambdas: np.ndarray
    sigma2: float
    mu_rate: float
    x_gen: float = 1.0

    def __post_init__(self):
        a = np.asarray(self.features, dtype=float).ravel()
        y = np.asarray(self.labels, dtype=float).ravel()
        lam = np.asarray(self.lambdas, dtype=float).ravel()
        if not (a.size == y.size == lam.size) or a.size == 0:
            raise InvalidArgumentError("features, labels and lambdas need equal nonzero length")
        if np.any(lam < 0):
            raise InvalidArgumentError("regularization coefficients must be nonnegative")
        if not np.all((y == 0) | (y == 1)):
            raise InvalidArgumentError("labels must be 0 or 1")
        for arr in (a, y, lam):
            arr.setflags(write=False)
        object.__setattr__(self, "features", a)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "lambdas", lam)

    @property
    def n(self) -> int:
        return self.features.size

    d = 1

    def model(self) -> LogRegModel:
        return LogRegModel(self.sigma2, self.mu_rate, self.x_gen)

    def head(self, n: int) -> "LogRegDataset":
        if not 1 <= n <= self.n:
            raise InvalidArgumentError(f"head({n}) outside 1..{self.n}")
        return LogRegDataset(self.features[:n], self.labels[:n], self.lambdas[:n],
                             self.sigma2, self.mu_rate, self.x_gen)

    def points(self) -> dict:
        return {"a": self.features, "y": self.labels, "lam": self.lambdas}

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["f0", "label", "lambda"])
            for a, y, lam in zip(self.features, self.labels, self.lambdas):
                w.writerow([repr(float(a)), int(y), repr(float(lam))])


@dataclass(frozen=True, eq=False)
class MinibatchPair:
    """Minibatch averages ``(1/b) sum a a^T`` and ``(1/b) sum a q``."""

    a_mat: np.ndarray
    b_vec: np.ndarray
    indices: tuple


def gen_linreg_dataset(d: int, n: int, sigma: float, sigma_x: float, sigma_y: float,
                       rng) -> LinRegDataset:
    """Draw ``x_true ~ N(0, sigma_x^2 I)`` and ``n`` rows of the linear model.

    ``sigma_x`` and ``sigma_y`` may be zero (degenerate prior, noiseless targets).
    """
    _positive_int("d", d)
    _positive_int("n", n)
    _positive("sigma", sigma)
    _nonnegative("sigma_x", sigma_x)
    _nonnegative("sigma_y", sigma_y)
    gen = as_generator(rng)
    x_true = sigma_x * gen.normal(size=d)
    a, q = LinRegModel(x_true, sigma, sigma_y).sample_rows(gen, n)
    return LinRegDataset(x_true, a, q, sigma, sigma_x, sigma_y)


def gen_logreg_dataset(n: int, sigma2: float, mu_rate: float, x_gen: float,
                       rng) -> LogRegDataset:
    _positive_int("n", n)
    model = LogRegModel(sigma2, mu_rate, x_gen)
    pts = model.sample_points(rng, n)
    return LogRegDataset(pts["a"], pts["y"], pts["lam"], sigma2, mu_rate, x_gen)


def draw_minibatch_indices(n: int, b: int, steps: int, rng) -> np.ndarray:
    """``steps`` independent size-``b`` subsets of ``range(n)``, shape (steps, b).

    Uniform without replacement inside a batch, independent across steps.
    """
    if not 1 <= b <= n:
        raise InvalidArgumentError(f"batch size b={b} must satisfy 1 <= b <= n={n}")
    gen = as_generator(rng)
    if b == 1:
        return gen.integers(0, n, size=(steps, 1))
    if b == n:
        return np.broadcast_to(np.arange(n), (steps, n)).copy()
    keys = gen.random((steps, n))
    return np.argpartition(keys, b - 1, axis=1)[:, :b]


def _pair_from_indices(dataset: LinRegDataset, idx) -> MinibatchPair:
    idx = np.sort(np.asarray(idx, dtype=int))
    a = dataset.features[idx]
    q = dataset.targets[idx]
    b = idx.size
    a_mat = a.T @ a / b
    a_mat = 0.5 * (a_mat + a_mat.T)
    b_vec = a.T @ q / b
    return MinibatchPair(a_mat, b_vec, tuple(int(i) for i in idx))


def sample_minibatch_pair(dataset: LinRegDataset, b: int, rng) -> MinibatchPair:
    _positive_int("b", b)
    idx = draw_minibatch_indices(dataset.n, b, 1, rng)[0]
    return _pair_from_indices(dataset, idx)


def enumerate_minibatch_pairs(dataset: LinRegDataset, b: int,
                              cap: int = DEFAULT_ENUMERATION_CAP) -> list:
    """All ``C(n, b)`` minibatch pairs in lexicographic order of the index sets."""
    _positive_int("b", b)
    if b > dataset.n:
        raise InvalidArgumentError(f"batch size b={b} exceeds n={dataset.n}")
    count = math.comb(dataset.n, b)
    if count > cap:
        raise CapacityError(f"C({dataset.n},{b}) = {count} minibatch pairs exceeds cap {cap}")
    return [_pair_from_indices(dataset, s) for s in combinations(range(dataset.n), b)]


def stable_variates(alpha: float, size, rng) -> np.ndarray:
    """Unsorted symmetric alpha-stable draws (unit scale), Chambers-Mallows-Stuck.

    ``alpha = 2`` gives N(0, 2); ``alpha = 1`` gives the standard Cauchy law.
    """
    if not (0 < alpha <= 2):
        raise InvalidArgumentError(f"stability index must lie in (0, 2], got {alpha}")
    gen = as_generator(rng)
    v = gen.uniform(-np.pi / 2, np.pi / 2, size=size)
    w = gen.exponential(1.0, size=size)
    if alpha == 1:
        return np.tan(v)
    return (np.sin(alpha * v) / np.cos(v) ** (1.0 / alpha)
            * (np.cos(v - alpha * v) / w) ** ((1.0 - alpha) / alpha))


def sample_stable(alpha: float, m: int, rng) -> EmpiricalSample1D:
    _positive_int("m", m)
    return EmpiricalSample1D(stable_variates(alpha, m, rng))


def points_at(points: dict, idx) -> dict:
    return {k: v[idx] for k, v in points.items()}


__all__ = [
    "DEFAULT_ENUMERATION_CAP",
    "EmpiricalSample1D",
    "LinRegDataset",
    "LinRegModel",
    "LogRegDataset",
    "LogRegModel",
    "MinibatchPair",
    "draw_minibatch_indices",
    "enumerate_minibatch_pairs",
    "gen_linreg_dataset",
    "gen_logreg_dataset",
    "points_at",
    "sample_minibatch_pair",
    "sample_stable",
    "stable_variates",
]
