"""Online and offline SGD chains and independent chain ensembles.

Chains inside an ensemble are advanced together as one array, but every
chain owns its random stream ``RngStream(base_seed, chain_id)`` and only
element-wise arithmetic mixes its own data, so a chain's trajectory does not
depend on which other chains share its block or on the number of threads.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from htsgd.errors import InvalidArgumentError
from htsgd.rand_models import (
    EmpiricalSample1D,
    LinRegDataset,
    LinRegModel,
    LogRegDataset,
    LogRegModel,
    MinibatchPair,
    draw_minibatch_indices,
)
from htsgd.rng import RngStream, as_generator

ONLINE = "online"
OFFLINE = "offline"

# Steps of data drawn per refill; part of the stream layout, so changing it
# changes every trajectory.
CHUNK_STEPS = 512
BLOCK_CHAINS = 256


@dataclass(frozen=True)
class SgdConfig:
    eta: float
    b: int = 1
    mode: str = ONLINE
    n: Optional[int] = None
    iterations: int = 1000
    burn_in: int = 0
    divergence_guard: float = 1e12

    def __post_init__(self):
        if not (self.eta >= 0) or not math.isfinite(self.eta):
            raise InvalidArgumentError(f"step size must be finite and >= 0, got {self.eta}")
        if int(self.b) != self.b or self.b < 1:
            raise InvalidArgumentError(f"batch size must be a positive integer, got {self.b}")
        if self.mode not in (ONLINE, OFFLINE):
            raise InvalidArgumentError(f"mode must be 'online' or 'offline', got {self.mode!r}")
        if self.mode == OFFLINE:
            if self.n is None or self.n < 1:
                raise InvalidArgumentError("offline mode needs the dataset size n")
            if self.b > self.n:
                raise InvalidArgumentError(f"batch size b={self.b} exceeds n={self.n}")
        if int(self.iterations) != self.iterations or self.iterations < 1:
            raise InvalidArgumentError("iterations must be a positive integer")
        if self.burn_in < 0 or self.burn_in >= self.iterations:
            raise InvalidArgumentError(
                f"burn_in={self.burn_in} must satisfy 0 <= burn_in < iterations={self.iterations}")
        if not self.divergence_guard > 0:
            raise InvalidArgumentError("divergence_guard must be positive")


class LossModel:
    """Per-sample loss ``f(x, z)``.

    ``x`` has shape ``(..., d)`` and every array in the data point ``z`` carries
    the same leading axes, so one call evaluates a whole batch of chains.
    """

    name = "loss"

    def gradient(self, x, z):
        raise NotImplementedError

    def value(self, x, z):
        raise NotImplementedError

    @property
    def descriptor(self) -> dict:
        return {"name": self.name}


class QuadraticLoss(LossModel):
    """``f(x, (a, q)) = (a^T x - q)^2 / 2``."""

    name = "quadratic"

    def gradient(self, x, z):
        r = np.sum(z["a"] * x, axis=-1) - z["q"]
        return z["a"] * r[..., None]

    def value(self, x, z):
        r = np.sum(z["a"] * x, axis=-1) - z["q"]
        return 0.5 * r * r


class LogisticRidgeLoss(LossModel):
    """One-dimensional logistic loss plus ``lam * x^2 / 2`` with per-sample ``lam``."""

    name = "logistic_ridge"

    def gradient(self, x, z):
        t = z["a"] * x[..., 0]
        s = 0.5 * (1.0 + np.tanh(0.5 * t))
        return (z["a"] * (s - z["y"]) + z["lam"] * x[..., 0])[..., None]

    def value(self, x, z):
        t = z["a"] * x[..., 0]
        y = z["y"]
        return (y * np.logaddexp(0.0, -t) + (1.0 - y) * np.logaddexp(0.0, t)
                + 0.5 * z["lam"] * x[..., 0] ** 2)


Source = Union[LinRegDataset, LogRegDataset, LinRegModel, LogRegModel]


@dataclass(frozen=True, eq=False)
class ChainSpec:
    """Everything needed to run one chain, except its random stream.

    ``x0`` is ``None`` (zero vector), ``"prior"`` (a fresh draw from
    ``N(0, sigma_x^2 I)`` per chain) or an explicit vector. ``loss=None``
    selects the affine quadratic update.
    """

    config: SgdConfig
    source: Source
    x0: object = None
    loss: Optional[LossModel] = None
    sigma_x: float = 3.0


@dataclass(frozen=True, eq=False)
class ChainEnsemble:
    iterates: np.ndarray
    diverged_flags: np.ndarray
    config: SgdConfig
    base_seed: int
    snapshots: dict = field(default_factory=dict)

    @property
    def chains(self) -> int:
        return self.iterates.shape[0]

    @property
    def d(self) -> int:
        return self.iterates.shape[1]

    def healthy(self) -> np.ndarray:
        return self.iterates[~self.diverged_flags]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([f"x{j}" for j in range(self.d)] + ["diverged"])
            for row, flag in zip(self.iterates, self.diverged_flags):
                w.writerow([repr(float(v)) for v in row] + [int(flag)])


def step_quadratic(x, pair: MinibatchPair, eta: float) -> np.ndarray:
    """One affine SGD step ``(I - eta A) x + eta b``."""
    x = np.asarray(x, dtype=float)
    a_mat = np.asarray(pair.a_mat, dtype=float)
    b_vec = np.asarray(pair.b_vec, dtype=float)
    if x.ndim != 1 or a_mat.shape != (x.size, x.size) or b_vec.shape != (x.size,):
        raise InvalidArgumentError(
            f"dimension mismatch: x {x.shape}, A {a_mat.shape}, b {b_vec.shape}")
    return x - eta * (a_mat @ x) + eta * b_vec


def _online_points(source, gen, count):
    if isinstance(source, LinRegModel):
        a, q = source.sample_rows(gen, count)
        return {"a": a, "q": q}
    if isinstance(source, LogRegModel):
        return source.sample_points(gen, count)
    if isinstance(source, LinRegDataset):
        return _online_points(source.model(), gen, count)
    if isinstance(source, LogRegDataset):
        return _online_points(source.model(), gen, count)
    if hasattr(source, "sample_points"):
        return source.sample_points(gen, count)
    raise InvalidArgumentError(f"cannot draw online data from {type(source).__name__}")


def draw_online_points(source, rng, steps: int, b: int) -> dict:
    """The exact rows an online chain consumes over ``steps`` steps, in order.

    Rows are drawn in refills of ``CHUNK_STEPS`` steps, as the engine does.
    """
    gen = as_generator(rng)
    parts = []
    done = 0
    while done < steps:
        m = min(CHUNK_STEPS, steps - done)
        parts.append(_online_points(source, gen, m * b))
        done += m
    return {k: np.concatenate([p[k] for p in parts]) for k in parts[0]}


def _initial_point(spec: ChainSpec, d: int, gen) -> np.ndarray:
    if spec.x0 is None:
        return np.zeros(d)
    if isinstance(spec.x0, str):
        if spec.x0 != "prior":
            raise InvalidArgumentError(f"unknown initialization {spec.x0!r}")
        sx = getattr(spec.source, "sigma_x", spec.sigma_x)
        return sx * gen.normal(size=d)
    x0 = np.asarray(spec.x0, dtype=float).ravel()
    if x0.size != d:
        raise InvalidArgumentError(f"x0 has dimension {x0.size}, expected {d}")
    return x0.copy()


def _source_dim(source) -> int:
    if isinstance(source, (LogRegDataset, LogRegModel)):
        return 1
    return int(source.d)


def _simulate(spec: ChainSpec, gens: Sequence[np.random.Generator], indices=None,
              record_at: Sequence[int] = ()):
    """Advance ``len(gens)`` chains; returns (final, diverged, snapshots)."""
    cfg = spec.config
    source = spec.source
    d = _source_dim(source)
    c = len(gens)
    offline = cfg.mode == OFFLINE
    if offline:
        if not isinstance(source, (LinRegDataset, LogRegDataset)):
            raise InvalidArgumentError("offline mode requires a fixed dataset as source")
        if cfg.n != source.n:
            raise InvalidArgumentError(f"config n={cfg.n} does not match dataset n={source.n}")
        data = source.points()
    if indices is not None:
        if not offline:
            raise InvalidArgumentError("explicit minibatch indices need offline mode")
        indices = np.asarray(indices, dtype=int).reshape(cfg.iterations, cfg.b)
        if indices.min() < 0 or indices.max() >= source.n:
            raise InvalidArgumentError("minibatch index out of range")

    x = np.stack([_initial_point(spec, d, g) for g in gens])
    alive = np.ones(c, dtype=bool)
    record = sorted(set(int(k) for k in record_at))
    if record and (record[0] < 0 or record[-1] > cfg.iterations):
        raise InvalidArgumentError("snapshot steps must lie in [0, iterations]")
    snapshots = {}
    if 0 in record:
        snapshots[0] = x.copy()

    eta, b = cfg.eta, cfg.b
    guard = cfg.divergence_guard
    k = 0
    while k < cfg.iterations:
        m = min(CHUNK_STEPS, cfg.iterations - k)
        if offline:
            if indices is not None:
                idx = np.broadcast_to(indices[k:k + m], (c, m, b))
            else:
                idx = np.stack([draw_minibatch_indices(source.n, b, m, g) for g in gens])
            chunk = {key: val[idx] for key, val in data.items()}
        else:
            pts = [_online_points(source, g, m * b) for g in gens]
            chunk = {key: np.stack([p[key].reshape((m, b) + p[key].shape[1:]) for p in pts])
                     for key in pts[0]}
        for t in range(m):
            z = {key: val[:, t] for key, val in chunk.items()}
            if spec.loss is None:
                # (I - eta A) x + eta b, written row-wise
                a, q = z["a"], z["q"]
                upd = np.zeros_like(x)
                for j in range(b):
                    r = np.sum(a[:, j] * x, axis=-1) - q[:, j]
                    upd = upd + a[:, j] * r[:, None]
                new = x - (eta / b) * upd
            else:
                upd = np.zeros_like(x)
                for j in range(b):
                    upd = upd + spec.loss.gradient(x, {key: val[:, j] for key, val in z.items()})
                new = x - eta * (upd / b)
            with np.errstate(over="ignore", invalid="ignore"):
                norms = np.sqrt(np.sum(new * new, axis=-1))
            bad = alive & ~(np.isfinite(norms) & (norms <= guard))
            # a flagged chain keeps the offending iterate and stops moving
            x = np.where(alive[:, None], new, x)
            alive &= ~bad
            k += 1
            if k in record:
                snapshots[k] = x.copy()
    return x, ~alive, snapshots


def run_chain_quadratic(config: SgdConfig, source: Source, x0, rng, indices=None):
    """Iterate the affine map for ``config.iterations`` steps.

    Returns ``(final_iterate, diverged)``. A chain whose norm exceeds the
    guard, or becomes non-finite, stops there and is flagged.
    """
    if config.mode == OFFLINE and not isinstance(source, LinRegDataset):
        raise InvalidArgumentError("offline quadratic chains need a LinRegDataset")
    spec = ChainSpec(config, source, x0)
    x, div, _ = _simulate(spec, [as_generator(rng)], indices=indices)
    return x[0], bool(div[0])


def run_chain_general(loss: LossModel, config: SgdConfig, source: Source, x0, rng,
                      indices=None):
    """Plain SGD ``x <- x - eta * mean_batch grad f(x, z)``; non-finite gradients flag divergence."""
    spec = ChainSpec(config, source, x0, loss=loss)
    x, div, _ = _simulate(spec, [as_generator(rng)], indices=indices)
    return x[0], bool(div[0])


def run_ensemble(spec: ChainSpec, chains: int, base_seed: int, threads: int = 1,
                 record_at: Sequence[int] = ()) -> ChainEnsemble:
    """Run ``chains`` independent chains; chain ``i`` uses ``RngStream(base_seed, i)``."""
    if int(chains) != chains or chains < 1:
        raise InvalidArgumentError("chains must be a positive integer")
    blocks = [range(s, min(s + BLOCK_CHAINS, chains)) for s in range(0, chains, BLOCK_CHAINS)]

    def work(block):
        gens = [RngStream(base_seed, i).generator for i in block]
        return _simulate(spec, gens, record_at=record_at)

    if threads > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, blocks))
    else:
        results = [work(bl) for bl in blocks]
    x = np.concatenate([r[0] for r in results])
    div = np.concatenate([r[1] for r in results])
    snaps = {k: np.concatenate([r[2][k] for r in results]) for k in results[0][2]}
    return ChainEnsemble(x, div, spec.config, int(base_seed), snaps)


def empirical_risk(dataset, loss: LossModel, x) -> float:
    """Average loss over the dataset."""
    x = np.asarray(x, dtype=float).ravel()
    vals = loss.value(x[None, :], dataset.points())
    return float(np.mean(vals))


def gradient_noise_norms(dataset, loss: LossModel, x, b: int, draws: int, rng) -> EmpiricalSample1D:
    """Norms of full-gradient minus minibatch-gradient at a fixed ``x``."""
    x = np.asarray(x, dtype=float).ravel()
    n = dataset.n
    if not 1 <= b <= n:
        raise InvalidArgumentError(f"batch size b={b} must satisfy 1 <= b <= n={n}")
    pts = dataset.points()
    grads = loss.gradient(np.broadcast_to(x, (n, x.size)), pts)
    full = grads[np.arange(n)[None, :]].mean(axis=1)[0]
    idx = draw_minibatch_indices(n, b, draws, rng)
    mb = grads[idx].mean(axis=1)
    return EmpiricalSample1D(np.linalg.norm(mb - full, axis=-1))


__all__ = [
    "BLOCK_CHAINS",
    "CHUNK_STEPS",
    "ChainEnsemble",
    "ChainSpec",
    "LogisticRidgeLoss",
    "LossModel",
    "OFFLINE",
    "ONLINE",
    "QuadraticLoss",
    "SgdConfig",
    "draw_online_points",
    "empirical_risk",
    "gradient_noise_norms",
    "run_chain_general",
    "run_chain_quadratic",
    "run_ensemble",
    "step_quadratic",
]
