"""Scenario suites: grids of SGD ensembles, theory checks and estimator calibration.

Every grid cell derives its own seed from the cell parameters, so a cell's
numbers do not depend on where it sits in the grid, on which other cells run,
or on the number of worker threads. Replicate ``r`` of a scenario shares one
dataset across all cells; smaller ``n`` use prefixes of it.
"""

from __future__ import annotations

import csv
import json
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields

import numpy as np
from scipy import stats

from htsgd import tail_index as ti
from htsgd import theory_oracles as th
from htsgd.errors import HtsgdError, InvalidArgumentError
from htsgd.rand_models import (
    LinRegModel,
    LogRegModel,
    draw_minibatch_indices,
    gen_linreg_dataset,
    gen_logreg_dataset,
    stable_variates,
)
from htsgd.rng import RngStream, derive_seed
from htsgd.sgd_engine import OFFLINE, ONLINE, ChainSpec, LogisticRidgeLoss, SgdConfig, run_ensemble
from htsgd.transport import wp_empirical_1d, wp_point_clouds

SCENARIOS = ("histograms", "tail_suite", "theory_suite", "strongly_convex_suite",
             "estimator_calibration")

TABLES = {
    "histograms": ("histogram", "norm_summary"),
    "tail_suite": ("online_alpha", "offline_alpha", "alpha_replicates", "alpha_gap",
                   "diagnostics"),
    "theory_suite": ("sandwich", "sandwich_slopes", "bound_check", "ergodicity",
                     "ergodicity_fit"),
    "strongly_convex_suite": ("closed_forms", "roots", "tail_estimates", "w1_norms"),
    "estimator_calibration": ("calibration",),
}

MIN_HEALTHY = 10
NAN = float("nan")


class CellError(HtsgdError):
    """A precondition failure attributed to one spec and one grid cell."""

    def __init__(self, spec_name: str, cell: str, message: str):
        super().__init__(f"spec {spec_name!r}, cell {cell}: {message}")
        self.spec_name = spec_name
        self.cell = cell


@dataclass(frozen=True)
class ExperimentSpec:
    """One scenario with its grids.

    ``ns`` may contain ``math.inf``, the online (fresh data) sentinel.
    ``x0`` is "zero", "prior" or "constant" (every coordinate ``x0_value``).
    """

    name: str
    scenario: str
    d: int = 1
    sigma: float = 1.0
    sigma_x: float = 3.0
    sigma_y: float = 3.0
    etas: tuple = (0.002, 0.004, 0.008)
    bs: tuple = (1, 4)
    ns: tuple = (50, 200, 500)
    chains: int = 400
    iterations: int = 5000
    burn_in: int = 1000
    replicates: int = 1
    base_seed: int = 0
    x0: str = "zero"
    x0_value: float = 0.0
    bins: int = 20
    mc: int = 100_000
    max_exponent: float = 10_000.0
    gammas: tuple = (0.1,)
    mus: tuple = (0.1,)
    sigma2s: tuple = (1.0,)
    x_gen: float = 1.0
    alphas: tuple = (1.2, 1.5, 1.8)
    ms: tuple = (1_000_000,)
    trials: int = 20
    block_length: int = 100
    probe_eta: float = 0.005
    probe_steps: int = 1000
    probe_every: int = 50
    probe_offset: float = 10.0
    pair_reference_factor: int = 10

    def __post_init__(self):
        for name in ("etas", "bs", "ns", "gammas", "mus", "sigma2s", "alphas", "ms"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        self.validate()

    def _fail(self, message, cell="-"):
        raise CellError(self.name, cell, message)

    def validate(self) -> None:
        if self.scenario not in SCENARIOS:
            self._fail(f"unknown scenario {self.scenario!r}")
        for name in ("etas", "bs", "ns", "gammas", "mus", "sigma2s", "alphas", "ms"):
            if len(getattr(self, name)) == 0:
                self._fail(f"grid {name} is empty")
        if self.d < 1 or self.chains < 1 or self.replicates < 1 or self.iterations < 1:
            self._fail("d, chains, replicates and iterations must be positive")
        if not 0 <= self.burn_in < self.iterations:
            self._fail(f"burn_in={self.burn_in} must lie in [0, iterations={self.iterations})")
        if self.x0 not in ("zero", "prior", "constant"):
            self._fail(f"x0 must be zero, prior or constant, got {self.x0!r}")
        if not (self.sigma > 0 and self.sigma_x >= 0 and self.sigma_y >= 0):
            self._fail("sigma must be positive, sigma_x and sigma_y nonnegative")
        if any(not (e >= 0 and math.isfinite(e)) for e in self.etas):
            self._fail("step sizes must be finite and nonnegative")
        if any(int(b) != b or b < 1 for b in self.bs):
            self._fail("batch sizes must be positive integers")
        for n in self.ns:
            if n != math.inf and (int(n) != n or n < 1):
                self._fail(f"dataset sizes must be positive integers or inf, got {n!r}")
        for b in self.bs:
            for n in self.ns:
                if b > n and self.scenario in ("histograms", "tail_suite", "theory_suite"):
                    self._fail(f"batch size exceeds dataset size", cell=f"b={b}, n={n}")
        if self.bins < 1:
            self._fail("bins must be positive")
        if self.scenario == "theory_suite":
            if self.d != 1:
                self._fail("bound checks are confined to d = 1")
            if not (self.probe_steps >= 3 * self.probe_every and self.probe_every >= 1):
                self._fail("the ergodicity probe needs at least 3 snapshots")
        if self.scenario == "strongly_convex_suite":
            if tuple(self.bs) != (1,):
                self._fail("the strongly convex suite runs with b = 1 only")
            if any(not (g > 0) for g in self.gammas) or any(not (m > 0) for m in self.mus) \
                    or any(not (s > 0) for s in self.sigma2s):
                self._fail("gamma, mu and sigma2 must be positive")
        if self.scenario == "estimator_calibration":
            if any(not (0 < a <= 2) for a in self.alphas):
                self._fail("stability indices must lie in (0, 2]")
            if self.block_length < 2:
                self._fail("block_length must be at least 2")
            for m in self.ms:
                if int(m) != m or m < 2 * self.block_length:
                    self._fail(f"m={m} must be an integer holding at least two blocks",
                               cell=f"m={m}")
            if self.trials < 2:
                self._fail("need at least 2 trials for a spread")

    def finite_ns(self) -> list:
        return sorted(int(n) for n in self.ns if n != math.inf)

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ["inf" if x == math.inf else x for x in v]
            out[f.name] = v
        return out


@dataclass(frozen=True)
class Table:
    name: str
    columns: tuple
    rows: list

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.columns)
            for r in self.rows:
                w.writerow([_fmt(v) for v in r])

    def column(self, name) -> list:
        j = self.columns.index(name)
        return [r[j] for r in self.rows]

    def where(self, **match) -> list:
        """Rows (as dicts) whose columns equal the given values."""
        out = []
        for r in self.rows:
            rec = dict(zip(self.columns, r))
            if all(rec[k] == v for k, v in match.items()):
                out.append(rec)
        return out


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


@dataclass(frozen=True)
class ExperimentResult:
    spec: ExperimentSpec
    tables: dict
    metadata: dict = field(default_factory=dict)

    def table(self, name) -> Table:
        return self.tables[name]

    def write(self, out_dir, extra_manifest: dict = None) -> list:
        """Write ``<table>.csv`` files and ``manifest.json``; returns the written paths.

        Wall-clock time is left out of the manifest so reruns are byte-identical.
        """
        os.makedirs(out_dir, exist_ok=True)
        paths = []
        for name in TABLES[self.spec.scenario]:
            p = os.path.join(out_dir, f"{name}.csv")
            self.tables[name].to_csv(p)
            paths.append(p)
        manifest = {
            "spec": self.spec.to_dict(),
            "scenario": self.spec.scenario,
            "base_seed": self.spec.base_seed,
            "seeds": self.metadata.get("seeds", {}),
            "flagged": self.metadata.get("flagged", []),
            "files": [f"{name}.csv" for name in TABLES[self.spec.scenario]],
        }
        if extra_manifest:
            manifest.update(extra_manifest)
        mp = os.path.join(out_dir, "manifest.json")
        with open(mp, "w", newline="\n") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")
        paths.append(mp)
        return paths


# ---------------------------------------------------------------------------
# shared helpers


def _map(fn, items, threads: int) -> list:
    items = list(items)
    if threads > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, items))
    return [fn(it) for it in items]


def _n_key(n):
    return "inf" if n == math.inf else int(n)


def _linreg_data(spec: ExperimentSpec, rep: int):
    size = max(spec.finite_ns(), default=1)
    seed = derive_seed(spec.base_seed, "linreg-data", spec.d, spec.sigma, spec.sigma_x,
                       spec.sigma_y, rep)
    return gen_linreg_dataset(spec.d, size, spec.sigma, spec.sigma_x, spec.sigma_y,
                              RngStream(seed)), seed


def _x0(spec: ExperimentSpec):
    if spec.x0 == "zero":
        return None
    if spec.x0 == "prior":
        return "prior"
    return np.full(spec.d, float(spec.x0_value))


def _chain_seed(spec, tag, *keys) -> int:
    return derive_seed(spec.base_seed, tag, *keys)


def _quadratic_ensemble(spec, dataset, eta, b, n, rep, x0=None, record_at=(),
                        iterations=None, tag="chains"):
    """Offline ensemble on ``dataset.head(n)``, or online for ``n = inf``."""
    its = spec.iterations if iterations is None else iterations
    burn = min(spec.burn_in, its - 1)
    if n == math.inf:
        cfg = SgdConfig(eta, b, ONLINE, None, its, burn)
        source = dataset.model()
    else:
        cfg = SgdConfig(eta, b, OFFLINE, int(n), its, burn)
        source = dataset.head(int(n))
    seed = _chain_seed(spec, tag, float(eta), int(b), _n_key(n), rep)
    cs = ChainSpec(cfg, source, _x0(spec) if x0 is None else x0, sigma_x=spec.sigma_x)
    return run_ensemble(cs, spec.chains, seed, record_at=record_at), seed


def _alpha_hat(ensemble, seed):
    """Tail estimate from a pooled, centered ensemble; NaN plus a reason on failure."""
    if int(np.sum(~ensemble.diverged_flags)) < MIN_HEALTHY:
        return NAN, "too few healthy chains"
    try:
        sample = ti.pool_and_center(ensemble)
        est = ti.estimate_alpha(sample, rng=RngStream(derive_seed(seed, "permutation")))
    except HtsgdError as exc:
        return NAN, str(exc)
    return est.alpha_hat, ""


def _median(values):
    v = [x for x in values if not math.isnan(x)]
    return float(np.median(v)) if v else NAN


def _cell_label(**kw) -> str:
    return ",".join(f"{k}={_n_key(v) if k == 'n' else v}" for k, v in kw.items())


# ---------------------------------------------------------------------------
# histograms


def exp_histograms(spec: ExperimentSpec, threads: int = 1) -> ExperimentResult:
    """Final-iterate norm histograms and mean + 2 std outlier counts per cell."""
    _require(spec, "histograms")
    cells = [(eta, b, n, rep) for rep in range(spec.replicates) for eta in spec.etas
             for b in spec.bs for n in spec.ns]
    data = {rep: _linreg_data(spec, rep) for rep in range(spec.replicates)}

    def run(cell):
        eta, b, n, rep = cell
        ens, seed = _quadratic_ensemble(spec, data[rep][0], eta, b, n, rep)
        return cell, ens, seed

    hist_rows, summ_rows, flagged, seeds = [], [], [], {}
    for (eta, b, n, rep), ens, seed in _map(run, cells, threads):
        label = _cell_label(eta=eta, b=b, n=n, replicate=rep)
        seeds[label] = seed
        healthy = ens.healthy()
        ndiv = int(ens.diverged_flags.sum())
        if healthy.shape[0] == 0:
            flagged.append(label)
            summ_rows.append((eta, b, _n_key(n), rep, NAN, NAN, 0, NAN, NAN, ndiv, 1))
            continue
        norms = np.linalg.norm(healthy, axis=1)
        mean, sd = float(norms.mean()), float(norms.std())
        thr = mean + 2.0 * sd
        out = norms[norms > thr]
        counts, edges = np.histogram(norms, bins=spec.bins)
        for lo, hi, c in zip(edges[:-1], edges[1:], counts):
            hist_rows.append((eta, b, _n_key(n), rep, float(lo), float(hi), int(c)))
        summ_rows.append((eta, b, _n_key(n), rep, mean, sd, int(out.size),
                          float(out.max()) if out.size else NAN,
                          float(out.mean() - thr) if out.size else NAN, ndiv, 0))
    tables = {
        "histogram": Table("histogram", ("eta", "b", "n", "replicate", "bin_lo", "bin_hi", "count"),
                           hist_rows),
        "norm_summary": Table("norm_summary",
                              ("eta", "b", "n", "replicate", "mean", "std", "outliers",
                               "outlier_max", "outlier_mean_excess", "diverged", "flagged"),
                              summ_rows),
    }
    return _result(spec, tables, seeds, flagged, data)


# ---------------------------------------------------------------------------
# tail suite


def exp_tail_suite(spec: ExperimentSpec, threads: int = 1) -> ExperimentResult:
    """Online baselines, offline estimates per (eta, b, n), their gaps and diagnostics.

    Diagnostics are emitted for replicate 0 of every cell.
    """
    _require(spec, "tail_suite")
    data = {rep: _linreg_data(spec, rep) for rep in range(spec.replicates)}
    ns = list(spec.ns)
    cells = [(eta, b, n, rep) for rep in range(spec.replicates) for eta in spec.etas
             for b in spec.bs for n in [math.inf] + [n for n in ns if n != math.inf]]

    def run(cell):
        eta, b, n, rep = cell
        ens, seed = _quadratic_ensemble(spec, data[rep][0], eta, b, n, rep)
        alpha, why = _alpha_hat(ens, seed)
        diag = None
        if rep == 0 and int(np.sum(~ens.diverged_flags)) >= MIN_HEALTHY:
            try:
                diag = ti.tail_diagnostics(ens, bins=spec.bins)
            except HtsgdError:
                diag = None
        return cell, alpha, why, seed, diag, int(ens.diverged_flags.sum())

    res = {}
    seeds, flagged = {}, []
    for (eta, b, n, rep), alpha, why, seed, diag, ndiv in _map(run, cells, threads):
        label = _cell_label(eta=eta, b=b, n=n, replicate=rep)
        seeds[label] = seed
        if why:
            flagged.append(f"{label}: {why}")
        res[(eta, b, n, rep)] = (alpha, diag, ndiv)

    online_rows, rep_rows, off_rows, gap_rows, diag_rows = [], [], [], [], []
    for eta in spec.etas:
        for b in spec.bs:
            for rep in range(spec.replicates):
                a, _, ndiv = res[(eta, b, math.inf, rep)]
                online_rows.append((eta, b, rep, a, ndiv, int(math.isnan(a))))
            for n in ns:
                per_rep = [res[(eta, b, n, rep)][0] for rep in range(spec.replicates)]
                base = [res[(eta, b, math.inf, rep)][0] for rep in range(spec.replicates)]
                gaps = [abs(x - y) for x, y in zip(per_rep, base)]
                ok = [x for x in per_rep if not math.isnan(x)]
                okg = [g for g in gaps if not math.isnan(g)]
                for rep, (x, g) in enumerate(zip(per_rep, gaps)):
                    rep_rows.append((eta, b, _n_key(n), rep, x, g, res[(eta, b, n, rep)][2]))
                off_rows.append((eta, b, _n_key(n), len(ok),
                                 min(ok) if ok else NAN, _median(ok), max(ok) if ok else NAN))
                gap_rows.append((eta, b, _n_key(n), len(okg), _median(okg),
                                 min(okg) if okg else NAN, max(okg) if okg else NAN))
            for n in [math.inf] + [n for n in ns if n != math.inf]:
                diag = res[(eta, b, n, 0)][1]
                if diag is None:
                    continue
                for kind, pts in (("qq", diag.qq_points), ("loglog", diag.loglog_hist),
                                  ("ccdf", diag.ccdf_points)):
                    for x, y in pts:
                        diag_rows.append((eta, b, _n_key(n), kind, x, y))
    tables = {
        "online_alpha": Table("online_alpha",
                              ("eta", "b", "replicate", "alpha_hat", "diverged", "flagged"),
                              online_rows),
        "offline_alpha": Table("offline_alpha",
                               ("eta", "b", "n", "replicates_ok", "alpha_min", "alpha_median",
                                "alpha_max"), off_rows),
        "alpha_replicates": Table("alpha_replicates",
                                  ("eta", "b", "n", "replicate", "alpha_hat", "gap", "diverged"),
                                  rep_rows),
        "alpha_gap": Table("alpha_gap",
                           ("eta", "b", "n", "replicates_ok", "median_gap", "min_gap", "max_gap"),
                           gap_rows),
        "diagnostics": Table("diagnostics", ("eta", "b", "n", "kind", "x", "y"), diag_rows),
    }
    return _result(spec, tables, seeds, flagged, data)


# ---------------------------------------------------------------------------
# theory suite


def _pair_cloud(dataset, b: int, count: int, gen) -> np.ndarray:
    """``count`` minibatch pairs ``(A, b_vec)`` flattened to rows; d = 1 gives 2 columns."""
    a, q = dataset.features, dataset.targets
    if b == 1 and count % dataset.n == 0:
        idx = np.repeat(np.arange(dataset.n), count // dataset.n)[:, None]
    else:
        idx = draw_minibatch_indices(dataset.n, b, count, gen)
    return _pairs(a[idx], q[idx])


def _pairs(a, q) -> np.ndarray:
    # a: (count, b, d), q: (count, b)
    b = a.shape[1]
    amat = np.einsum("kbi,kbj->kij", a, a) / b
    bvec = np.einsum("kbi,kb->ki", a, q) / b
    return np.concatenate([amat.reshape(amat.shape[0], -1), bvec], axis=1)


def _envelope_fit(norms):
    """Power law ``c t^-alpha`` fitted to the upper decile of a sample's CCDF."""
    slope = ti.loglog_tail_slope(norms, 0.1)
    v = np.sort(np.asarray(norms, dtype=float))
    v = v[v > 0]
    k = max(3, int(0.1 * v.size))
    top = v[v.size - k:]
    surv = np.arange(k, 0, -1) / v.size
    alpha = -slope
    log_c = float(np.mean(np.log(surv) + alpha * np.log(top)))
    return alpha, log_c


def exp_theory_suite(spec: ExperimentSpec, threads: int = 1) -> ExperimentResult:
    """Sandwich slopes, the W1 bound check and a geometric-ergodicity probe (d = 1)."""
    _require(spec, "theory_suite")
    data = {rep: _linreg_data(spec, rep) for rep in range(spec.replicates)}
    finite = spec.finite_ns()
    cells = [(eta, b, n, rep) for rep in range(spec.replicates) for eta in spec.etas
             for b in spec.bs for n in finite]
    online_cells = sorted({(eta, b, rep) for eta, b, _, rep in cells})
    seeds, flagged = {}, []

    def run_online(cell):
        eta, b, rep = cell
        return cell, _quadratic_ensemble(spec, data[rep][0], eta, b, math.inf, rep)

    online = {}
    for cell, (ens, seed) in _map(run_online, online_cells, threads):
        online[cell] = ens
        seeds[_cell_label(eta=cell[0], b=cell[1], n=math.inf, replicate=cell[2])] = seed

    deltas = {}
    for eta, b in sorted({(eta, b) for eta, b, _ in online_cells}):
        rng = RngStream(_chain_seed(spec, "delta", float(eta), int(b)))
        deltas[(eta, b)] = th.contraction_stats_quadratic(eta, spec.sigma, b, 1, spec.mc, rng).delta

    def run(cell):
        eta, b, n, rep = cell
        ds = data[rep][0]
        off, seed = _quadratic_ensemble(spec, ds, eta, b, n, rep)
        on = online[(eta, b, rep)]
        on_h, off_h = on.healthy(), off.healthy()
        out = {"seed": seed}
        if on_h.shape[0] < MIN_HEALTHY or off_h.shape[0] < MIN_HEALTHY:
            out["error"] = "too few healthy chains"
            return cell, out
        on_norms = np.linalg.norm(on_h, axis=1)
        off_norms = np.linalg.norm(off_h, axis=1)
        w1_norm = wp_empirical_1d(on_norms, off_norms, 1).distance
        lhs = wp_empirical_1d(on_h.ravel(), off_h.ravel(), 1).distance
        out["lhs"] = lhs
        out["w1_norm"] = w1_norm
        # sandwich: offline CCDF against the online power-law fit, widened by 2^{+-alpha}
        try:
            alpha, log_c = _envelope_fit(on_norms)
            out["alpha_fit"] = alpha
            out["slope_on"] = -alpha
            out["slope_off"] = ti.loglog_tail_slope(off_norms, 0.1)
            t_grid = np.quantile(off_norms, np.linspace(0.9, 0.99, 10))
            ccdf = ti.tail_ccdf(off_norms, t_grid)
            rows = []
            for t, p in ccdf:
                base = math.exp(log_c - alpha * math.log(t)) if t > 0 else math.inf
                lo = base * 2.0 ** (-alpha) - w1_norm / t
                hi = base * 2.0 ** alpha + w1_norm / t
                rows.append((t, p, lo, hi, int(lo <= p <= hi)))
            out["sandwich"] = rows
        except HtsgdError as exc:
            out["sandwich_error"] = str(exc)
        # bound check
        delta = deltas[(eta, b)]
        gen = RngStream(derive_seed(seed, "pairs")).generator
        count = spec.pair_reference_factor * int(n)
        emp = _pair_cloud(ds.head(int(n)), b, count, gen)
        a_ref, q_ref = LinRegModel(ds.x_true, spec.sigma, spec.sigma_y).sample_rows(gen, count * b)
        ref = _pairs(a_ref.reshape(count, b, 1), q_ref.reshape(count, b))
        w_pairs = wp_point_clouds(emp, ref, 2.0)
        c0 = th.moment_constant(on_h, 2.0)
        out.update(delta=delta, c0=c0, w_pairs=w_pairs)
        try:
            out["rhs"] = th.w1_bound_rhs(c0, eta, delta, w_pairs)
        except HtsgdError as exc:
            out["bound_error"] = str(exc)
        return cell, out

    sand_rows, slope_rows, bound_rows = [], [], []
    for (eta, b, n, rep), out in _map(run, cells, threads):
        label = _cell_label(eta=eta, b=b, n=n, replicate=rep)
        seeds[label] = out["seed"]
        for key in ("error", "sandwich_error", "bound_error"):
            if key in out:
                flagged.append(f"{label}: {out[key]}")
        for t, p, lo, hi, inside in out.get("sandwich", []):
            sand_rows.append((eta, b, n, rep, t, p, lo, hi, inside))
        slope_rows.append((eta, b, n, rep, out.get("alpha_fit", NAN), out.get("slope_on", NAN),
                           out.get("slope_off", NAN), out.get("w1_norm", NAN)))
        rhs = out.get("rhs", NAN)
        lhs = out.get("lhs", NAN)
        bound_rows.append((eta, b, n, rep, lhs, out.get("c0", NAN), out.get("delta", NAN),
                           out.get("w_pairs", NAN), rhs,
                           int(lhs <= rhs) if not (math.isnan(lhs) or math.isnan(rhs)) else 0,
                           int(math.isnan(rhs) or math.isnan(lhs))))

    erg_rows, fit_rows = [], []
    for rep in range(spec.replicates):
        rows, fit, seed = _ergodicity_probe(spec, data[rep][0], rep)
        seeds[_cell_label(probe="ergodicity", replicate=rep)] = seed
        erg_rows.extend((rep,) + r for r in rows)
        fit_rows.append((rep, spec.probe_eta, spec.bs[0]) + fit)

    tables = {
        "sandwich": Table("sandwich", ("eta", "b", "n", "replicate", "t", "ccdf_offline",
                                       "envelope_lo", "envelope_hi", "inside"), sand_rows),
        "sandwich_slopes": Table("sandwich_slopes",
                                 ("eta", "b", "n", "replicate", "alpha_fit_online",
                                  "slope_online", "slope_offline", "w1_norms"), slope_rows),
        "bound_check": Table("bound_check",
                             ("eta", "b", "n", "replicate", "lhs_w1", "c0", "delta",
                              "w2_pairs", "rhs", "holds", "flagged"), bound_rows),
        "ergodicity": Table("ergodicity", ("replicate", "k", "w1"), erg_rows),
        "ergodicity_fit": Table("ergodicity_fit",
                                ("replicate", "eta", "b", "slope", "intercept", "r2"), fit_rows),
    }
    return _result(spec, tables, seeds, flagged, data)


def _ergodicity_probe(spec, dataset, rep):
    """W1 between the law of X_k started off-equilibrium and a stationary reference ensemble."""
    eta, b = spec.probe_eta, spec.bs[0]
    model = dataset.model()
    steps = list(range(spec.probe_every, spec.probe_steps + 1, spec.probe_every))
    seed = _chain_seed(spec, "ergodicity", float(eta), int(b), rep)
    start = dataset.x_true + spec.probe_offset
    cfg = SgdConfig(eta, b, ONLINE, None, spec.probe_steps, 0)
    ens = run_ensemble(ChainSpec(cfg, model, start), spec.chains, seed, record_at=steps)
    ref_its = max(spec.iterations, spec.probe_steps)
    ref_cfg = SgdConfig(eta, b, ONLINE, None, ref_its, min(spec.burn_in, ref_its - 1))
    ref = run_ensemble(ChainSpec(ref_cfg, model, dataset.x_true), spec.chains,
                       derive_seed(seed, "reference"))
    ref_vals = ref.healthy().ravel()
    rows = []
    for k in steps:
        snap = ens.snapshots[k][~ens.diverged_flags]
        rows.append((k, wp_empirical_1d(snap.ravel(), ref_vals, 1).distance))
    ks = np.array([r[0] for r in rows], dtype=float)
    w = np.array([r[1] for r in rows])
    if np.any(w <= 0):
        return rows, (NAN, NAN, NAN), seed
    fit = stats.linregress(ks, np.log(w))
    return rows, (float(fit.slope), float(fit.intercept), float(fit.rvalue ** 2)), seed


# ---------------------------------------------------------------------------
# strongly convex (logistic) suite


def exp_strongly_convex_suite(spec: ExperimentSpec, threads: int = 1) -> ExperimentResult:
    """Closed forms against Monte Carlo, exponent roots, and logistic SGD ensembles."""
    _require(spec, "strongly_convex_suite")
    grid = [(g, m, s) for g in spec.gammas for m in spec.mus for s in spec.sigma2s]
    seeds, flagged = {}, []
    cf_rows, root_rows = [], []
    for g, m, s in grid:
        label = _cell_label(gamma=g, mu=m, sigma2=s)
        seed = _chain_seed(spec, "closed-forms", float(g), float(m), float(s))
        seeds[label] = seed
        gen = RngStream(seed).generator
        r_vals = th.logreg_factor_sampler("r", g, m, s)(gen, spec.mc)
        gen = RngStream(seed, 1).generator
        ri_vals = th.logreg_factor_sampler("R_inner", g, m, s)(gen, spec.mc)
        gen = RngStream(seed, 2).generator
        big_vals = th.logreg_factor_sampler("R", g, m, s)(gen, spec.mc)
        er = th.expected_r_closed_form(g, m)
        masked = int(s * m >= 2)
        er_bound = NAN if masked else th.expected_R_closed_form(g, m, s)
        se = lambda v: float(v.std(ddof=1) / math.sqrt(v.size))
        cf_rows.append((g, m, s, er, float(r_vals.mean()), se(r_vals), er_bound,
                        float(ri_vals.mean()), se(ri_vals), float(big_vals.mean()), se(big_vals),
                        masked, int(er < 1 and (masked or er_bound < 1))))
        roots = []
        for kind, vals in (("r", r_vals), ("R", big_vals)):
            try:
                est = th.solve_exponent_from_values(vals, max_exponent=spec.max_exponent)
                roots += [est.exponent, est.residual]
            except HtsgdError as exc:
                roots += [NAN, NAN]
                flagged.append(f"{label}, root {kind}: {exc}")
        root_rows.append((g, m, s) + tuple(roots) + (spec.mc,))

    finite = spec.finite_ns()
    cells = [(g, m, s, n, rep) for rep in range(spec.replicates) for g, m, s in grid
             for n in [math.inf] + finite]
    datasets = {}
    for rep in range(spec.replicates):
        for m, s in sorted({(m, s) for _, m, s in grid}):
            dseed = derive_seed(spec.base_seed, "logreg-data", float(m), float(s), spec.x_gen, rep)
            datasets[(m, s, rep)] = gen_logreg_dataset(max(finite, default=1), s, m, spec.x_gen,
                                                       RngStream(dseed))
            seeds[_cell_label(data="logreg", mu=m, sigma2=s, replicate=rep)] = dseed

    def run(cell):
        g, m, s, n, rep = cell
        ds = datasets[(m, s, rep)]
        its = spec.iterations
        if n == math.inf:
            cfg = SgdConfig(g, 1, ONLINE, None, its, spec.burn_in)
            source = LogRegModel(s, m, spec.x_gen)
        else:
            cfg = SgdConfig(g, 1, OFFLINE, int(n), its, spec.burn_in)
            source = ds.head(int(n))
        seed = _chain_seed(spec, "logreg-chains", float(g), float(m), float(s), _n_key(n), rep)
        ens = run_ensemble(ChainSpec(cfg, source, _x0(spec), loss=LogisticRidgeLoss()),
                           spec.chains, seed)
        alpha, why = _alpha_hat(ens, seed)
        return cell, ens, alpha, why, seed

    ens_out = {}
    for (g, m, s, n, rep), ens, alpha, why, seed in _map(run, cells, threads):
        label = _cell_label(gamma=g, mu=m, sigma2=s, n=n, replicate=rep)
        seeds[label] = seed
        if why:
            flagged.append(f"{label}: {why}")
        ens_out[(g, m, s, n, rep)] = (ens, alpha)

    tail_rows, w1_rows = [], []
    for g, m, s, n, rep in cells:
        ens, alpha = ens_out[(g, m, s, n, rep)]
        tail_rows.append((g, m, s, _n_key(n), rep, alpha, int(ens.diverged_flags.sum())))
        if n == math.inf:
            continue
        on = ens_out[(g, m, s, math.inf, rep)][0].healthy()
        off = ens.healthy()
        if on.shape[0] == 0 or off.shape[0] == 0:
            w = NAN
        else:
            w = wp_empirical_1d(np.linalg.norm(on, axis=1), np.linalg.norm(off, axis=1), 1).distance
        w1_rows.append((g, m, s, int(n), rep, w))

    tables = {
        "closed_forms": Table("closed_forms",
                              ("gamma", "mu", "sigma2", "E_r_closed", "E_r_mc", "E_r_se",
                               "E_R_bound_closed", "E_R_inner_mc", "E_R_inner_se", "E_R_mc",
                               "E_R_se", "masked", "below_one"), cf_rows),
        "roots": Table("roots", ("gamma", "mu", "sigma2", "alpha_r", "residual_r", "beta_R",
                                 "residual_R", "mc_samples"), root_rows),
        "tail_estimates": Table("tail_estimates", ("gamma", "mu", "sigma2", "n", "replicate",
                                                   "alpha_hat", "diverged"), tail_rows),
        "w1_norms": Table("w1_norms", ("gamma", "mu", "sigma2", "n", "replicate", "w1"), w1_rows),
    }
    return _result(spec, tables, seeds, flagged, {})


# ---------------------------------------------------------------------------
# estimator calibration


def calibration_trial(alpha: float, m: int, block_length: int, seed: int) -> float:
    """One block estimate on ``m`` fresh symmetric stable draws, all of them in blocks."""
    stream = RngStream(seed)
    x = stable_variates(alpha, m, stream.generator)
    k1 = m // block_length
    return ti.estimate_alpha(x, K1=k1, K2=block_length,
                             rng=RngStream(derive_seed(seed, "permutation"))).alpha_hat


def exp_estimator_calibration(spec: ExperimentSpec, threads: int = 1) -> ExperimentResult:
    """Mean and spread of the block estimator on exact stable samples."""
    _require(spec, "estimator_calibration")
    cells = [(a, int(m)) for a in spec.alphas for m in spec.ms]
    seeds = {}

    def run(cell):
        a, m = cell
        vals = []
        for t in range(spec.trials):
            s = _chain_seed(spec, "calibration", float(a), m, t)
            vals.append(calibration_trial(a, m, spec.block_length, s))
        return cell, np.array(vals)

    rows = []
    for (a, m), vals in _map(run, cells, threads):
        seeds[_cell_label(alpha=a, m=m)] = _chain_seed(spec, "calibration", float(a), m, 0)
        mean = float(vals.mean())
        rows.append((a, m, m // spec.block_length, spec.block_length, spec.trials, mean,
                     float(vals.std(ddof=1)), abs(mean - a)))
    tables = {"calibration": Table("calibration",
                                   ("alpha", "m", "K1", "K2", "trials", "mean_alpha_hat",
                                    "std_alpha_hat", "abs_bias"), rows)}
    return _result(spec, tables, seeds, [], {})


# ---------------------------------------------------------------------------


def _require(spec, scenario):
    if spec.scenario != scenario:
        raise InvalidArgumentError(f"spec {spec.name!r} has scenario {spec.scenario!r}, "
                                   f"expected {scenario!r}")


def _result(spec, tables, seeds, flagged, data) -> ExperimentResult:
    for name, dseed in ((f"data,replicate={rep}", v[1]) for rep, v in data.items()):
        seeds[name] = dseed
    return ExperimentResult(spec, tables, {"seeds": dict(sorted(seeds.items())),
                                           "flagged": flagged})


RUNNERS = {
    "histograms": exp_histograms,
    "tail_suite": exp_tail_suite,
    "theory_suite": exp_theory_suite,
    "strongly_convex_suite": exp_strongly_convex_suite,
    "estimator_calibration": exp_estimator_calibration,
}


def run_spec(spec: ExperimentSpec, threads: int = 1) -> ExperimentResult:
    """Dispatch on the scenario; wall-clock seconds go to ``metadata['wall_clock']``."""
    t0 = time.perf_counter()
    res = RUNNERS[spec.scenario](spec, threads=threads)
    res.metadata["wall_clock"] = time.perf_counter() - t0
    res.metadata["seed"] = spec.base_seed
    return res


__all__ = [
    "CellError",
    "ExperimentResult",
    "ExperimentSpec",
    "RUNNERS",
    "SCENARIOS",
    "TABLES",
    "Table",
    "calibration_trial",
    "exp_estimator_calibration",
    "exp_histograms",
    "exp_strongly_convex_suite",
    "exp_tail_suite",
    "exp_theory_suite",
    "run_spec",
]
