import math

import numpy as np
import pytest

from htsgd import theory_oracles as th
from htsgd.experiments import TABLES, CellError, ExperimentSpec, Table, run_spec

SMALL = {
    "histograms": dict(d=2, etas=(0.01,), bs=(1,), ns=(20, 40), chains=40, iterations=200,
                       burn_in=50),
    "tail_suite": dict(etas=(0.01,), bs=(1,), ns=(20, 40), chains=100, iterations=200,
                       burn_in=50, replicates=2),
    "theory_suite": dict(etas=(0.01,), bs=(1,), ns=(20,), chains=60, iterations=300,
                         burn_in=50, mc=2000, probe_steps=150, probe_every=50),
    "strongly_convex_suite": dict(bs=(1,), ns=(20,), chains=60, iterations=200, burn_in=50,
                                  mc=5000),
    "estimator_calibration": dict(alphas=(1.5,), ms=(2000,), trials=3),
}


def _spec(scenario, name="t", **kw):
    return ExperimentSpec(name, scenario, **{**SMALL[scenario], **kw})


def _csv_bytes(result, tmp_path, sub):
    out = tmp_path / sub
    result.write(out)
    return {p.name: p.read_bytes() for p in sorted(out.iterdir())}


# ---------------------------------------------------------------------------
# spec validation


@pytest.mark.parametrize("scenario, kw, fragment", [
    ("histograms", dict(bs=(4,), ns=(2,)), "b=4, n=2"),
    ("theory_suite", dict(d=2), "d = 1"),
    ("strongly_convex_suite", dict(bs=(2,)), "b = 1"),
    ("histograms", dict(etas=()), "etas"),
    ("estimator_calibration", dict(ms=(150,)), "m=150"),
    ("tail_suite", dict(burn_in=500), "burn_in"),
])
def test_invalid_specs_raise_cell_errors(scenario, kw, fragment):
    with pytest.raises(CellError) as info:
        _spec(scenario, name="bad", **kw)
    assert fragment in str(info.value)
    assert "spec 'bad'" in str(info.value)


def test_unknown_scenario():
    with pytest.raises(CellError):
        ExperimentSpec("x", "figures")


def test_spec_dict_encodes_online_sentinel():
    spec = _spec("tail_suite", ns=(50, math.inf))
    assert spec.to_dict()["ns"] == [50, "inf"]
    assert spec.finite_ns() == [50]


def test_table_csv_format(tmp_path):
    t = Table("x", ("a", "b", "c", "d"), [(1, 0.1, True, None), (2, float("nan"), False, "s")])
    p = tmp_path / "x.csv"
    t.to_csv(p)
    assert p.read_bytes() == b"a,b,c,d\n1,0.1,1,\n2,nan,0,s\n"
    assert t.column("a") == [1, 2]
    assert t.where(a=2)[0]["d"] == "s"


# ---------------------------------------------------------------------------
# table sets, replay, order independence


@pytest.mark.parametrize("scenario", sorted(TABLES))
def test_full_nonempty_table_set(scenario, tmp_path):
    res = run_spec(_spec(scenario))
    assert set(res.tables) == set(TABLES[scenario])
    for name in TABLES[scenario]:
        assert len(res.table(name).rows) > 0, name
    files = _csv_bytes(res, tmp_path, "a")
    assert set(files) == {f"{n}.csv" for n in TABLES[scenario]} | {"manifest.json"}
    assert b"wall_clock" not in files["manifest.json"]


@pytest.mark.parametrize("scenario", sorted(TABLES))
def test_replay_is_bit_exact(scenario, tmp_path):
    a = _csv_bytes(run_spec(_spec(scenario, base_seed=11)), tmp_path, "a")
    b = _csv_bytes(run_spec(_spec(scenario, base_seed=11)), tmp_path, "b")
    assert a == b


def test_threads_do_not_change_tables(tmp_path):
    a = _csv_bytes(run_spec(_spec("tail_suite"), threads=1), tmp_path, "a")
    b = _csv_bytes(run_spec(_spec("tail_suite"), threads=3), tmp_path, "b")
    assert a == b


def test_grid_order_only_permutes_rows():
    a = run_spec(_spec("tail_suite", etas=(0.01, 0.02), ns=(20, 40)))
    b = run_spec(_spec("tail_suite", etas=(0.02, 0.01), ns=(40, 20)))
    for name in TABLES["tail_suite"]:
        ra = sorted(map(repr, a.table(name).rows))
        rb = sorted(map(repr, b.table(name).rows))
        assert ra == rb, name


def test_seeds_differ_between_cells():
    seeds = run_spec(_spec("histograms")).metadata["seeds"]
    assert len(set(seeds.values())) == len(seeds)


# ---------------------------------------------------------------------------
# histograms


def test_zero_step_keeps_initial_norm():
    res = run_spec(_spec("histograms", d=3, etas=(0.0,), x0="constant", x0_value=2.0))
    for row in res.table("norm_summary").where():
        assert row["mean"] == pytest.approx(2.0 * math.sqrt(3), abs=1e-12)
        assert row["std"] == pytest.approx(0.0, abs=1e-12)
        assert row["outliers"] == 0


def test_histogram_rows_equal_bins():
    res = run_spec(_spec("histograms", ns=(30,), chains=100, bins=17))
    assert len(res.table("histogram").rows) == 17
    assert sum(res.table("histogram").column("count")) == 100


def test_divergent_cell_is_flagged_not_fatal():
    res = run_spec(_spec("histograms", etas=(0.01, 50.0), iterations=300))
    rows = res.table("norm_summary").where(eta=50.0)
    assert all(r["flagged"] == 1 and r["diverged"] == 40 for r in rows)
    assert res.metadata["flagged"]
    assert res.table("histogram").where(eta=0.01)


def test_outlier_counts_grow_with_n():
    spec = ExperimentSpec("h", "histograms", d=100, etas=(0.008,), bs=(1,), ns=(100, 500),
                          chains=1000, iterations=1000, burn_in=500, replicates=5, base_seed=3)
    t = run_spec(spec).table("norm_summary")
    med = [np.median([r["outliers"] for r in t.where(n=n)]) for n in (100, 500)]
    assert med[0] <= med[1], med


# ---------------------------------------------------------------------------
# tail suite


def test_online_sentinel_gives_zero_gap():
    res = run_spec(_spec("tail_suite", ns=(math.inf, 40)))
    rows = res.table("alpha_gap").where(n="inf")
    assert rows and all(r["median_gap"] == 0.0 and r["max_gap"] == 0.0 for r in rows)


def test_diagnostics_cover_replicate_zero_cells():
    res = run_spec(_spec("tail_suite"))
    kinds = {(r["n"], r["kind"]) for r in res.table("diagnostics").where()}
    assert {("inf", "qq"), (20, "loglog"), (40, "ccdf")} <= kinds


# ---------------------------------------------------------------------------
# theory suite


def test_theory_suite_ergodicity_and_bounds():
    res = run_spec(_spec("theory_suite", chains=400, iterations=1000, burn_in=200,
                         probe_steps=1000))
    fit = res.table("ergodicity_fit").where()[0]
    assert fit["slope"] < 0 and fit["r2"] >= 0.8
    b = res.table("bound_check").where()[0]
    assert 0 < b["delta"] < 1 and b["rhs"] > 0
    assert b["holds"] == int(b["lhs_w1"] <= b["rhs"])


def test_sandwich_slopes_tighten_with_n():
    spec = ExperimentSpec("s", "theory_suite", etas=(0.005,), bs=(1,), ns=(50, 500), chains=1000,
                          iterations=3000, burn_in=500, replicates=10, mc=10_000,
                          pair_reference_factor=1, base_seed=4)
    t = run_spec(spec).table("sandwich_slopes")
    gap = {n: np.median([abs(r["slope_offline"] - r["slope_online"]) for r in t.where(n=n)])
           for n in (50, 500)}
    assert gap[500] < gap[50], gap


# ---------------------------------------------------------------------------
# strongly convex suite


def test_closed_form_table_values():
    res = run_spec(_spec("strongly_convex_suite", mus=(0.1, 2.5), mc=100_000))
    row = res.table("closed_forms").where(mu=0.1)[0]
    assert row["E_r_closed"] == pytest.approx(0.735759, abs=1e-6)
    assert row["E_R_bound_closed"] == th.expected_R_closed_form(0.1, 0.1, 1.0)
    assert row["E_r_closed"] < 1 and row["E_R_bound_closed"] < 1 and row["below_one"] == 1
    masked = res.table("closed_forms").where(mu=2.5)[0]
    assert masked["masked"] == 1 and math.isnan(masked["E_R_bound_closed"])
    root = res.table("roots").where(mu=0.1)[0]
    assert root["beta_R"] > 1 and abs(root["residual_R"]) <= 1e-9


def test_logistic_w1_shrinks_with_n():
    spec = ExperimentSpec("s", "strongly_convex_suite", bs=(1,), ns=(50, 500), chains=3000,
                          iterations=1000, burn_in=200, replicates=10, mc=10_000, base_seed=5)
    t = run_spec(spec).table("w1_norms")
    med = {n: np.median([r["w1"] for r in t.where(n=n)]) for n in (50, 500)}
    assert med[500] < med[50], med


# ---------------------------------------------------------------------------
# estimator calibration


def test_calibration_gaussian_boundary():
    spec = ExperimentSpec("c", "estimator_calibration", alphas=(2.0,), ms=(10**6,), trials=20)
    row = run_spec(spec).table("calibration").where()[0]
    assert 1.85 <= row["mean_alpha_hat"] <= 2.1
    assert (row["K1"], row["K2"]) == (10**4, 100)


def test_calibration_spread_shrinks():
    spec = ExperimentSpec("c", "estimator_calibration", alphas=(1.5,), ms=(10**4, 10**6),
                          trials=20)
    t = run_spec(spec).table("calibration")
    assert t.where(m=10**4)[0]["std_alpha_hat"] > t.where(m=10**6)[0]["std_alpha_hat"]
