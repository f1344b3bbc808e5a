import json
import math

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, optimize

from htsgd import theory_oracles as th
from htsgd.errors import InvalidArgumentError, NoRootError, NotContractiveError, StabilityError
from htsgd.rng import RngStream


def _mp_log_moment(c, b, alpha):
    """log E|1 - c X|^alpha for X ~ chi2_b, integrated in x with mpmath."""
    k = mp.mpf(b) / 2
    f = lambda x: abs(1 - c * x) ** alpha * x ** (k - 1) * mp.e ** (-x / 2) / (2 ** k * mp.gamma(k))
    return mp.log(mp.quad(f, [0, 1 / c, 2 / c, 4 / c, mp.inf]))


def _mp_root(eta, b, lo=0.5, hi=4000.0):
    with mp.workdps(30):
        c = mp.mpf(eta) / b
        lo, hi = mp.mpf(lo), mp.mpf(hi)
        for _ in range(45):
            mid = (lo + hi) / 2
            if _mp_log_moment(c, b, mid) < 0:
                lo = mid
            else:
                hi = mid
        return float((lo + hi) / 2)


# ---------------------------------------------------------------------------
# contraction statistics


def test_delta_near_identity():
    st_ = th.contraction_stats_quadratic(1e-9, 1.0, 1, 1, 1000, RngStream(0))
    assert abs(st_.delta - 1.0) <= 1e-6


def test_delta_against_brute_force_mc():
    st_ = th.contraction_stats_quadratic(0.5, 1.0, 1, 1, 10**6, RngStream(1))
    chi = np.random.default_rng(2).chisquare(1, size=10**7)
    ref = np.abs(1 - 0.5 * chi)
    se = math.hypot(st_.std_err_delta, ref.std() / math.sqrt(ref.size))
    assert abs(st_.delta - ref.mean()) <= 3 * se


def test_delta_at_least_one_when_b_below_d():
    for eta in (0.01, 0.3, 2.0):
        st_ = th.contraction_stats_quadratic(eta, 1.3, 1, 2, 2000, RngStream(3))
        assert st_.delta >= 1 - 1e-9


def test_jensen_between_moments():
    st_ = th.contraction_stats_quadratic(0.3, 1.0, 2, 1, 10**5, RngStream(4))
    assert st_.log_moment <= math.log(st_.delta) + 3 * st_.std_err_delta / st_.delta


def test_contraction_mc_floor():
    with pytest.raises(InvalidArgumentError):
        th.contraction_stats_quadratic(0.1, 1.0, 1, 1, 99, RngStream(0))


@pytest.mark.parametrize("b, d", [(5, 3), (2, 4), (1, 3)])
def test_spectral_norms_match_dense_matrices(b, d):
    eta, sigma, mc = 0.2, 1.1, 200
    got = th.sample_contraction_norms(eta, sigma, b, d, mc, RngStream(5))
    a = RngStream(5).generator.normal(0.0, sigma, size=(mc, b, d))
    want = [np.linalg.norm(np.eye(d) - eta * ai.T @ ai / b, 2) for ai in a]
    assert np.allclose(got, want, rtol=1e-12, atol=1e-12)


# ---------------------------------------------------------------------------
# generic root solver


def test_two_point_law_with_exact_root():
    # E g = 1 for g uniform on {0.5, 1.5}, and E log g < 0: the root is 1
    g = np.tile([0.5, 1.5], 500)
    est = th.solve_exponent_from_values(g, tol=1e-12)
    assert est.exponent == pytest.approx(1.0, abs=1e-9)
    assert abs(est.residual) <= 1e-12


def test_symmetric_two_point_law_is_not_contractive():
    # 0.5 and 2 have E log g = 0, so there is no positive root
    with pytest.raises(NotContractiveError):
        th.solve_exponent_from_values(np.tile([0.5, 2.0], 10))


def test_two_point_root_against_scalar_solver():
    g = np.tile([0.3, 1.8], 50)
    want = optimize.brentq(lambda a: 0.5 * 0.3 ** a + 0.5 * 1.8 ** a - 1.0, 0.1, 50, xtol=1e-14)
    assert th.solve_exponent_from_values(g).exponent == pytest.approx(want, abs=1e-9)


def test_all_factors_below_one():
    with pytest.raises(NoRootError):
        th.solve_exponent_from_values(np.full(100, 0.9))


def test_bad_values_rejected():
    with pytest.raises(InvalidArgumentError):
        th.solve_exponent_from_values([0.5, -1.0])


def test_cap_reached():
    g = np.concatenate([np.full(10**4 - 1, 0.99), [1.01]])
    with pytest.raises(NoRootError):
        th.solve_exponent_from_values(g)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_root_valid_and_curve_convex(seed):
    rng = np.random.default_rng(seed)
    g = np.abs(1 - 0.6 * rng.chisquare(1, size=2000))
    with np.errstate(divide="ignore"):
        log_g = np.log(g)
    h = th._log_moment_curve(log_g)
    grid = np.linspace(0.0, 6.0, 61)
    vals = np.array([h(a) for a in grid])
    assert np.all(np.diff(vals, 2) >= -1e-9)
    est = th.solve_exponent_from_values(g, tol=1e-10)
    assert abs(h(est.exponent)) <= 1e-10
    lo, hi = est.bracket
    assert lo < est.exponent < hi


def test_general_sampler_uses_common_numbers():
    sampler = th.logreg_factor_sampler("R", 0.1, 0.1, 1.0)
    a = th.solve_exponent_general(sampler, 10**5, rng=RngStream(6))
    b = th.solve_exponent_general(sampler, 10**5, rng=RngStream(6))
    assert a == b


# ---------------------------------------------------------------------------
# quadratic model exponents


def test_exact_root_matches_mpmath_oracle_eta_001():
    est = th.solve_alpha_quadratic(0.01, 1.0, 1, 1, mc=10**6, max_exponent=1e4)
    assert abs(est.exponent - _mp_root(0.01, 1)) <= 0.05


def test_exact_root_heavy_regime_matches_mpmath():
    est = th.solve_alpha_quadratic(0.5, 1.0, 1, 1)
    assert est.exponent == pytest.approx(_mp_root(0.5, 1, 0.5, 50.0), abs=1e-6)


def test_mc_route_matches_exact_route_in_heavy_regime():
    exact = th.solve_alpha_quadratic(0.8, 1.0, 1, 1).exponent
    mc = th.solve_alpha_quadratic(0.8, 1.0, 1, 1, mc=10**6, rng=RngStream(7), method="mc").exponent
    assert abs(exact - mc) <= 0.05


def test_log_moment_against_mpmath():
    with mp.workdps(30):
        want = float(_mp_log_moment(mp.mpf(0.3) / 2, 2, mp.mpf(3.5)))
    assert th.quadratic_log_moment(0.3, 1.0, 2, 3.5) == pytest.approx(want, rel=1e-9, abs=1e-12)


def test_default_cap_excludes_small_steps():
    with pytest.raises(NoRootError):
        th.solve_alpha_quadratic(0.01, 1.0, 1, 1)


def test_mc_never_sees_growth_at_small_steps():
    with pytest.raises(NoRootError):
        th.solve_alpha_quadratic(0.01, 1.0, 1, 1, mc=10**5, rng=RngStream(0), method="mc")


def test_not_contractive():
    with pytest.raises(NotContractiveError):
        th.solve_alpha_quadratic(3.0, 1.0, 1, 1)


def test_step_size_ordering_example():
    a4 = th.solve_alpha_quadratic(0.004, 1.0, 1, 1, max_exponent=1e4).exponent
    a8 = th.solve_alpha_quadratic(0.008, 1.0, 1, 1, max_exponent=1e4).exponent
    assert a4 > a8


def test_batch_ordering_example():
    a1 = th.solve_alpha_quadratic(0.008, 1.0, 1, 1, max_exponent=1e4).exponent
    a4 = th.solve_alpha_quadratic(0.008, 1.0, 4, 1, max_exponent=1e4).exponent
    assert a4 > a1


def test_monotone_over_grids():
    etas = [0.002, 0.004, 0.006, 0.008, 0.01]
    by_eta = [th.solve_alpha_quadratic(e, 1.0, 1, 1, max_exponent=1e4).exponent for e in etas]
    assert all(a > b for a, b in zip(by_eta, by_eta[1:]))
    by_b = [th.solve_alpha_quadratic(0.008, 1.0, b, 1, max_exponent=1e4).exponent
            for b in (1, 2, 4, 8)]
    assert all(a < b for a, b in zip(by_b, by_b[1:]))


def test_exponent_json_record():
    est = th.solve_alpha_quadratic(0.5, 1.0, 1, 1)
    rec = json.loads(est.to_json(eta=0.5, b=1))
    assert rec["eta"] == 0.5 and rec["exponent"] == est.exponent
    assert len(rec["bracket"]) == 2


# ---------------------------------------------------------------------------
# logistic model


def test_factor_examples():
    assert th.logreg_r(0.0, 0.0, 0.3) == 1.0 and th.logreg_R(0.0, 0.0, 0.3) == 1.0
    assert th.logreg_r(0.0, 10.0, 0.1) == pytest.approx(0.0, abs=1e-15)
    assert th.logreg_R(0.0, 10.0, 0.1) == pytest.approx(0.0, abs=1e-15)
    assert th.logreg_r(2.0, 5.0, 0.1) == pytest.approx(0.5)
    assert th.logreg_R(2.0, 5.0, 0.1) == pytest.approx(0.5)


@settings(max_examples=100, deadline=None)
@given(st.floats(-50, 50), st.floats(0, 100), st.floats(1e-4, 5))
def test_R_dominates_r(a, lam, gamma):
    assert th.logreg_R(a, lam, gamma) >= th.logreg_r(a, lam, gamma)


def test_expected_r_value():
    assert th.expected_r_closed_form(0.1, 0.1) == pytest.approx(0.735759, abs=1e-6)
    assert abs(th.expected_r_closed_form(1e-9, 1.0) - 1.0) <= 1e-6


def test_expected_r_against_quadrature():
    for gamma, mu in [(0.1, 0.1), (0.3, 1.0), (0.05, 2.0)]:
        f = lambda lam: abs(1 - gamma * lam) * mu * math.exp(-mu * lam)
        want = integrate.quad(f, 0, 1 / gamma)[0] + integrate.quad(f, 1 / gamma, np.inf)[0]
        assert th.expected_r_closed_form(gamma, mu) == pytest.approx(want, abs=1e-10)


def test_expected_r_against_mc():
    g = th.logreg_factor_sampler("r", 0.1, 0.1, 1.0)(RngStream(8).generator, 10**7)
    se = g.std() / math.sqrt(g.size)
    assert abs(th.expected_r_closed_form(0.1, 0.1) - g.mean()) <= 3 * se


def test_expected_R_value():
    assert th.expected_R_closed_form(0.1, 0.1, 1.0) == pytest.approx(0.729876, abs=1e-6)


def test_expected_R_formula_against_mpmath():
    with mp.workdps(30):
        g, mu, s2 = mp.mpf("0.1"), mp.mpf("0.1"), mp.mpf(1)
        want = (2 * mp.sqrt(2) * g / (mu * mp.sqrt(2 - s2 * mu)) * mp.e ** (-mu / g)
                - g * (1 / mu + s2 / 4) + 1)
    assert th.expected_R_closed_form(0.1, 0.1, 1.0) == pytest.approx(float(want), abs=1e-14)


def test_expected_R_stability():
    with pytest.raises(StabilityError):
        th.expected_R_closed_form(0.1, 2.5, 1.0)
    with pytest.raises(StabilityError):
        th.expected_R_closed_form(0.1, 1.0, 2.0)


def test_expected_R_bounds_mc():
    g = th.logreg_factor_sampler("R_inner", 0.1, 0.1, 1.0)(RngStream(9).generator, 10**7)
    se = g.std() / math.sqrt(g.size)
    assert th.expected_R_closed_form(0.1, 0.1, 1.0) >= g.mean() - 3 * se


@pytest.mark.parametrize("gamma", [0.05, 0.1, 0.3])
@pytest.mark.parametrize("mu, sigma2", [(0.1, 1.0), (0.5, 2.0), (1.0, 1.5)])
def test_closed_forms_over_grid(gamma, mu, sigma2):
    gen = RngStream(10).generator
    r = th.logreg_factor_sampler("r", gamma, mu, sigma2)(gen, 10**6)
    assert abs(th.expected_r_closed_form(gamma, mu) - r.mean()) <= 3 * r.std() / 1e3
    ri = th.logreg_factor_sampler("R_inner", gamma, mu, sigma2)(gen, 10**6)
    assert th.expected_R_closed_form(gamma, mu, sigma2) >= ri.mean() - 3 * ri.std() / 1e3


def test_r_root_matches_quadrature():
    gamma, mu = 0.1, 0.1

    def h(alpha):
        f = lambda lam: abs(1 - gamma * lam) ** alpha * mu * math.exp(-mu * lam)
        return math.log(integrate.quad(f, 0, 1 / gamma)[0] + integrate.quad(f, 1 / gamma, np.inf)[0])

    want = optimize.brentq(h, 0.5, 10)
    sampler = th.logreg_factor_sampler("r", gamma, mu, 1.0)
    got = th.solve_exponent_general(sampler, 10**6, rng=RngStream(11)).exponent
    assert abs(got - want) <= 0.05
    assert want == pytest.approx(2.0, abs=1e-8)  # E|1 - l/10|^2 = 1 for mean-10 exponentials


def test_beta_above_one():
    sampler = th.logreg_factor_sampler("R", 0.1, 0.1, 1.0)
    est = th.solve_exponent_general(sampler, 10**6, rng=RngStream(12))
    assert est.exponent > 1 and abs(est.residual) <= 1e-10


def test_unknown_factor_kind():
    with pytest.raises(InvalidArgumentError):
        th.logreg_factor_sampler("q", 0.1, 0.1, 1.0)(RngStream(0).generator, 5)


# ---------------------------------------------------------------------------
# bound right-hand side


def test_bound_rhs_examples():
    assert th.w1_bound_rhs(2.0, 0.1, 0.5, 0.0) == 0.0
    assert th.w1_bound_rhs(2.0, 0.1, 0.5, 1.0) == pytest.approx(0.4)
    assert th.w1_bound_rhs(2.0, 0.1, 0.999, 1.0) == pytest.approx(0.4 * 0.5 / 0.001)
    with pytest.raises(NotContractiveError):
        th.w1_bound_rhs(2.0, 0.1, 1.0, 1.0)


def test_moment_constant():
    assert th.moment_constant(np.array([[3.0, 4.0], [0.0, 0.0]]), 2.0) == pytest.approx(
        math.sqrt(12.5) + 1)
    assert th.moment_constant(np.array([-2.0, 2.0]), 1.0) == 3.0
