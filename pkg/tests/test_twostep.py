import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from hybridtrial.design import DesignParams, SummaryStats, derive
from hybridtrial.methods import MethodSpec, evaluate_batch, evaluate_one
from hybridtrial.twostep import (InfeasibleSplit, SplitSpec, approach1_variance,
                                 approach2_critical, approach2_critical_std, approach3_criticals,
                                 approach3_criticals_std, approach3_levels, approach4_critical,
                                 approach4_critical_std, pooled_bounds, yuan_type1_error,
                                 yuan_type1_error_std)

from oracles import keep_branch_tail, two_branch_reject_prob

ALPHA = 0.05
C = stats.norm.ppf(1 - ALPHA / 2)
CANON = DesignParams()
D = derive(CANON)


def test_yuan_analytic_matches_conditioning_oracle():
    ref = two_branch_reject_prob(C, C, D.rho, D.theta_std)
    assert yuan_type1_error(D, ALPHA) == pytest.approx(ref, abs=1e-9)
    assert ref == pytest.approx(0.0599, abs=1e-4)


@pytest.mark.parametrize("rho", np.linspace(0.1, 0.9, 9))
def test_yuan_inflated_on_grid(rho):
    t = np.linspace(0.05, 3.0, 20)
    vals = yuan_type1_error_std(rho, t, ALPHA)
    assert np.all(vals > ALPHA)


def test_yuan_vectorized_matches_exact():
    for rho, t in [(0.3, 0.2), (0.57735, 0.39638), (0.85, 2.5)]:
        assert float(yuan_type1_error_std(rho, t, ALPHA)) == pytest.approx(
            yuan_type1_error_std(rho, t, ALPHA, exact=True), abs=1e-13)


def test_yuan_no_inflation_without_borrowing():
    assert yuan_type1_error(derive(DesignParams(delta_eq=0.1)), ALPHA) == ALPHA
    assert float(yuan_type1_error_std(0.5, 0.0, ALPHA)) == pytest.approx(ALPHA)


def test_approach2_exact_size():
    z = approach2_critical(D, ALPHA)
    assert two_branch_reject_prob(z, z, D.rho, D.theta_std) == pytest.approx(ALPHA, abs=1e-9)
    assert z == pytest.approx(float(approach2_critical_std(D.rho, D.theta_std, ALPHA)), abs=1e-9)
    assert z > C


def test_approach4_exact_size_and_only_borrow_branch_moves():
    z = approach4_critical(D, ALPHA)
    assert two_branch_reject_prob(C, z, D.rho, D.theta_std) == pytest.approx(ALPHA, abs=1e-9)
    out = evaluate_one(MethodSpec.parse("A4"), SummaryStats(0.5, 0.2, D.se_y1, D.se_y2, D.rho),
                       CANON)
    assert not out.borrowed and out.critical_value == pytest.approx(C)


@pytest.mark.parametrize("v", [0.25, 0.5, 0.75])
def test_approach3_branch_allocation(v):
    z1, z2 = approach3_criticals(D, ALPHA, SplitSpec(v))
    assert 2 * keep_branch_tail(z1, D.rho, D.theta_std) == pytest.approx(v * ALPHA, abs=1e-10)
    pb = D.borrow_prob
    assert 2 * stats.norm.sf(z2) * pb == pytest.approx((1 - v) * ALPHA, abs=1e-12)
    assert two_branch_reject_prob(z1, z2, D.rho, D.theta_std) == pytest.approx(ALPHA, abs=1e-9)
    vz1, vz2 = approach3_criticals_std(D.rho, D.theta_std, ALPHA, v)
    assert float(vz1) == pytest.approx(z1, abs=1e-9)
    assert float(vz2) == pytest.approx(z2, abs=1e-12)


def test_approach3_reference_row():
    a1, a2, astar = approach3_levels(D, ALPHA, SplitSpec(0.5))
    assert (round(astar, 4), round(a1, 4), round(a2, 4)) == (0.0439, 0.0273, 0.0811)


def test_approach3_split_matching_a2_reproduces_a2():
    # the split that equalizes branch critical values is the A2 allocation
    z = approach2_critical(D, ALPHA)
    v = 2 * keep_branch_tail(z, D.rho, D.theta_std) / ALPHA
    z1, z2 = approach3_criticals(D, ALPHA, SplitSpec(v))
    assert z1 == pytest.approx(z, abs=1e-8)
    assert z2 == pytest.approx(z, abs=1e-8)


def test_approach3_infeasible_split():
    d = derive(DesignParams(delta_eq=0.30, alpha_eq=0.45))
    # borrowing is almost certain: the keep branch cannot absorb a large share
    assert d.beta_eq < 0.03
    with pytest.raises(InfeasibleSplit):
        approach3_criticals(d, 0.2, SplitSpec(0.9))
    z1, z2 = approach3_criticals_std(d.rho, d.theta_std, 0.2, 0.9, strict=False)
    assert math.isnan(float(z1)) and math.isnan(float(z2))


def test_approach1_variance_closed_form_vs_mc():
    rng = np.random.default_rng(3)
    n = 1_000_000
    for delta in (0.0, 0.25):
        z = rng.standard_normal((n, 2))
        y2 = delta + D.se_y2 * z[:, 1]
        y1 = D.se_y1 * (D.rho * z[:, 1] + math.sqrt(1 - D.rho ** 2) * z[:, 0])
        y = y1 - D.w_star * y2 * (np.abs(y2) < D.theta)
        v = approach1_variance(D, delta)
        # sampling SD of the variance estimate is about var * sqrt(2/n)
        assert v == pytest.approx(y.var(), abs=5 * v * math.sqrt(2 / n))
    # variance reduction holds at delta = 0, not necessarily at the margin
    assert approach1_variance(D, 0.0) < D.se_y1 ** 2


def test_pooled_bias_bound_formula():
    b = pooled_bounds(D, ALPHA)
    assert b.bias_bound == pytest.approx(D.w_star * D.theta * D.alpha_eq, rel=1e-14)
    assert ALPHA <= b.type1_bound <= b.type1_bound_loose


@settings(max_examples=60, deadline=None)
@given(st.floats(-0.6, 0.6), st.floats(-0.3, 0.3), st.floats(0.05, 0.3),
       st.floats(0.05, 0.3), st.floats(0.05, 0.9))
def test_scalar_and_batch_rules_agree(y1, y2, se1, se2, rho):
    params = DesignParams(alpha_eq=0.1, delta_eq=0.3)
    s = SummaryStats(y1, y2, se1, se2, rho)
    for label in ("NoBorrow", "Yuan", "A1", "A2", "A3@0.5", "A4", "PowerPrior"):
        spec = MethodSpec.parse(label)
        try:
            one = evaluate_one(spec, s, params)
        except InfeasibleSplit:
            continue
        many = evaluate_batch(spec, s, params)
        assert bool(many.borrowed[0]) == one.borrowed
        assert float(many.statistic[0]) == pytest.approx(one.statistic, rel=1e-7, abs=1e-9)
        assert float(many.critical[0]) == pytest.approx(one.critical_value, abs=1e-7)
        if abs(abs(one.statistic) - one.critical_value) > 1e-6:
            assert bool(many.reject[0]) == one.reject


@settings(max_examples=60, deadline=None)
@given(st.floats(0.05, 0.95), st.floats(0.05, 3.0))
def test_calibrated_critical_values_ordered(rho, t):
    z2 = float(approach2_critical_std(rho, t, ALPHA))
    z4 = float(approach4_critical_std(rho, t, ALPHA))
    # common adjustment spreads over both branches; A4 concentrates it on one
    assert C <= z2 <= z4 + 1e-9


def test_non_borrow_branch_matches_no_borrow():
    s = SummaryStats(0.31, 0.3, D.se_y1, D.se_y2, D.rho)
    nb = evaluate_one(MethodSpec.parse("NoBorrow"), s, CANON)
    for label in ("Yuan", "A1", "A4"):
        o = evaluate_one(MethodSpec.parse(label), s, CANON)
        assert not o.borrowed
        assert o.statistic == pytest.approx(nb.statistic)
        assert o.reject == nb.reject


def test_split_validation():
    with pytest.raises(ValueError):
        SplitSpec(0.0)
    with pytest.raises(ValueError):
        MethodSpec.parse("A5")
    assert MethodSpec.parse("A3@0.25").label == "A3@0.25"
    assert MethodSpec.parse("A3").split.v == 0.5
