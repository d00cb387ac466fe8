import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hmglab.cascade import (
    CascadeError,
    CascadeRecord,
    flatness_defect,
    gap_and_rate,
    gap_bound,
    monotonicity_report,
    run_cascade,
    step4_diagnostic,
    tau_defects,
    two_scale_check,
    variance_defect,
)
from hmglab.coefficients import constant_model, crowding_model
from hmglab.configspace import GridBudgetError
from hmglab.sectorsolver import Context, Discretization


def synthetic(m, abar, astar, J=None):
    gap = abs(abar - astar)
    return CascadeRecord(
        m=m,
        h=0.5,
        abar=((float(abar),),),
        abarstar=((float(astar),),),
        J=(0.5 * (abar - astar) if J is None else J,),
        gap=gap,
        V=0.0,
        flatness=0.0,
        optimizer_gap=0.0,
        truncated_mass=1.0,
        low_mass=False,
    )


def test_rate_fit_recovers_exact_exponent():
    recs = [synthetic(m, 1.0 + 3.0**-m, 1.0 - 3.0**-m) for m in range(5)]
    fit = gap_and_rate(recs)
    assert not fit.degenerate
    assert abs(fit.alpha - 1.0) <= 1e-6
    assert abs(fit.C - 1.0) <= 1e-6
    assert fit.gap_bound_ok


@given(alpha=st.floats(0.2, 2.0), C=st.floats(0.1, 5.0))
@settings(max_examples=30, deadline=None)
def test_rate_fit_recovers_any_exponent(alpha, C):
    recs = [synthetic(m, 1.5 + C * 3.0 ** (-alpha * m), 1.5 - C * 3.0 ** (-alpha * m)) for m in range(4)]
    fit = gap_and_rate(recs)
    assert abs(fit.alpha - alpha) <= 1e-6
    assert abs(fit.C / C - 1.0) <= 1e-6


def test_rate_fit_degenerate_for_exact_homogenization():
    recs = [synthetic(m, 2.0, 2.0) for m in range(3)]
    fit = gap_and_rate(recs)
    assert fit.degenerate
    assert fit.alpha is None
    assert "exact homogenization" in fit.note
    with pytest.raises(ValueError):
        gap_and_rate(recs[:2])
    with pytest.raises(ValueError):
        gap_and_rate(recs, reference="median")


def test_rate_fit_largest_reference_excludes_last_level():
    recs = [synthetic(m, 1.0 + 3.0**-m, 1.0) for m in range(5)]
    fit = gap_and_rate(recs, reference="largest")
    assert 4 not in fit.levels_used
    assert "excluded" in fit.note


@given(
    a=st.floats(1.0, 5.0),
    b=st.floats(1.0, 5.0),
    c=st.floats(-1.0, 1.0),
    shrink=st.floats(0.0, 1.0),
)
@settings(max_examples=100, deadline=None)
def test_gap_bound_holds_for_ordered_pairs(a, b, c, shrink):
    # abar symmetric positive definite, abar_* = Id + shrink * (abar - Id) lies between Id and abar
    abar = np.array([[a, c * math.sqrt(a * b) * 0.5], [c * math.sqrt(a * b) * 0.5, b]]) + np.eye(2)
    astar = np.eye(2) + shrink * (abar - np.eye(2))
    gap, bound = gap_bound(abar, astar)
    assert gap <= bound + 1e-12


def test_gap_bound_one_dimensional_values():
    gap, bound = gap_bound(np.array([[2.0]]), np.array([[1.5]]))
    assert gap == pytest.approx(0.5, abs=1e-15)
    # C = sqrt(2 * 2), sup J = 0.25
    assert bound == pytest.approx(math.sqrt(4.0) * math.sqrt(0.25), abs=1e-15)


def test_tau_defects_hand_values():
    recs = [synthetic(0, 2.0, 1.0), synthetic(1, 1.8, 1.25), synthetic(2, 1.7, 1.6)]
    taus = tau_defects(recs)
    assert taus[0] == pytest.approx(0.5 * 0.2 + 0.5 * (1.0 - 0.8), abs=1e-14)
    assert taus[1] == pytest.approx(0.5 * 0.1 + 0.5 * (0.8 - 1 / 1.6), abs=1e-14)


@given(steps=st.lists(st.tuples(st.floats(0.0, 0.3), st.floats(0.0, 0.3)), min_size=2, max_size=6))
@settings(max_examples=60, deadline=None)
def test_tau_sum_controls_inverse_astar(steps):
    """For a monotone squeeze the tau sum telescopes and bounds the change of abar_*^{-1}."""
    abar, astar = 3.0, 1.0
    recs = [synthetic(0, abar, astar)]
    for m, (da, ds) in enumerate(steps, start=1):
        abar -= da * (abar - astar)
        astar += ds * (abar - astar)
        recs.append(synthetic(m, abar, astar))
    taus = tau_defects(recs)
    assert min(taus) >= -1e-12
    for n in range(len(recs)):
        for m in range(n + 1, len(recs)):
            lhs = sum(taus[n:m])
            rhs = abs(1 / recs[n].abarstar[0][0] - 1 / recs[m].abarstar[0][0]) / 2
            assert lhs >= rhs - 1e-12


def test_monotonicity_report_flags_violations():
    recs = [synthetic(0, 2.0, 1.0), synthetic(1, 2.1, 1.2), synthetic(2, 1.9, 1.1)]
    rep = monotonicity_report(recs, band=1e-8)
    assert not rep["abar_monotone"]
    assert not rep["abarstar_monotone"]
    assert rep["pairs"][0]["abar_increase"] == pytest.approx(0.1)
    assert rep["pairs"][1]["abarstar_decrease"] == pytest.approx(0.1)
    assert monotonicity_report(recs, band=0.2)["abar_monotone"]


def test_step4_geometric_self_test():
    beta = 2.0
    r = 0.5
    F = [r**n for n in range(6)]
    out = step4_diagnostic(F, beta)
    w = 3.0 ** (-beta / 2)
    closed = [(r ** (m + 1) - w ** (m + 1)) / (r - w) for m in range(6)]
    assert np.allclose(out["Ft"], closed, rtol=1e-12, atol=0)
    assert abs(out["theta_hat"] - closed[-1] / closed[-2]) <= 1e-6
    assert out["theta_hat"] < 1
    assert out["contraction"]


def test_step4_no_contraction_for_growing_input():
    out = step4_diagnostic([1.0, 2.0, 4.0, 8.0], 2.0)
    assert not out["contraction"]
    assert out["theta_hat"] > 1
    with pytest.raises(ValueError):
        step4_diagnostic([1.0, 1.0], 2.0)
    with pytest.raises(ValueError):
        step4_diagnostic([1.0, 1.0, 1.0], 0.0)
    assert step4_diagnostic([0.0, 0.0, 1.0], 2.0)["theta_hat"] is None


def test_record_round_trip():
    rec = synthetic(2, 1.4, 1.2)
    assert CascadeRecord.from_dict(rec.to_dict()) == rec
    assert "timings" not in rec.to_dict()


CTX = Context(crowding_model(2.0), Discretization(h=0.5, n_max=3, allow_low_mass=True), "collar")


@given(scale=st.floats(0.1, 3.0))
@settings(max_examples=5, deadline=None)
def test_variance_and_flatness_scale_quadratically(scale):
    p, q = np.array([1.0]), np.array([0.7])
    v1 = variance_defect(1, p, q, CTX)
    f1 = flatness_defect(1, p, q, CTX)
    assert variance_defect(1, scale * p, scale * q, CTX) == pytest.approx(scale**2 * v1, rel=1e-8, abs=1e-14)
    assert flatness_defect(1, scale * p, scale * q, CTX) == pytest.approx(scale**2 * f1, rel=1e-8, abs=1e-14)


def test_defects_vanish_for_constant_model():
    ctx = Context(constant_model(2.0), Discretization(h=0.5, n_max=3, allow_low_mass=True), "collar")
    assert variance_defect(1, [1.0], [2.0], ctx) <= 1e-18
    assert flatness_defect(1, [1.0], [2.0], ctx) <= 1e-18
    lhs, rhs = two_scale_check(1, 0, [1.0], [2.0], ctx)
    assert abs(lhs) <= 1e-12 and abs(rhs) <= 1e-10


def test_two_scale_trivial_and_rejected_cases():
    lhs, rhs = two_scale_check(1, 1, [1.0], [1.2], CTX)
    assert lhs == 0.0 and rhs == 0.0
    with pytest.raises(ValueError):
        two_scale_check(0, 1, [1.0], [1.0], CTX)
    bad = Context(crowding_model(2.0), Discretization(h=0.4, n_max=2, allow_low_mass=True), "interior")
    with pytest.raises(ValueError):
        two_scale_check(1, 0, [1.0], [1.0], bad)


def test_two_scale_lhs_is_nonnegative_and_zero_for_equal_fields():
    ctx = Context(crowding_model(2.0), Discretization(h=0.5, n_max=2, allow_low_mass=True), "interior")
    lhs, rhs = two_scale_check(1, 0, [1.0], [1.1], ctx)
    assert lhs >= 0.0
    assert math.isfinite(rhs)


def test_constant_cascade_is_exact():
    ctx = Context(constant_model(2.0), Discretization(h=0.5, n_max=3, allow_low_mass=True), "collar")
    recs = run_cascade([0, 1], ctx)
    for r in recs:
        assert abs(r.abar[0][0] - 2.0) <= 1e-10
        assert abs(r.abarstar[0][0] - 2.0) <= 1e-10
        assert r.gap <= 1e-10
        assert abs(r.J[0]) <= 1e-10
    assert abs(recs[0].tau) <= 1e-10
    assert recs[-1].tau is None


def test_failed_level_keeps_completed_records():
    ctx = Context(crowding_model(2.0), Discretization(h=0.5, n_max=3, allow_low_mass=True, memory_budget=60), "interior")
    seen = []
    with pytest.raises(CascadeError) as err:
        run_cascade([0, 1], ctx, on_record=seen.append)
    assert [r.m for r in err.value.records] == [0]
    assert [r.m for r in seen] == [0]
    assert isinstance(err.value.__cause__, GridBudgetError)
