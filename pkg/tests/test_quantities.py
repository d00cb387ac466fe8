import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hmglab.coefficients import constant_model, crowding_model
from hmglab.configspace import SectorField, cube, triadic_cube
from hmglab.quantities import (
    InadmissibleFieldError,
    InvariantError,
    _combine,
    _harmonic_residual,
    abar_pair,
    bilinear,
    dirichlet_norm_sq,
    flux_average,
    gradient_average,
    j_value,
    nu,
    nu_star,
    optimizer_gap,
    quadratic_response_check,
)
from hmglab.sectorsolver import Context, Discretization, affine_field, cube_system

BOX = triadic_cube(1)
COLLAR = Context(crowding_model(2.0), Discretization(h=0.5, n_max=3, allow_low_mass=True), "collar")
INTERIOR = Context(crowding_model(2.0), Discretization(h=0.5, n_max=3, allow_low_mass=True), "interior")
CTX2 = Context(crowding_model(2.0, d=2), Discretization(h=0.5, n_max=2, allow_low_mass=True), "interior")

slopes = st.floats(-2, 2).filter(lambda x: abs(x) > 1e-3)


@pytest.fixture(scope="module", params=["interior", "collar"])
def ctx(request):
    return COLLAR if request.param == "collar" else INTERIOR


def test_abar_pair_ordering(ctx):
    abar, astar = abar_pair(BOX, ctx)
    assert 1.0 - 1e-12 <= astar[0, 0] <= abar[0, 0] <= 2.0 + 1e-12


@given(p=slopes)
@settings(max_examples=5, deadline=None)
def test_nu_and_nu_star_are_quadratic_forms(p):
    for ctx in (INTERIOR, COLLAR):
        abar, astar = abar_pair(BOX, ctx)
        assert abs(nu(BOX, [p], ctx).value - 0.5 * abar[0, 0] * p * p) <= 1e-9
        assert abs(nu_star(BOX, [p], ctx).value - 0.5 * p * p / astar[0, 0]) <= 1e-9


def test_bilinearity_in_two_dimensions():
    abar, astar = abar_pair(cube(1.0, d=2), CTX2)
    assert np.allclose(abar, abar.T, atol=1e-12)
    rng = np.random.default_rng(7)
    for _ in range(5):
        p = rng.normal(size=2)
        assert abs(nu(cube(1.0, d=2), p, CTX2).value - 0.5 * p @ abar @ p) <= 1e-9
        assert abs(nu_star(cube(1.0, d=2), p, CTX2).value - 0.5 * p @ np.linalg.solve(astar, p)) <= 1e-9


def test_flux_and_slope_identities(ctx):
    abar, astar = abar_pair(BOX, ctx)
    sysm = cube_system(BOX, ctx)
    r = nu(BOX, [1.3], ctx)
    assert abs(r.flux[0] - abar[0, 0] * 1.3) <= 1e-9
    assert abs(flux_average(sysm, r.minimizer)[0] - abar[0, 0] * 1.3) <= 1e-9
    # the minimizer has the affine slope on average
    assert abs(gradient_average(sysm, r.minimizer)[0] - 1.3) <= 1e-12
    rs = nu_star(BOX, [0.8], ctx)
    assert abs(rs.average_gradient[0] - 0.8 / astar[0, 0]) <= 1e-9
    # value equals half the flux pairing for both problems
    assert abs(r.value - 0.5 * bilinear(sysm, r.minimizer, r.minimizer)) <= 1e-9
    assert abs(rs.value - 0.5 * bilinear(sysm, rs.maximizer, rs.maximizer)) <= 1e-9


def test_j_is_nonnegative_on_random_pairs(ctx):
    rng = np.random.default_rng(11)
    abar, astar = abar_pair(BOX, ctx)
    for _ in range(100):
        p, q = rng.uniform(-1, 1, 2)
        direct = nu(BOX, [p], ctx).value + nu_star(BOX, [q], ctx).value - p * q
        assert direct >= -1e-9
        # the same number from the recovered matrices
        assert abs(direct - (0.5 * abar[0, 0] * p * p + 0.5 * q * q / astar[0, 0] - p * q)) <= 1e-9


def test_j_energy_identity_and_linearity(ctx):
    j1 = j_value(BOX, [0.7], [0.4], ctx)
    j2 = j_value(BOX, [-0.2], [1.1], ctx)
    j12 = j_value(BOX, [0.5], [1.5], ctx)
    assert j1.energy_residual <= 1e-8
    for n in range(4):
        diff = j12.optimizer.values[n] - j1.optimizer.values[n] - j2.optimizer.values[n]
        assert np.abs(diff).max() <= 1e-9


def test_j_vanishes_at_the_homogenized_pair():
    ctx = Context(constant_model(2.0), Discretization(h=0.5, n_max=3, allow_low_mass=True), "collar")
    jr = j_value(BOX, [1.0], [2.0], ctx)
    assert abs(jr.value) <= 1e-10


def test_j_slope_and_flux_identities(ctx):
    abar, astar = abar_pair(BOX, ctx)
    sysm = cube_system(BOX, ctx)
    p, q = 0.6, 1.4
    jr = j_value(BOX, [p], [q], ctx)
    # average slope of v_J is astar^{-1} q - p, its flux is q - abar p
    assert abs(jr.slope[0] - (q / astar[0, 0] - p)) <= 1e-9
    assert abs(flux_average(sysm, jr.optimizer)[0] - (q - abar[0, 0] * p)) <= 1e-9


def test_optimizers_are_a_harmonic(ctx):
    sysm = cube_system(BOX, ctx)
    assert _harmonic_residual(sysm, nu(BOX, [1.0], ctx).minimizer) <= 1e-9
    assert _harmonic_residual(sysm, nu_star(BOX, [1.0], ctx).maximizer) <= 1e-9
    assert _harmonic_residual(sysm, j_value(BOX, [1.0], [0.3], ctx).optimizer) <= 1e-9


def test_quadratic_responses(ctx):
    sysm = cube_system(BOX, ctx)
    aff = affine_field(BOX, [1.0], ctx)
    assert quadratic_response_check(BOX, "nu", aff, ctx) <= 1e-8
    # perturb the minimizer by one free unknown of the Dirichlet class, spread through its ties
    r = nu(BOX, [1.0], ctx)
    _, n_free = sysm.free_map()
    e = np.zeros(n_free)
    e[n_free // 2] = 0.3
    vals = tuple(v + sysm.prolongation(n) @ e for n, v in enumerate(r.minimizer.values))
    cand = SectorField(r.minimizer.grids, vals, "dirichlet", (1.0,))
    assert quadratic_response_check(BOX, "nu", cand, ctx) <= 1e-8
    assert quadratic_response_check(BOX, "nu_star", aff, ctx, q=[0.9]) <= 1e-8
    other = j_value(BOX, [0.2], [-0.5], ctx).optimizer
    assert quadratic_response_check(BOX, "J", other, ctx, p=[1.0], q=[0.6]) <= 1e-8
    assert dirichlet_norm_sq(sysm, aff) > 0


def test_inadmissible_candidates_are_rejected():
    aff = affine_field(BOX, [1.0], INTERIOR)
    broken = [v.copy() for v in aff.values]
    g1 = aff.grids[1]
    broken[1][0, int(np.flatnonzero(g1.site_on_boundary)[0])] += 1.0
    cand = SectorField(aff.grids, tuple(broken), "dirichlet", (1.0,))
    with pytest.raises(InadmissibleFieldError):
        quadratic_response_check(BOX, "nu", cand, INTERIOR)
    with pytest.raises(InadmissibleFieldError):
        quadratic_response_check(BOX, "J", aff, INTERIOR, p=[1.0], q=[1.0])


def test_optimizer_gap_bounded_by_twice_j(ctx):
    gap, J = optimizer_gap(BOX, [1.0], ctx)
    assert gap <= 2 * J + 1e-8


def test_combine_broadcasts_single_state_rows():
    r = nu(BOX, [1.0], COLLAR)
    u = nu_star(BOX, [1.0], COLLAR)
    comb = _combine([u.maximizer, r.minimizer], [1.0, -1.0])
    for n in range(1, 4):
        assert comb.values[n].shape == u.maximizer.values[n].shape
        assert np.allclose(comb.values[n], u.maximizer.values[n] - r.minimizer.values[n][0])


def test_invariant_error_path():
    # a negative tolerance makes every consistency check fail, which exercises the error path
    with pytest.raises(InvariantError):
        abar_pair(cube(1.0, d=2), CTX2, tol=-1.0)
