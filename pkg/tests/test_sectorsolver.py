import math

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from hmglab.coefficients import constant_model, crowding_model, radial_count_model
from hmglab.configspace import GridBudgetError, cube, sector_weights, triadic_cube
from hmglab.funcineq import random_corpus
from hmglab.quantities import _harmonic_residual, gradient_average, nu, nu_star
from hmglab.sectorsolver import (
    BlockDiagonal,
    Context,
    Discretization,
    SolverError,
    assemble_dirichlet,
    assemble_neumann,
    cube_system,
    pcg,
    solve,
)
from oracles import DenseCube, OracleModel


def ctx_for(model, h=0.5, n_max=2, mode="interior", **kw):
    return Context(model, Discretization(h=h, n_max=n_max, allow_low_mass=True, **kw), mode)


# -- the dense oracle --------------------------------------------------------------


def _compare(oc: DenseCube, ctx: Context, box, p=1.0):
    r = nu(box, [p], ctx)
    ov, of = oc.nu(p)
    assert abs(r.value - ov) <= 1e-8
    for n in range(oc.n_max + 1):
        coords = r.minimizer.grids[n].node_coordinates()
        assert np.abs(oc.at_nodes(of[n], n, coords) - r.minimizer.values[n][0]).max() <= 1e-8
    rs = nu_star(box, [p], ctx)
    if ctx.mode == "interior":
        sv, sf = oc.nu_star(p)
    else:
        sv, sf, missing = oc.nu_star_collar(p)
        assert missing < 1e-10
    assert abs(rs.value - sv) <= 1e-8
    fld = rs.maximizer
    for n in range(1, oc.n_max + 1):
        coords = fld.grids[n].node_coordinates()
        averaged = fld.state_probs[n] @ fld.values[n]
        assert np.abs(oc.at_nodes(sf[n], n, coords) - averaged).max() <= 1e-8


@pytest.mark.parametrize("mode", ["interior", "collar"])
@pytest.mark.parametrize("p", [1.0, -0.7])
def test_crowding_matches_dense_oracle_on_unit_cube(mode, p):
    oc = DenseCube(1.0, 0.5, 2, 1.0, OracleModel("crowding", Lambda=2.0))
    _compare(oc, ctx_for(crowding_model(2.0), mode=mode), cube(1.0), p)


@pytest.mark.parametrize("mode", ["interior", "collar"])
def test_crowding_matches_dense_oracle_on_level_one(mode):
    oc = DenseCube(3.0, 0.5, 3, 1.0, OracleModel("crowding", Lambda=3.0))
    _compare(oc, ctx_for(crowding_model(3.0), n_max=3, mode=mode), triadic_cube(1))


def test_constant_matches_dense_oracle():
    oc = DenseCube(1.0, 0.25, 2, 1.0, OracleModel("constant", c=2.0))
    _compare(oc, ctx_for(constant_model(2.0), h=0.25), cube(1.0))


def test_oracle_collar_reduces_to_interior_for_constant_model():
    oc = DenseCube(1.0, 0.5, 2, 1.0, OracleModel("constant", c=1.5))
    a = oc.nu_star(1.0)[0]
    b = oc.nu_star_collar(1.0)[0]
    assert abs(a - b) < 1e-12


def test_sector_weights_match_oracle_pmf():
    for side, n_max in [(1.0, 2), (3.0, 3), (9.0, 4)]:
        w = sector_weights(1.0, side, n_max, allow_low_mass=True)
        pmf = [math.exp(-side) * side**n / math.factorial(n) for n in range(n_max + 1)]
        assert np.abs(w.as_array() - np.array(pmf) / sum(pmf)).max() <= 1e-12


# -- exact solutions -----------------------------------------------------------------


@pytest.mark.parametrize("c", [1.0, 2.0, 3.5])
@pytest.mark.parametrize("mode", ["interior", "collar"])
def test_constant_model_is_exact(c, mode):
    ctx = ctx_for(constant_model(c), h=0.25, n_max=3, mode=mode)
    for m in (0, 1):
        box = triadic_cube(m)
        for p in (1.0, -2.0):
            assert abs(nu(box, [p], ctx).value - 0.5 * c * p * p) < 1e-10
            assert abs(nu_star(box, [p], ctx).value - 0.5 * p * p / c) < 1e-10


# -- structural properties ------------------------------------------------------------


@given(seed=st.integers(0, 2**16))
@settings(max_examples=10, deadline=None)
def test_discrete_integral_of_h10_gradient_vanishes(seed):
    box = triadic_cube(1)
    ctx = ctx_for(crowding_model(2.0), h=0.5, n_max=3)
    sysm = cube_system(box, ctx)
    for f in random_corpus(box, 0.5, 3, "h10", 3, seed):
        g = gradient_average(sysm, f)
        scale = max(1.0, max(float(np.abs(v).max()) for v in f.values))
        assert np.abs(g).max() <= 1e-13 * scale


def test_nu_minimizer_first_order_optimality():
    box = triadic_cube(1)
    for model in (crowding_model(2.0), radial_count_model([1, 3], [1.0, 2.5, 1.5])):
        ctx = ctx_for(model, h=0.25, n_max=3)
        r = nu(box, [1.0], ctx)
        sysm = cube_system(box, ctx)
        assert _harmonic_residual(sysm, r.minimizer) <= 1e-9


@pytest.mark.parametrize("p", [1.0, 0.3, -1.7])
def test_energy_ordering(p):
    box = triadic_cube(1)
    lam = 2.5
    mid = nu(box, [p], ctx_for(crowding_model(lam), n_max=3)).value
    low = nu(box, [p], ctx_for(constant_model(1.0), n_max=3)).value
    high = nu(box, [p], ctx_for(constant_model(lam), n_max=3)).value
    assert low - 1e-12 <= mid <= high + 1e-12
    assert abs(low - 0.5 * p * p) < 1e-10
    assert abs(high - 0.5 * lam * p * p) < 1e-10


@pytest.mark.parametrize("side,n_max", [(1.0, 2), (3.0, 3)])
def test_interior_nu_star_below_collar(side, n_max):
    box = cube(side)
    model = crowding_model(2.0)
    a = nu_star(box, [1.0], ctx_for(model, n_max=n_max, mode="interior")).value
    b = nu_star(box, [1.0], ctx_for(model, n_max=n_max, mode="collar")).value
    assert a <= b + 1e-12


def test_neumann_maximizer_is_gauged():
    box = triadic_cube(1)
    ctx = ctx_for(crowding_model(2.0), n_max=3, mode="collar")
    r = nu_star(box, [1.0], ctx)
    sysm = cube_system(box, ctx)
    for n in range(1, 4):
        w = sysm.asm[n].mean_weights
        assert np.abs(r.maximizer.values[n] @ w).max() <= 1e-12


def test_problem_structure():
    box = triadic_cube(1)
    ctx = ctx_for(crowding_model(2.0), n_max=3, mode="collar")
    for prob in (assemble_dirichlet(box, [1.0], ctx), assemble_neumann(box, [1.0], ctx)):
        A = prob.A.toarray()
        assert np.abs(A - A.T).max() <= 1e-13
        assert np.linalg.eigvalsh(A).min() >= -1e-10
        # the right-hand side is orthogonal to the block-constant kernel
        live = prob.kernel_blocks >= 0
        for blk in np.unique(prob.kernel_blocks[live]):
            assert abs(prob.b[prob.kernel_blocks == blk].sum()) <= 1e-12


def test_solve_reports_residual_below_tolerance():
    box = triadic_cube(1)
    ctx = ctx_for(crowding_model(2.0), n_max=3)
    fld, energy, stats = solve(assemble_dirichlet(box, [1.0], ctx))
    assert stats.converged and stats.residual <= ctx.disc.tol
    with pytest.raises(SolverError) as err:
        solve(assemble_dirichlet(box, [1.0], ctx_for(crowding_model(2.0), n_max=3, max_iter=2)))
    assert not err.value.stats.converged


def test_grid_budget_surfaces_through_the_solver():
    ctx = ctx_for(crowding_model(2.0), h=0.25, n_max=4, memory_budget=500)
    with pytest.raises(GridBudgetError):
        nu(triadic_cube(1), [1.0], ctx)


# -- the iterative solver on its own ------------------------------------------------------------


@given(seed=st.integers(0, 2**16), n=st.integers(3, 40))
@settings(max_examples=40, deadline=None)
def test_pcg_against_dense_solve(seed, n):
    rng = np.random.default_rng(seed)
    B = rng.normal(size=(n, n))
    A = B @ B.T + 0.1 * np.eye(n)
    b = rng.normal(size=n)
    x, st_ = pcg(sp.csr_matrix(A), b, tol=1e-12)
    assert np.allclose(x, np.linalg.solve(A, b), rtol=0, atol=1e-8 * max(1.0, np.abs(np.linalg.solve(A, b)).max()))


@given(seed=st.integers(0, 2**16), sizes=st.lists(st.integers(2, 8), min_size=1, max_size=4))
@settings(max_examples=40, deadline=None)
def test_pcg_on_block_laplacians_with_constant_kernels(seed, sizes):
    rng = np.random.default_rng(seed)
    blocks, labels = [], []
    for k, m in enumerate(sizes):
        # weighted path Laplacian: kernel = constants
        w = rng.uniform(0.5, 2.0, m - 1)
        L = np.zeros((m, m))
        for i, wi in enumerate(w):
            L[i, i] += wi
            L[i + 1, i + 1] += wi
            L[i, i + 1] -= wi
            L[i + 1, i] -= wi
        blocks.append(sp.csr_matrix(L))
        labels += [k] * m
    labels = np.array(labels)
    A = BlockDiagonal(blocks)
    b = rng.normal(size=len(labels))
    x, _ = pcg(A, b, tol=1e-12, kernel_blocks=labels)
    # compare with the pseudo-inverse solution (minimum norm = zero block means)
    dense = A.toarray()
    bp = b.copy()
    for k in range(len(sizes)):
        bp[labels == k] -= bp[labels == k].mean()
    ref = np.linalg.pinv(dense) @ bp
    assert np.allclose(x, ref, atol=1e-8)
    assert np.allclose(A @ x, dense @ x)
    assert np.array_equal(A.diagonal(), dense.diagonal())


def test_pcg_zero_rhs_and_failure():
    A = sp.identity(4, format="csr")
    x, st_ = pcg(A, np.zeros(4))
    assert st_.iterations == 0 and not x.any()
    rng = np.random.default_rng(0)
    B = rng.normal(size=(30, 30))
    M = sp.csr_matrix(B @ B.T + 1e-6 * np.eye(30))
    with pytest.raises(SolverError):
        pcg(M, rng.normal(size=30), tol=1e-14, max_iter=3)
