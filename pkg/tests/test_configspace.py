import itertools
import json
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hmglab.coefficients import crowding_model
from hmglab.configspace import (
    Configuration,
    GridBudgetError,
    LowMassWarning,
    SectorField,
    TruncationError,
    build_sector_grid,
    configuration_to_json,
    cube,
    grid_to_json,
    multiset_rank,
    rng_stream,
    sample_configuration,
    sector_weights,
    triadic_cube,
)
from hmglab.sectorsolver import Context, Discretization, affine_field, cube_system


def test_triadic_cube_geometry():
    box = triadic_cube(2, d=2)
    assert box.side == 9.0
    assert box.volume == 81.0
    assert box.level == 2
    assert cube(3.0).level == 1
    assert cube(2.0).level is None
    assert multiset_rank(np.zeros((1, 0), dtype=np.int64), 5).tolist() == [0]
    with pytest.raises(ValueError):
        triadic_cube(-1)
    with pytest.raises(ValueError):
        cube(0.0)


@given(m=st.integers(1, 4), d=st.integers(1, 2), cx=st.floats(-5, 5), seed=st.integers(0, 2**16))
@settings(max_examples=40, deadline=None)
def test_children_tile_parent(m, d, cx, seed):
    parent = triadic_cube(m, center=[cx] * d, d=d)
    kids = parent.children()
    assert len(kids) == 3**d
    assert all(k.level == m - 1 for k in kids)
    assert math.isclose(sum(k.volume for k in kids), parent.volume)
    # random interior points (away from the internal faces) fall into exactly one child
    rng = np.random.default_rng(seed)
    pts = parent.lower + parent.side * rng.random((200, d))
    hits = np.stack([k.contains(pts) for k in kids]).sum(axis=0)
    faces = np.concatenate([k.lower for k in kids] + [k.upper for k in kids])
    clear = np.all(np.abs(pts[:, :, None] - faces[None, None, :]).min(axis=2) > 1e-9, axis=1)
    assert np.all(hits[clear] == 1)


def test_child_grid_embeds_in_parent():
    parent = triadic_cube(1)
    h = 0.25
    pg = build_sector_grid(parent, 1, h)
    parent_sites = set(np.round(pg.sites[:, 0], 12))
    for child in parent.children():
        cg = build_sector_grid(child, 1, h)
        assert set(np.round(cg.sites[:, 0], 12)) <= parent_sites


@given(n=st.integers(1, 4), G=st.integers(2, 8))
@settings(max_examples=40, deadline=None)
def test_multiset_rank_is_a_bijection(n, G):
    reps = np.array(list(itertools.combinations_with_replacement(range(G), n)), dtype=np.int64).reshape(-1, n)
    ranks = multiset_rank(reps, G)
    assert sorted(ranks.tolist()) == list(range(math.comb(G + n - 1, n)))


@given(n=st.integers(1, 3), h=st.sampled_from([1.0, 0.5, 0.25]))
@settings(max_examples=20, deadline=None)
def test_reduced_count_and_orbit_map(n, h):
    grid = build_sector_grid(cube(1.0), n, h)
    G = grid.nodes_per_axis
    assert grid.size == math.comb(G + n - 1, n)
    full = np.array(list(itertools.product(range(G), repeat=n)), dtype=np.int64)
    red = grid.orbit_map(full)
    # surjective onto the reduced indices
    assert set(red.tolist()) == set(range(grid.size))
    # representatives map to themselves
    assert np.array_equal(grid.orbit_map(grid.reps), np.arange(grid.size))


@given(seed=st.integers(0, 2**16), n=st.integers(1, 3))
@settings(max_examples=30, deadline=None)
def test_field_is_symmetric_under_permutation(seed, n):
    grids = tuple(build_sector_grid(cube(1.0), k, 0.25) for k in range(n + 1))
    grid = grids[n]
    rng = np.random.default_rng(seed)
    vals = [np.zeros(g.size) for g in grids[:n]] + [rng.normal(size=grid.size)]
    f = SectorField(grids, tuple(vals))
    idx = tuple(rng.integers(0, grid.n_sites, size=n))
    ref = f.value_at(n, idx)
    for perm in itertools.permutations(idx):
        assert f.value_at(n, perm) == ref


@given(rho=st.floats(0.1, 4.0), volume=st.floats(0.2, 5.0), n_max=st.integers(0, 12))
@settings(max_examples=60, deadline=None)
def test_weight_sanity(rho, volume, n_max):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", LowMassWarning)
        w = sector_weights(rho, volume, n_max, allow_low_mass=True)
    pi = w.as_array()
    assert abs(pi.sum() - 1.0) < 1e-14
    lam = rho * volume
    for n in range(n_max):
        assert math.isclose(pi[n + 1] / pi[n], lam / (n + 1), rel_tol=1e-12)
    assert 0.0 < w.truncated_mass <= 1.0
    assert math.isclose(w.truncated_mean, float(np.dot(np.arange(n_max + 1), pi)), rel_tol=1e-14)


def test_weights_match_hand_pmf():
    w = sector_weights(1.0, 3.0, 6, allow_low_mass=True)
    raw = [math.exp(-3.0) * 3.0**n / math.factorial(n) for n in range(7)]
    total = sum(raw)
    assert np.allclose(w.as_array(), [r / total for r in raw], atol=1e-15, rtol=0)
    assert math.isclose(w.truncated_mass, total, rel_tol=1e-12)


def test_low_mass_floor_and_hard_floor():
    with pytest.warns(LowMassWarning):
        w = sector_weights(1.0, 1.0, 2, allow_low_mass=False)
    assert w.low_mass
    with pytest.raises(TruncationError):
        sector_weights(1.0, 3.0, 3)
    with pytest.warns(LowMassWarning):
        assert sector_weights(1.0, 3.0, 3, allow_low_mass=True).low_mass


def test_grid_budget():
    with pytest.raises(GridBudgetError):
        build_sector_grid(triadic_cube(2), 4, 0.25, memory_budget=1000)


def test_spacing_must_divide_side():
    with pytest.raises(ValueError):
        build_sector_grid(cube(1.0), 1, 0.3)


@given(seed=st.integers(0, 2**16))
@settings(max_examples=30, deadline=None)
def test_configuration_canonical_order(seed):
    rng = np.random.default_rng(seed)
    box = triadic_cube(1, d=2)
    pts = box.lower + box.side * rng.random((6, 2))
    a = Configuration.from_array(pts, box)
    b = Configuration.from_array(pts[rng.permutation(6)], box)
    assert a == b
    assert hash(a) == hash(b)
    assert list(a.points) == sorted(a.points)
    assert configuration_to_json(a) == configuration_to_json(b)


def test_configuration_rejects_outside_points():
    with pytest.raises(ValueError):
        Configuration.from_array(np.array([[5.0]]), cube(1.0))


def test_sampling_is_seeded_and_inside():
    box = triadic_cube(1)
    a = sample_configuration(box, 2.0, rng_stream(3, "x"))
    b = sample_configuration(box, 2.0, rng_stream(3, "x"))
    c = sample_configuration(box, 2.0, rng_stream(3, "y"))
    assert a == b
    assert a != c or len(a) == 0
    assert box.contains(a.as_array(), closed=True).all()


def test_poisson_sample_mean():
    box = triadic_cube(1)
    rng = rng_stream(0, "mean")
    counts = [len(sample_configuration(box, 1.0, rng)) for _ in range(4000)]
    # mean 3, standard error sqrt(3/4000)
    assert abs(np.mean(counts) - 3.0) < 4 * math.sqrt(3.0 / 4000)


def test_grid_json_dump():
    g = build_sector_grid(cube(1.0), 2, 0.5)
    data = json.loads(grid_to_json(g))
    assert data["dimension"] == 1
    assert data["sector"] == 2
    assert data["spacing"] == 0.5
    assert np.array(data["node_coordinates"]).shape == (g.size, 2, 1)


@given(p=st.floats(-3, 3), h=st.sampled_from([0.5, 0.25]))
@settings(max_examples=15, deadline=None)
def test_affine_field_trace_constraint(p, h):
    """Sector n+1 with one coordinate on the boundary equals sector n plus p times that coordinate."""
    box = cube(1.0)
    ctx = Context(crowding_model(2.0), Discretization(h=h, n_max=3, allow_low_mass=True))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", LowMassWarning)
        f = affine_field(box, [p], ctx)
    for n in range(3):
        hi = f.grids[n + 1]
        for r, row in enumerate(hi.reps):
            for j, site in enumerate(row):
                if hi.site_on_boundary[site]:
                    rest = np.delete(row, j)
                    low = f.value_at(n, rest) if n else float(f.values[0][0, 0])
                    xb = float(hi.sites[site, 0])
                    # exact up to the rounding of the coordinate sum
                    assert abs(f.values[n + 1][0, r] - low - p * xb) <= 1e-14 * (1 + abs(p) * (n + 1))


def test_solver_system_weights_are_the_truncated_law():
    ctx = Context(crowding_model(2.0), Discretization(h=0.5, n_max=2, allow_low_mass=True))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", LowMassWarning)
        sysm = cube_system(cube(1.0), ctx)
    pmf = [math.exp(-1.0) / math.factorial(n) for n in range(3)]
    assert np.allclose(sysm.weights.as_array(), np.array(pmf) / sum(pmf), atol=1e-15, rtol=0)
