"""Cubes, particle configurations, truncated Poisson sectors and symmetric grids.

A function on configuration space is stored through its canonical projection:
one permutation-symmetric function ``f_n(x_1, ..., x_n)`` per particle number
``n``.  On a uniform tensor grid a symmetric nodal function is determined by its
values on sorted multi-indices, so every sector grid keeps one representative
per permutation orbit.
"""

from __future__ import annotations

import itertools
import json
import logging
import math
import warnings
import zlib
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterator, Optional, Sequence

import numpy as np
from scipy import stats

logger = logging.getLogger(__name__)

__all__ = [
    "TriadicCube",
    "Configuration",
    "SectorWeights",
    "SectorGrid",
    "SectorField",
    "GridBudgetError",
    "TruncationError",
    "LowMassWarning",
    "triadic_cube",
    "cube",
    "sector_weights",
    "build_sector_grid",
    "multiset_rank",
    "rng_stream",
    "sample_configuration",
    "grid_to_json",
    "configuration_to_json",
]

#: Default cap on the number of symmetry-reduced nodes of a single sector grid.
DEFAULT_MEMORY_BUDGET = 2_000_000

_SNAP = 1e-9


class GridBudgetError(MemoryError):
    """Raised when a sector grid would exceed the configured node budget."""


class TruncationError(ValueError):
    """Raised when the truncated Poisson mass falls below the hard floor."""


class LowMassWarning(UserWarning):
    """Issued when the truncated Poisson mass is below the configured floor."""


# ---------------------------------------------------------------------------
# cubes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TriadicCube:
    """Open cube ``center + (-side/2, side/2)^d``.

    ``level`` is set for triadic cubes (``side == 3**level``) and ``None`` for a
    general ``Q_s``.
    """

    d: int
    side: float
    center: tuple[float, ...]
    level: Optional[int] = None

    def __post_init__(self):
        if self.d < 1:
            raise ValueError(f"dimension must be positive, got {self.d}")
        if not self.side > 0:
            raise ValueError(f"side must be positive, got {self.side}")
        if len(self.center) != self.d:
            raise ValueError("center has the wrong dimension")

    @property
    def volume(self) -> float:
        return float(self.side) ** self.d

    @property
    def lower(self) -> np.ndarray:
        return np.asarray(self.center, dtype=float) - self.side / 2

    @property
    def upper(self) -> np.ndarray:
        return np.asarray(self.center, dtype=float) + self.side / 2

    def contains(self, points: np.ndarray, closed: bool = False) -> np.ndarray:
        """Boolean mask of the rows of ``points`` (shape ``(k, d)``) inside the cube."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if closed:
            inside = (pts >= self.lower - _SNAP) & (pts <= self.upper + _SNAP)
        else:
            inside = (pts > self.lower) & (pts < self.upper)
        return inside.all(axis=1)

    def children(self) -> list["TriadicCube"]:
        """The ``3**d`` sub-cubes of side ``side/3`` tiling this cube."""
        if self.level is not None and self.level < 1:
            raise ValueError("a level-0 cube has no triadic children")
        child_side = self.side / 3
        offsets = (-child_side, 0.0, child_side)
        level = None if self.level is None else self.level - 1
        out = []
        for shift in itertools.product(offsets, repeat=self.d):
            c = tuple(float(ci + si) for ci, si in zip(self.center, shift))
            out.append(TriadicCube(self.d, child_side, c, level))
        return out

    def subcubes(self, side: float) -> list["TriadicCube"]:
        """Partition into cubes of the given side (must divide ``self.side``)."""
        ratio = self.side / side
        k = int(round(ratio))
        if abs(ratio - k) > 1e-9 or k < 1:
            raise ValueError(f"side {side} does not divide {self.side}")
        lo = self.lower
        out = []
        for idx in itertools.product(range(k), repeat=self.d):
            c = tuple(float(lo[a] + (idx[a] + 0.5) * side) for a in range(self.d))
            out.append(TriadicCube(self.d, side, c, None))
        return out

    def expanded(self, width: float) -> "TriadicCube":
        """The cube grown by ``width`` on every side."""
        return TriadicCube(self.d, self.side + 2 * width, self.center, None)

    def to_dict(self) -> dict:
        return {"d": self.d, "side": self.side, "center": list(self.center), "level": self.level}


def triadic_cube(m: int, center: Optional[Sequence[float]] = None, d: int = 1) -> TriadicCube:
    """Return the triadic cube of side ``3**m`` centered at ``center`` (origin by default)."""
    if int(m) != m or m < 0:
        raise ValueError(f"triadic level must be a non-negative integer, got {m}")
    m = int(m)
    c = tuple(float(x) for x in center) if center is not None else (0.0,) * d
    return TriadicCube(len(c), float(3**m), c, m)


def cube(side: float, d: int = 1, center: Optional[Sequence[float]] = None) -> TriadicCube:
    """Return the general cube ``Q_s`` (side ``s``) centered at ``center``."""
    c = tuple(float(x) for x in center) if center is not None else (0.0,) * d
    level = None
    lg = math.log(side, 3) if side > 0 else -1
    if side > 0 and abs(lg - round(lg)) < 1e-12 and round(lg) >= 0:
        level = int(round(lg))
    return TriadicCube(len(c), float(side), c, level)


# ---------------------------------------------------------------------------
# configurations
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Configuration:
    """A finite point cloud, stored in canonical (lexicographic) order."""

    points: tuple[tuple[float, ...], ...]
    region: TriadicCube

    def __post_init__(self):
        pts = sorted(tuple(float(c) for c in p) for p in self.points)
        object.__setattr__(self, "points", tuple(pts))
        if pts and not self.region.contains(np.array(pts), closed=True).all():
            raise ValueError("configuration has points outside its region")

    @classmethod
    def from_array(cls, points: np.ndarray, region: TriadicCube) -> "Configuration":
        arr = np.asarray(points, dtype=float).reshape(-1, region.d)
        return cls(tuple(map(tuple, arr)), region)

    def __len__(self) -> int:
        return len(self.points)

    def as_array(self) -> np.ndarray:
        return np.array(self.points, dtype=float).reshape(-1, self.region.d)

    def count_in(self, box: TriadicCube) -> int:
        if not self.points:
            return 0
        return int(box.contains(self.as_array()).sum())

    def restrict(self, box: TriadicCube) -> "Configuration":
        arr = self.as_array()
        keep = arr[box.contains(arr)] if len(arr) else arr
        return Configuration.from_array(keep, box)


def configuration_to_json(conf: Configuration) -> str:
    return json.dumps({"region": conf.region.to_dict(), "points": [list(p) for p in conf.points]})


# ---------------------------------------------------------------------------
# truncated Poisson sector weights
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SectorWeights:
    """Poisson particle-number law conditioned on ``n <= n_max``."""

    rho: float
    volume: float
    n_max: int
    weights: tuple[float, ...]
    truncated_mass: float
    truncated_mean: float
    low_mass: bool = False

    def as_array(self) -> np.ndarray:
        return np.asarray(self.weights, dtype=float)


def sector_weights(
    rho: float,
    volume: float,
    n_max: int,
    floor: float = 0.99,
    hard_floor: float = 0.9,
    allow_low_mass: bool = False,
) -> SectorWeights:
    """Truncated and renormalized Poisson weights for ``n = 0..n_max``.

    Below ``floor`` a :class:`LowMassWarning` is issued.  Below ``hard_floor``
    the call fails with :class:`TruncationError` unless ``allow_low_mass`` is
    set, in which case the warning is raised and ``low_mass`` is flagged on the
    result so that downstream records carry it.
    """
    if not rho > 0:
        raise ValueError(f"density must be positive, got {rho}")
    if not volume > 0:
        raise ValueError(f"volume must be positive, got {volume}")
    if int(n_max) != n_max or n_max < 0:
        raise ValueError(f"n_max must be a non-negative integer, got {n_max}")
    n_max = int(n_max)
    lam = rho * volume
    n = np.arange(n_max + 1)
    # log pmf without the common e^{-lam} factor; renormalization removes it
    logw = n * math.log(lam) - np.array([math.lgamma(k + 1) for k in n])
    w = np.exp(logw - logw.max())
    w /= w.sum()
    mass = float(stats.poisson.cdf(n_max, lam))
    mean = float(np.dot(n, w))
    low = mass < floor
    if low:
        msg = (
            f"truncated Poisson mass {mass:.3e} below floor {floor} "
            f"(rho*V = {lam:g}, n_max = {n_max})"
        )
        if mass < hard_floor and not allow_low_mass:
            raise TruncationError(msg + f"; below hard floor {hard_floor}")
        warnings.warn(msg, LowMassWarning, stacklevel=2)
        logger.warning(msg)
    return SectorWeights(float(rho), float(volume), n_max, tuple(float(x) for x in w), mass, mean, low)


# ---------------------------------------------------------------------------
# symmetric sector grids
# ---------------------------------------------------------------------------


@lru_cache(maxsize=256)
def _binom_table(top: int, k: int) -> np.ndarray:
    tab = np.zeros((top + 1, k + 2), dtype=np.int64)
    for a in range(top + 1):
        for b in range(k + 2):
            tab[a, b] = math.comb(a, b)
    tab.setflags(write=False)
    return tab


def multiset_rank(sorted_idx: np.ndarray, n_symbols: int) -> np.ndarray:
    """Rank sorted multi-indices (last axis, non-decreasing) in colex order.

    The map ``(s_0 <= ... <= s_{n-1}) -> sum_k C(s_k + k, k + 1)`` is a
    bijection onto ``range(C(n_symbols + n - 1, n))``.
    """
    idx = np.asarray(sorted_idx, dtype=np.int64)
    n = idx.shape[-1]
    if n == 0:
        return np.zeros(idx.shape[:-1], dtype=np.int64)
    tab = _binom_table(n_symbols + n, n)
    out = np.zeros(idx.shape[:-1], dtype=np.int64)
    for k in range(n):
        out += tab[idx[..., k] + k, k + 1]
    return out


def _sorted_reps(n_symbols: int, n: int) -> np.ndarray:
    """All sorted ``n``-tuples over ``range(n_symbols)``, ordered by multiset rank."""
    if n == 0:
        return np.zeros((1, 0), dtype=np.int64)
    lex = np.fromiter(
        itertools.chain.from_iterable(itertools.combinations_with_replacement(range(n_symbols), n)),
        dtype=np.int64,
    ).reshape(-1, n)
    ranks = multiset_rank(lex, n_symbols)
    out = np.empty_like(lex)
    out[ranks] = lex
    return out


@dataclass(frozen=True, eq=False)
class SectorGrid:
    """Permutation-reduced tensor grid for the ``n``-particle sector.

    Each particle coordinate ranges over the same set of ``sites`` (a uniform
    lattice of spacing ``h`` over the cube, grown by ``collar_width``).  Nodes
    are sorted tuples of site ids.
    """

    cube: TriadicCube
    n: int
    h: float
    collar_width: float
    axis: np.ndarray
    sites: np.ndarray
    site_on_boundary: np.ndarray
    site_inside: np.ndarray
    reps: np.ndarray
    boundary_flags: np.ndarray

    @property
    def d(self) -> int:
        return self.cube.d

    @property
    def nodes_per_axis(self) -> int:
        return len(self.axis)

    @property
    def n_sites(self) -> int:
        return len(self.sites)

    @property
    def full_node_count(self) -> int:
        return self.n_sites**self.n

    @property
    def size(self) -> int:
        return len(self.reps)

    def orbit_map(self, full_index: np.ndarray) -> np.ndarray:
        """Map full tensor site tuples (last axis of length ``n``) to reduced indices."""
        idx = np.sort(np.asarray(full_index, dtype=np.int64), axis=-1)
        return multiset_rank(idx, self.n_sites)

    def node_coordinates(self) -> np.ndarray:
        """Coordinates of the representative nodes, shape ``(size, n, d)``."""
        return self.sites[self.reps]


def build_sector_grid(
    box: TriadicCube,
    n: int,
    h: float,
    collar_width: float = 0,
    memory_budget: int = DEFAULT_MEMORY_BUDGET,
) -> SectorGrid:
    """Build the symmetry-reduced grid of the ``n``-particle sector on ``box``."""
    if collar_width not in (0, 1):
        raise ValueError(f"collar width must be 0 or 1, got {collar_width}")
    if n < 0:
        raise ValueError("sector index must be non-negative")
    cells = box.side / h
    if h <= 0 or abs(cells - round(cells)) > 1e-9:
        raise ValueError(f"spacing {h} does not divide the side {box.side}")
    if collar_width and abs(collar_width / h - round(collar_width / h)) > 1e-9:
        raise ValueError(f"spacing {h} does not divide the collar width")
    n_axis = int(round((box.side + 2 * collar_width) / h)) + 1
    n_sites = n_axis**box.d
    reduced = math.comb(n_sites + n - 1, n)
    if reduced > memory_budget:
        raise GridBudgetError(
            f"sector {n} grid needs {reduced} reduced nodes, budget is {memory_budget}"
        )
    base = -box.side / 2 - collar_width
    axis = base + h * np.arange(n_axis)
    mesh = np.stack(np.meshgrid(*([axis] * box.d), indexing="ij"), axis=-1).reshape(-1, box.d)
    sites = mesh + np.asarray(box.center)
    lo, hi = box.lower, box.upper
    closed = ((sites >= lo - _SNAP) & (sites <= hi + _SNAP)).all(axis=1)
    on_face = (np.abs(sites - lo) < _SNAP) | (np.abs(sites - hi) < _SNAP)
    on_boundary = closed & on_face.any(axis=1)
    inside = closed & ~on_boundary
    reps = _sorted_reps(n_sites, n)
    flags = on_boundary[reps] if n else np.zeros((1, 0), dtype=bool)
    for arr in (axis, sites, on_boundary, inside, reps, flags):
        arr.setflags(write=False)
    return SectorGrid(box, n, float(h), collar_width, axis, sites, on_boundary, inside, reps, flags)


def grid_to_json(grid: SectorGrid) -> str:
    """JSON dump with dimension, side, spacing, sector and node coordinates."""
    return json.dumps(
        {
            "dimension": grid.d,
            "side": grid.cube.side,
            "center": list(grid.cube.center),
            "spacing": grid.h,
            "sector": grid.n,
            "collar_width": grid.collar_width,
            "node_coordinates": grid.node_coordinates().tolist(),
        }
    )


# ---------------------------------------------------------------------------
# fields
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SectorField:
    """Nodal values of a function on configuration space, one array per sector.

    ``values[n]`` has shape ``(n_states, grid.size)``.  A field that depends on
    the interior configuration only has a single state.  Collar fields carry
    one row per exterior state, where an exterior state is an equivalence class
    of configurations in the unit collar around the cube; ``state_probs[n]``
    holds their probabilities.
    """

    grids: tuple[SectorGrid, ...]
    values: tuple[np.ndarray, ...]
    kind: str = "free"
    slope: Optional[tuple[float, ...]] = None
    state_probs: tuple[np.ndarray, ...] = field(default=())
    normalization: str = "truncated_mean"

    def __post_init__(self):
        if self.kind not in ("dirichlet", "neumann", "free"):
            raise ValueError(f"unknown field class {self.kind!r}")
        vals = []
        for g, v in zip(self.grids, self.values):
            arr = np.array(v, dtype=float)
            if arr.ndim == 1:
                arr = arr[None, :]
            if arr.shape[1] != g.size:
                raise ValueError(f"sector {g.n}: expected {g.size} values, got {arr.shape[1]}")
            arr.setflags(write=False)
            vals.append(arr)
        object.__setattr__(self, "values", tuple(vals))
        if not self.state_probs:
            probs = tuple(np.full(v.shape[0], 1.0 / v.shape[0]) for v in vals)
            object.__setattr__(self, "state_probs", probs)

    @property
    def n_max(self) -> int:
        return len(self.grids) - 1

    @property
    def collar(self) -> bool:
        return any(v.shape[0] > 1 for v in self.values)

    def value_at(self, n: int, full_index: Sequence[int], state: int = 0) -> float:
        """Value at a full (unsorted) tensor site tuple; symmetric by construction."""
        g = self.grids[n]
        return float(self.values[n][state, g.orbit_map(np.asarray(full_index))])

    def iter_sectors(self) -> Iterator[tuple[int, SectorGrid, np.ndarray, np.ndarray]]:
        for n, (g, v, p) in enumerate(zip(self.grids, self.values, self.state_probs)):
            yield n, g, v, p


# ---------------------------------------------------------------------------
# random streams and sampling
# ---------------------------------------------------------------------------


def rng_stream(seed: int, *names: str) -> np.random.Generator:
    """Deterministic generator for the named sub-stream of ``seed``.

    Names are hashed with CRC32, so the same ``(seed, names)`` pair gives the
    same stream on every platform and in every process.
    """
    key = tuple(zlib.crc32(str(nm).encode()) for nm in names)
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=key))


def sample_configuration(region: TriadicCube, rho: float, rng: np.random.Generator) -> Configuration:
    """Draw a Poisson point process of density ``rho`` restricted to ``region``."""
    k = int(rng.poisson(rho * region.volume))
    pts = region.lower + region.side * rng.random((k, region.d))
    return Configuration.from_array(pts, region)
