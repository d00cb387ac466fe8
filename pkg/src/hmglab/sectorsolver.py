"""Assembly and solution of the discrete variational problems on sector grids.

Discretization
--------------
Each sector function ``f_n`` is continuous and multilinear on every element of
the tensor grid of ``U^n``.  Elements are products of ``n`` particle cells; by
permutation symmetry only sorted cell tuples are visited, weighted by the
number of distinct permutations.  The coefficient seen by particle ``i`` on an
element is evaluated with that particle at the center of its cell; every other
particle is averaged uniformly over its cell, and particles outside the cube
are averaged over their Poisson law.  Treating the other interior particles
the same way as the exterior ones keeps the discrete coefficient of a cube
consistent with that of its sub-cubes, which is what makes the discrete
quantities subadditive under nested grids.

Three problem classes are assembled:

* Dirichlet (``nu``): ``v = l_p + phi`` where ``phi`` vanishes on a particle
  that reaches the boundary, i.e. ``phi_{n+1}(x, xbar) = phi_n(x)`` for
  ``xbar`` on the boundary.  Tied nodes are eliminated, so the unknowns are the
  values at nodes whose sites are all strictly inside the cube.
* Neumann (``nu*``): every node is free, sectors decouple, and the per-sector
  constants form the kernel.  In collar mode the exterior configuration in
  the unit collar enters as a parameter; it is reduced to the finitely many
  exterior states that the midpoint coefficients can distinguish, each with
  its exact Poisson probability.
* Laplace: the Neumann problem with ``a = Id`` and an ``L^2`` right-hand side.
"""

from __future__ import annotations

import itertools
import logging
import math
import time
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp
from scipy import stats

from .coefficients import (
    BALL_GUARD,
    CoefficientModel,
    circle_rect_overlap,
    conditional_level,
    exterior_measure,
    require_valid,
)
from .configspace import (
    DEFAULT_MEMORY_BUDGET,
    SectorField,
    SectorGrid,
    SectorWeights,
    TriadicCube,
    build_sector_grid,
    multiset_rank,
    sector_weights,
)

logger = logging.getLogger(__name__)

__all__ = [
    "Discretization",
    "Context",
    "SolverError",
    "SolveStats",
    "QuadraticProblem",
    "SectorAssembly",
    "CubeSystem",
    "cube_system",
    "assemble_dirichlet",
    "assemble_neumann",
    "solve",
    "pcg",
    "BlockDiagonal",
    "laplace_solve",
    "affine_field",
]


class SolverError(RuntimeError):
    """The iterative solver did not reach the requested tolerance."""

    def __init__(self, message: str, stats: "SolveStats"):
        super().__init__(message)
        self.stats = stats


@dataclass(frozen=True)
class Discretization:
    """Grid and truncation parameters shared by every problem on a cube."""

    h: float = 0.25
    n_max: int = 3
    rho: float = 1.0
    tol: float = 1e-10
    max_iter: int = 50_000
    memory_budget: int = DEFAULT_MEMORY_BUDGET
    mass_floor: float = 0.99
    allow_low_mass: bool = False
    normalizer: str = "truncated_mean"

    def __post_init__(self):
        if self.normalizer not in ("truncated_mean", "volume"):
            raise ValueError(f"unknown normalizer {self.normalizer!r}")


@dataclass(frozen=True)
class Context:
    """Model plus discretization plus the Neumann mode (``interior`` or ``collar``)."""

    model: CoefficientModel
    disc: Discretization
    mode: str = "interior"

    def __post_init__(self):
        if self.mode not in ("interior", "collar"):
            raise ValueError(f"unknown mode {self.mode!r}")

    def with_h(self, h: float) -> "Context":
        from dataclasses import replace

        return replace(self, disc=replace(self.disc, h=h))


@dataclass(frozen=True)
class SolveStats:
    iterations: int
    residual: float
    wall_time: float
    unknowns: int
    converged: bool = True

    def to_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "residual": self.residual,
            "wall_time": self.wall_time,
            "unknowns": self.unknowns,
            "converged": self.converged,
        }


# ---------------------------------------------------------------------------
# reference element
# ---------------------------------------------------------------------------

_M1 = np.array([[1 / 3, 1 / 6], [1 / 6, 1 / 3]])
_K1 = np.array([[1.0, -1.0], [-1.0, 1.0]])
_D1 = np.array([[-0.5, -0.5], [0.5, 0.5]])  # D1[r, s] = int N_r' N_s
_G1 = np.array([-1.0, 1.0])  # int N_r'
_L1 = np.array([0.5, 0.5])  # int N_r


def _kron_all(mats: Sequence[np.ndarray]) -> np.ndarray:
    out = np.ones((1,) * mats[0].ndim)
    for m in mats:
        out = np.kron(out, m)
    return out


@lru_cache(maxsize=32)
def _reference(n: int, d: int):
    """Reference integrals on the unit hypercube of dimension ``n d``.

    Returns the stiffness blocks ``E[i, a, b] = int d_(i,a) N_r d_(i,b) N_s``,
    the gradient integrals ``G[i, a] = int d_(i,a) N_r``, the mass matrix and
    the basis integrals.
    """
    D = n * d
    V = 2**D
    E = np.zeros((n, d, d, V, V))
    G = np.zeros((n, d, V))
    for i in range(n):
        for a in range(d):
            alpha = i * d + a
            G[i, a] = _kron_all([_G1 if g == alpha else _L1 for g in range(D)])
            for b in range(d):
                beta = i * d + b
                mats = []
                for g in range(D):
                    if g == alpha and g == beta:
                        mats.append(_K1)
                    elif g == alpha:
                        mats.append(_D1)
                    elif g == beta:
                        mats.append(_D1.T)
                    else:
                        mats.append(_M1)
                E[i, a, b] = _kron_all(mats)
    M = _kron_all([_M1] * D) if D else np.ones((1, 1))
    L = _kron_all([_L1] * D) if D else np.ones(1)
    bits = ((np.arange(V)[:, None] >> (D - 1 - np.arange(D))[None, :]) & 1).reshape(V, n, d)
    return E, G, M, L, bits


# ---------------------------------------------------------------------------
# per-sector assembly (coefficient independent)
# ---------------------------------------------------------------------------


class SectorAssembly:
    """Element bookkeeping and coefficient-free operators of one sector grid.

    All integrals are averages over ``U^n`` (divided by ``|U|^n``).
    """

    def __init__(self, grid: SectorGrid):
        self.grid = grid
        n, d, h = grid.n, grid.d, grid.h
        self.n, self.d = n, d
        G = grid.nodes_per_axis
        cells_axis = G - 1
        cell_multi = np.stack(
            np.meshgrid(*([np.arange(cells_axis)] * d), indexing="ij"), axis=-1
        ).reshape(-1, d)
        self.n_cells = len(cell_multi)
        strides = G ** np.arange(d - 1, -1, -1)
        self.cell_corner = cell_multi @ strides
        self.cell_mid = grid.sites[self.cell_corner] + 0.5 * h
        self.size = grid.size
        if n == 0:
            self.elements = np.zeros((0, 0), dtype=np.int64)
            self.weight = np.zeros(0)
            self.vertex = np.zeros((0, 1), dtype=np.int64)
            self.mean_weights = np.ones(1)
            self.mass = sp.csr_matrix(np.ones((1, 1)))
            self.grad = np.zeros((d, 1))
            return
        elems = np.fromiter(
            itertools.chain.from_iterable(itertools.combinations_with_replacement(range(self.n_cells), n)),
            dtype=np.int64,
        ).reshape(-1, n)
        # number of distinct permutations of each sorted cell tuple: n! / prod(run!)
        mult = np.full(len(elems), float(math.factorial(n)))
        run = np.ones(len(elems))
        for j in range(1, n):
            run = np.where(elems[:, j] == elems[:, j - 1], run + 1, 1.0)
            mult /= run
        self.elements = elems
        E_ref, G_ref, M_ref, L_ref, bits = _reference(n, d)
        self.E_ref, self.G_ref = E_ref, G_ref
        offsets = bits @ strides  # (V, n) site offsets per particle
        corner = self.cell_corner[elems]  # (E, n)
        vsites = corner[:, None, :] + offsets[None, :, :]  # (E, V, n)
        self.vertex = multiset_rank(np.sort(vsites, axis=-1), grid.n_sites)
        vol = grid.cube.side ** (n * d)
        self.scale_stiff = h ** (n * d - 2) / vol
        self.scale_grad = h ** (n * d - 1) / vol
        self.scale_mass = h ** (n * d) / vol
        self.weight = mult
        V = self.vertex.shape[1]
        rows = np.repeat(self.vertex, V, axis=1).ravel()
        cols = np.tile(self.vertex, (1, V)).ravel()
        lin = rows * self.size + cols
        uniq, inv = np.unique(lin, return_inverse=True)
        self._inv = inv.astype(np.int64)
        self._pattern_rows = uniq // self.size
        self._pattern_cols = uniq % self.size
        self.nnz = len(uniq)
        mass_vals = (self.weight * self.scale_mass)[:, None, None] * M_ref[None]
        self.mass = self._to_csr(mass_vals)
        self.mean_weights = np.bincount(
            self.vertex.ravel(), weights=((self.weight * self.scale_mass)[:, None] * L_ref[None]).ravel(), minlength=self.size
        )
        # averaged gradient summed over particles: d x size
        gsum = G_ref.sum(axis=0)  # (d, V)
        self.grad = np.stack(
            [
                np.bincount(
                    self.vertex.ravel(),
                    weights=((self.weight * self.scale_grad)[:, None] * gsum[a][None]).ravel(),
                    minlength=self.size,
                )
                for a in range(d)
            ]
        )

    def _to_csr(self, vals: np.ndarray) -> sp.csr_matrix:
        data = np.bincount(self._inv, weights=vals.ravel(), minlength=self.nnz)
        mat = sp.csr_matrix((data, (self._pattern_rows, self._pattern_cols)), shape=(self.size, self.size))
        return mat

    def stiffness(self, coef: np.ndarray) -> sp.csr_matrix:
        """Averaged form ``sum_i int grad_i f . A_i grad_i g`` for per-slot matrices.

        ``coef`` has shape ``(n_elements, n, d, d)``.
        """
        if self.n == 0:
            return sp.csr_matrix((1, 1))
        vals = np.einsum("eiab,iabvw->evw", coef, self.E_ref, optimize=True)
        vals *= (self.weight * self.scale_stiff)[:, None, None]
        return self._to_csr(vals)

    def flux(self, coef: np.ndarray) -> np.ndarray:
        """Averaged ``sum_i int A_i grad_i f`` as a ``(d, size)`` operator."""
        if self.n == 0:
            return np.zeros((self.d, 1))
        vals = np.einsum("eiab,ibv->eav", coef, self.G_ref, optimize=True)
        vals *= (self.weight * self.scale_grad)[:, None, None]
        out = np.stack(
            [np.bincount(self.vertex.ravel(), weights=vals[:, a, :].ravel(), minlength=self.size) for a in range(self.d)]
        )
        return out

    def midpoints(self) -> np.ndarray:
        """Element midpoint configurations, shape ``(n_elements, n, d)``."""
        return self.cell_mid[self.elements]


# ---------------------------------------------------------------------------
# cube system: weights, coefficient states, cached operators
# ---------------------------------------------------------------------------


@dataclass
class _State:
    prob: float
    levels: np.ndarray  # (E, n) scalar factor multiplying the base matrix
    stiff: sp.csr_matrix
    flux: np.ndarray


class CubeSystem:
    """Everything needed to pose problems on one cube with one context."""

    def __init__(self, box: TriadicCube, ctx: Context):
        model, disc = ctx.model, ctx.disc
        if not model.has_closed_form:
            raise NotImplementedError("the sector solver needs a model with a closed-form exterior average")
        require_valid(model)
        if box.d != model.d:
            raise ValueError("cube and model dimensions differ")
        if box.d == 2 and disc.n_max > 2:
            raise ValueError("d = 2 is supported only for n_max <= 2")
        if box.d > 2:
            raise ValueError("only d = 1 and d = 2 are supported")
        if ctx.mode == "collar" and box.d != 1:
            raise ValueError("collar mode is implemented for d = 1 only")
        self.box = box
        self.ctx = ctx
        self.weights: SectorWeights = sector_weights(
            disc.rho, box.volume, disc.n_max, floor=disc.mass_floor, allow_low_mass=disc.allow_low_mass
        )
        self.pi = self.weights.as_array()
        if disc.normalizer == "truncated_mean":
            self.norm = self.weights.truncated_mean
        else:
            self.norm = disc.rho * box.volume
        if self.norm <= 0:
            raise ValueError("normalizer vanishes: n_max must be at least 1")
        self.grids = [build_sector_grid(box, n, disc.h, 0, disc.memory_budget) for n in range(disc.n_max + 1)]
        self.asm = [SectorAssembly(g) for g in self.grids]
        self.B = model.base_matrix
        self._cond: list[Optional[_State]] = [None] * len(self.grids)
        self._states: list[Optional[list[_State]]] = [None] * len(self.grids)
        self._free = None
        self._pairs = None
        #: per sector, map from (left pattern, right pattern) to the merged state index
        self.pattern_index: dict[int, dict[tuple, int]] = {}
        self.collar_sides: Optional[dict] = None

    # -- geometry helpers ----------------------------------------------------

    @property
    def n_max(self) -> int:
        return len(self.grids) - 1

    @property
    def sector_factor(self) -> np.ndarray:
        """``pi_n / normalizer``: converts sector averages into normalized expectations."""
        return self.pi / self.norm

    def _pair_probs(self) -> np.ndarray:
        """``P[a, b]``: fraction of cell ``b`` within distance 1 of the midpoint of cell ``a``."""
        if self._pairs is None:
            a0 = self.asm[0]
            h = self.ctx.disc.h
            lo = a0.cell_mid - 0.5 * h
            C = len(lo)
            P = np.empty((C, C))
            if self.box.d == 1:
                x = a0.cell_mid[:, 0]
                left = np.maximum(x[:, None] - 1.0, lo[None, :, 0])
                right = np.minimum(x[:, None] + 1.0, lo[None, :, 0] + h)
                P = np.clip(right - left, 0.0, None) / h
            else:
                for i in range(C):
                    for j in range(C):
                        P[i, j] = circle_rect_overlap(a0.cell_mid[i], 1.0, lo[j], lo[j] + h) / h**2
            self._pairs = np.clip(P, 0.0, 1.0)
        return self._pairs

    def _count_law(self, n: int) -> np.ndarray:
        """Law of the number of other interior particles near particle ``i``.

        Particle ``i`` sits at its cell midpoint; every other particle is
        uniform in its own cell, so it lies within distance 1 with probability
        ``P[cell_i, cell_j]``, independently.  Returns ``law[e, i, K]`` for
        ``K = 0 .. n-1``.
        """
        a = self.asm[n]
        P = self._pair_probs()
        E = len(a.elements)
        law = np.zeros((E, n, n))
        for i in range(n):
            dist = np.zeros((E, n))
            dist[:, 0] = 1.0
            for j in range(n):
                if j == i:
                    continue
                pj = P[a.elements[:, i], a.elements[:, j]][:, None]
                shifted = np.zeros_like(dist)
                shifted[:, 1:] = dist[:, :-1]
                dist = (1.0 - pj) * dist + pj * shifted
            law[:, i, :] = dist
        return law

    def _cell_lambda(self) -> np.ndarray:
        return np.array([exterior_measure(m, self.box) for m in self.asm[0].cell_mid])

    def _coef_from_levels(self, g: np.ndarray) -> np.ndarray:
        return g[..., None, None] * self.B[None, None]

    # -- conditional (interior) coefficient ----------------------------------

    def conditional(self, n: int) -> _State:
        if self._cond[n] is None:
            a = self.asm[n]
            if n == 0:
                g = np.zeros((0, 0))
                coef = np.zeros((0, 0, self.box.d, self.box.d))
            else:
                law = self._count_law(n)
                lam = self._cell_lambda()[a.elements]
                g = sum(
                    law[:, :, K] * conditional_level(self.ctx.model, 1 + K, lam, self.ctx.disc.rho) for K in range(n)
                )
                coef = self._coef_from_levels(g)
            self._cond[n] = _State(1.0, g, a.stiffness(coef), a.flux(coef))
        return self._cond[n]

    # -- collar exterior states ---------------------------------------------

    def _side_patterns(self, dists: np.ndarray, cap: int):
        """Exterior states of one side of the collar (d = 1).

        ``dists`` are the distances from cell midpoints to that face.  Only
        cells closer than 1 see the collar; the exterior count relevant to a
        cell is the number of collar points within ``1 - dist`` of the face,
        capped at ``cap``.  Returns ``(patterns, probs, index_of_cell)`` where a
        pattern lists the capped cumulative counts at the sorted breakpoints.
        """
        rho = self.ctx.disc.rho
        reach = 1.0 - dists
        live = reach > BALL_GUARD
        lengths = np.unique(np.round(reach[live], 12))
        idx = np.full(len(dists), -1)
        if len(lengths):
            idx[live] = np.searchsorted(lengths, np.round(reach[live], 12))
        states = {(): 1.0}
        prev = 0.0
        for L in lengths:
            mean = rho * (L - prev)
            prev = L
            pmf = stats.poisson.pmf(np.arange(cap + 1), mean)
            nxt: dict[tuple, float] = {}
            for pat, pr in states.items():
                cur = pat[-1] if pat else 0
                left = 1.0
                for k in range(cap - cur):
                    key = pat + (cur + k,)
                    nxt[key] = nxt.get(key, 0.0) + pr * pmf[k]
                    left -= pmf[k]
                key = pat + (cap,)
                nxt[key] = nxt.get(key, 0.0) + pr * max(left, 0.0)
            states = nxt
        pats = sorted(states)
        return pats, np.array([states[p] for p in pats]), idx, lengths

    def states(self, n: int) -> list[_State]:
        """Coefficient states for the Neumann problem in the context's mode."""
        if self.ctx.mode == "interior" or n == 0:
            return [self.conditional(n)]
        if self._states[n] is not None:
            return self._states[n]
        model = self.ctx.model
        cap = max(model.count_cap - 1, 0)
        a = self.asm[n]
        if cap == 0:
            self._states[n] = [self.conditional(n)]
            return self._states[n]
        mids = a.cell_mid[:, 0]
        lo, hi = self.box.lower[0], self.box.upper[0]
        pl, ql, il, lengths_l = self._side_patterns(mids - lo, cap)
        pr, qr, ir, lengths_r = self._side_patterns(hi - mids, cap)
        self.collar_sides = {"left": (pl, ql, lengths_l), "right": (pr, qr, lengths_r), "cap": cap}
        law = self._count_law(n)
        merged: dict[bytes, list] = {}
        index: dict[tuple, int] = {}
        for (patl, probl), (patr, probr) in itertools.product(zip(pl, ql), zip(pr, qr)):
            ext = np.zeros(a.n_cells, dtype=np.int64)
            if patl:
                ext += np.where(il >= 0, np.asarray(patl)[np.maximum(il, 0)], 0)
            if patr:
                ext += np.where(ir >= 0, np.asarray(patr)[np.maximum(ir, 0)], 0)
            ext_e = ext[a.elements]
            g = sum(law[:, :, K] * model.level(1 + K + ext_e) for K in range(n))
            key = g.tobytes()
            if key in merged:
                merged[key][0] += probl * probr
            else:
                merged[key] = [probl * probr, g]
            index[(patl, patr)] = list(merged).index(key)
        self.pattern_index[n] = index
        out = []
        for prob, g in merged.values():
            coef = self._coef_from_levels(g)
            out.append(_State(prob, g, a.stiffness(coef), a.flux(coef)))
        self._states[n] = out
        return out

    # -- Dirichlet elimination map -------------------------------------------

    def free_map(self):
        """For each sector, the free-unknown index of every node (after tying)."""
        if self._free is not None:
            return self._free
        g0 = self.grids[0]
        inside = g0.site_inside
        compact = np.full(g0.n_sites, -1, dtype=np.int64)
        compact[inside] = np.arange(inside.sum())
        s_int = int(inside.sum())
        offsets = [0]
        for n in range(self.n_max + 1):
            offsets.append(offsets[-1] + math.comb(s_int + n - 1, n) if s_int > 0 or n == 0 else offsets[-1])
        maps = []
        for n, g in enumerate(self.grids):
            if n == 0:
                maps.append(np.zeros(1, dtype=np.int64))
                continue
            c = np.sort(compact[g.reps], axis=1)
            cnt = (c >= 0).sum(axis=1)
            out = np.empty(g.size, dtype=np.int64)
            for k in range(n + 1):
                rows = np.nonzero(cnt == k)[0]
                if len(rows) == 0:
                    continue
                tail = c[rows, n - k:]
                out[rows] = offsets[k] + multiset_rank(tail, max(s_int, 1))
            maps.append(out)
        self._free = (maps, offsets[-1])
        return self._free

    def prolongation(self, n: int) -> sp.csr_matrix:
        maps, n_free = self.free_map()
        m = maps[n]
        return sp.csr_matrix((np.ones(len(m)), (np.arange(len(m)), m)), shape=(len(m), n_free))

    def affine_values(self, n: int, p: Sequence[float]) -> np.ndarray:
        """Nodal values of ``l_p(mu) = sum_i p . x_i`` on sector ``n``."""
        if n == 0:
            return np.zeros(1)
        coords = self.grids[n].node_coordinates()  # (N, n, d)
        return coords.sum(axis=1) @ np.asarray(p, dtype=float)


@lru_cache(maxsize=16)
def cube_system(box: TriadicCube, ctx: Context) -> CubeSystem:
    """Cached :class:`CubeSystem` for ``(box, ctx)``."""
    return CubeSystem(box, ctx)


# ---------------------------------------------------------------------------
# problems
# ---------------------------------------------------------------------------


class BlockDiagonal:
    """Block-diagonal operator that keeps its blocks separate.

    Collar problems have one block per (sector, exterior state); gluing them
    into one sparse matrix would copy every block, so products are applied
    block by block instead.
    """

    def __init__(self, blocks: Sequence[sp.spmatrix]):
        self.blocks = [sp.csr_matrix(b) for b in blocks]
        self.offsets = np.cumsum([0] + [b.shape[0] for b in self.blocks])
        self.shape = (int(self.offsets[-1]), int(self.offsets[-1]))

    def diagonal(self) -> np.ndarray:
        if not self.blocks:
            return np.zeros(0)
        return np.concatenate([b.diagonal() for b in self.blocks])

    def __matmul__(self, x: np.ndarray) -> np.ndarray:
        out = np.empty(self.shape[0])
        for b, s, e in zip(self.blocks, self.offsets[:-1], self.offsets[1:]):
            out[s:e] = b @ x[s:e]
        return out

    def tocsr(self) -> sp.csr_matrix:
        if not self.blocks:
            return sp.csr_matrix((0, 0))
        return sp.block_diag(self.blocks, format="csr")

    def toarray(self) -> np.ndarray:
        return self.tocsr().toarray()


@dataclass(eq=False)
class QuadraticProblem:
    """``min 1/2 x'Ax + b'x + c`` (Dirichlet) or ``max -1/2 x'Ax + b'x`` (Neumann).

    ``kernel_blocks`` assigns each unknown to a kernel block (constants on the
    block span the null space of ``A``); ``-1`` marks unknowns outside any
    block.  ``gauge_weights`` fix the representative returned by :func:`solve`:
    the weighted mean over each block is set to zero.
    """

    kind: str
    A: "sp.csr_matrix | BlockDiagonal"
    b: np.ndarray
    c: float
    kernel_blocks: np.ndarray
    gauge_weights: np.ndarray
    system: CubeSystem
    slope: tuple[float, ...]
    layout: list = field(default_factory=list)


def assemble_dirichlet(box: TriadicCube, p: Sequence[float], ctx: Context) -> QuadraticProblem:
    """Discrete ``nu(U, p)`` with the trace ties eliminated."""
    sysm = cube_system(box, ctx)
    p = np.asarray(p, dtype=float).reshape(box.d)
    maps, n_free = sysm.free_map()
    fac = sysm.sector_factor
    A = sp.csr_matrix((n_free, n_free))
    b = np.zeros(n_free)
    c = 0.0
    gw = np.zeros(n_free)
    for n in range(sysm.n_max + 1):
        P = sysm.prolongation(n)
        gw += sysm.pi[n] * (P.T @ sysm.asm[n].mean_weights)
        if n == 0:
            continue
        S = sysm.conditional(n).stiff * fac[n]
        ell = sysm.affine_values(n, p)
        A = A + P.T @ S @ P
        b += P.T @ (S @ ell)
        c += 0.5 * ell @ (S @ ell)
    return QuadraticProblem(
        "dirichlet", sp.csr_matrix(A), b, float(c), np.zeros(n_free, dtype=np.int64), gw, sysm, tuple(p)
    )


def assemble_neumann(box: TriadicCube, q: Sequence[float], ctx: Context) -> QuadraticProblem:
    """Discrete ``nu*(U, q)``; sectors and exterior states are independent blocks."""
    sysm = cube_system(box, ctx)
    q = np.asarray(q, dtype=float).reshape(box.d)
    fac = sysm.sector_factor
    blocks, rhs, kb, gw, layout = [], [], [], [], []
    start = 0
    bid = 0
    for n in range(1, sysm.n_max + 1):
        a = sysm.asm[n]
        for j, st in enumerate(sysm.states(n)):
            w = fac[n] * st.prob
            blocks.append(st.stiff * w)
            rhs.append(w * (q @ a.grad))
            kb.append(np.full(a.size, bid))
            gw.append(a.mean_weights)
            layout.append((n, j, start, start + a.size))
            start += a.size
            bid += 1
    A = BlockDiagonal(blocks)
    return QuadraticProblem(
        "neumann",
        A,
        np.concatenate(rhs) if rhs else np.zeros(0),
        0.0,
        np.concatenate(kb) if kb else np.zeros(0, dtype=np.int64),
        np.concatenate(gw) if gw else np.zeros(0),
        sysm,
        tuple(q),
        layout,
    )


# ---------------------------------------------------------------------------
# projected preconditioned conjugate gradients
# ---------------------------------------------------------------------------


def _block_projector(blocks: np.ndarray):
    if blocks.size == 0 or blocks.max() < 0:
        return lambda x: x
    live = blocks >= 0
    nb = int(blocks.max()) + 1
    idx = np.where(live, blocks, 0)
    counts = np.bincount(idx[live], minlength=nb).astype(float)

    def project(x: np.ndarray) -> np.ndarray:
        sums = np.bincount(idx[live], weights=x[live], minlength=nb)
        out = x.copy()
        out[live] -= (sums / counts)[idx[live]]
        return out

    return project


def pcg(
    A: sp.spmatrix,
    b: np.ndarray,
    tol: float = 1e-10,
    max_iter: int = 50_000,
    kernel_blocks: Optional[np.ndarray] = None,
) -> tuple[np.ndarray, SolveStats]:
    """Jacobi-preconditioned CG on the complement of the block-constant kernel.

    Iterates, residuals and preconditioned residuals are projected onto the
    orthogonal complement of the kernel, so the iteration is an ordinary CG on
    a space where ``A`` is positive definite.  Stops when
    ``|r| <= tol * |b|``; raises :class:`SolverError` otherwise.
    """
    t0 = time.perf_counter()
    n = len(b)
    project = _block_projector(kernel_blocks if kernel_blocks is not None else np.full(n, -1))
    bp = project(b)
    bnorm = float(np.linalg.norm(bp))
    x = np.zeros(n)
    if bnorm == 0.0:
        return x, SolveStats(0, 0.0, time.perf_counter() - t0, n)
    diag = A.diagonal()
    inv_diag = np.where(diag > 0, 1.0 / np.where(diag > 0, diag, 1.0), 1.0)
    r = bp.copy()
    z = project(inv_diag * r)
    pdir = z.copy()
    rz = float(r @ z)
    rel = 1.0
    it = 0
    for it in range(1, max_iter + 1):
        Ap = A @ pdir
        denom = float(pdir @ Ap)
        if denom <= 0:
            break
        alpha = rz / denom
        x += alpha * pdir
        r -= alpha * Ap
        r = project(r)
        rel = float(np.linalg.norm(r)) / bnorm
        if rel <= tol:
            return project(x), SolveStats(it, rel, time.perf_counter() - t0, n)
        z = project(inv_diag * r)
        rz_new = float(r @ z)
        pdir = z + (rz_new / rz) * pdir
        rz = rz_new
    # recompute the true residual before giving up
    rel = float(np.linalg.norm(project(bp - A @ x))) / bnorm
    st = SolveStats(it, rel, time.perf_counter() - t0, n, converged=rel <= tol)
    if rel <= tol:
        return project(x), st
    raise SolverError(f"CG stopped after {it} iterations at relative residual {rel:.3e} (tol {tol:.1e})", st)


def _regauge(x: np.ndarray, blocks: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Shift each kernel block so that its weighted mean vanishes."""
    if x.size == 0 or blocks.max() < 0:
        return x
    nb = int(blocks.max()) + 1
    live = blocks >= 0
    num = np.bincount(blocks[live], weights=(weights * x)[live], minlength=nb)
    den = np.bincount(blocks[live], weights=weights[live], minlength=nb)
    shift = np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)
    out = x.copy()
    out[live] -= shift[blocks[live]]
    return out


def solve(problem: QuadraticProblem, tol: Optional[float] = None) -> tuple[SectorField, float, SolveStats]:
    """Solve the first-order conditions; return the field, the objective value and stats."""
    sysm = problem.system
    tol = sysm.ctx.disc.tol if tol is None else tol
    if problem.kind == "dirichlet":
        x, st = pcg(problem.A, -problem.b, tol, sysm.ctx.disc.max_iter, problem.kernel_blocks)
        x = _regauge(x, problem.kernel_blocks, problem.gauge_weights)
        energy = float(0.5 * x @ (problem.A @ x) + problem.b @ x + problem.c)
        vals = []
        for n in range(sysm.n_max + 1):
            vals.append(sysm.affine_values(n, problem.slope) + sysm.prolongation(n) @ x)
        fld = SectorField(tuple(sysm.grids), tuple(vals), "dirichlet", problem.slope)
        return fld, energy, st
    x, st = pcg(problem.A, problem.b, tol, sysm.ctx.disc.max_iter, problem.kernel_blocks)
    x = _regauge(x, problem.kernel_blocks, problem.gauge_weights)
    energy = float(-0.5 * x @ (problem.A @ x) + problem.b @ x)
    vals = [np.zeros((1, 1))]
    probs = [np.ones(1)]
    for n in range(1, sysm.n_max + 1):
        rows = [(j, s, e) for (m, j, s, e) in problem.layout if m == n]
        vals.append(np.stack([x[s:e] for _, s, e in rows]))
        probs.append(np.array([sysm.states(n)[j].prob for j, _, _ in rows]))
    fld = SectorField(tuple(sysm.grids), tuple(vals), "neumann", None, tuple(probs))
    return fld, energy, st


def affine_field(box: TriadicCube, p: Sequence[float], ctx: Context) -> SectorField:
    """The field ``l_{p,U}`` on the grids of ``box``."""
    sysm = cube_system(box, ctx)
    vals = tuple(sysm.affine_values(n, p) for n in range(sysm.n_max + 1))
    return SectorField(tuple(sysm.grids), vals, "dirichlet", tuple(float(x) for x in np.ravel(p)))


# ---------------------------------------------------------------------------
# Laplace problem
# ---------------------------------------------------------------------------


def laplace_solve(box: TriadicCube, f: SectorField, ctx: Context, tol: Optional[float] = None) -> SectorField:
    """Solve ``-Laplace u = f`` weakly in the Neumann class, per-sector mean zero.

    The test space is every nodal field; since sectors decouple, each sector
    solves ``S_n u_n = M_n f_n`` with the identity-coefficient stiffness.
    """
    sysm = cube_system(box, ctx)
    tol = sysm.ctx.disc.tol if tol is None else tol
    out = []
    for n, g, vals, _ in f.iter_sectors():
        fn = vals[0]
        a = sysm.asm[n]
        scale = max(float(np.abs(fn).max()), 1.0)
        mean = float(a.mean_weights @ fn)
        if abs(mean) > 1e-10 * scale:
            raise ValueError(f"right-hand side has nonzero mean {mean:.3e} in sector {n}")
        if n == 0:
            out.append(np.zeros(1))
            continue
        eye = np.broadcast_to(np.eye(box.d), (len(a.elements), n, box.d, box.d))
        S = a.stiffness(np.ascontiguousarray(eye))
        rhs = a.mass @ fn
        u, _ = pcg(S, rhs, tol, sysm.ctx.disc.max_iter, np.zeros(a.size, dtype=np.int64))
        out.append(_regauge(u, np.zeros(a.size, dtype=np.int64), a.mean_weights))
    return SectorField(tuple(sysm.grids), tuple(out), "neumann")
