"""The subadditive quantities and their elementary identities.

Every expectation below is the normalized one,
``E[(1/norm) sum_{x_i in U} ...]``, which on the sector grids reads
``sum_n (pi_n / norm) * (average over U^n of the sum over particles)``.
Collar fields carry one row per exterior state and are averaged with the
state probabilities.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .configspace import SectorField, TriadicCube
from .sectorsolver import (
    Context,
    CubeSystem,
    SolveStats,
    assemble_dirichlet,
    assemble_neumann,
    cube_system,
    solve,
)

logger = logging.getLogger(__name__)

__all__ = [
    "InvariantError",
    "InadmissibleFieldError",
    "NuResult",
    "NuStarResult",
    "JResult",
    "nu",
    "nu_star",
    "abar_pair",
    "j_value",
    "quadratic_response_check",
    "optimizer_gap",
    "bilinear",
    "gradient_average",
    "flux_average",
    "sector_offset",
]

#: relative tolerance for identities that hold exactly up to the solver residual
IDENTITY_TOL = 1e-8


class InvariantError(AssertionError):
    """A mathematical invariant failed; this indicates a bug, not bad input."""


class InadmissibleFieldError(ValueError):
    """A candidate field is not in the class required by the identity."""


# ---------------------------------------------------------------------------
# field calculus
# ---------------------------------------------------------------------------


def _stiff_states(sysm: CubeSystem, n: int, n_states: int) -> list[tuple[float, sp.csr_matrix]]:
    if n_states == 1:
        return [(1.0, sysm.conditional(n).stiff)]
    states = sysm.states(n)
    if len(states) != n_states:
        raise InadmissibleFieldError(f"sector {n}: field has {n_states} exterior states, context has {len(states)}")
    return [(st.prob, st.stiff) for st in states]


def _rows(vals: np.ndarray, k: int) -> np.ndarray:
    return vals[0] if vals.shape[0] == 1 else vals[k]


def bilinear(sysm: CubeSystem, f: SectorField, g: SectorField) -> float:
    """``E[(1/norm) int grad f . a grad g dmu]``.

    A single-state field paired with itself uses the conditional coefficient,
    which is exact because the field does not see the exterior.
    """
    fac = sysm.sector_factor
    total = 0.0
    for n in range(1, sysm.n_max + 1):
        fv, gv = f.values[n], g.values[n]
        ns = max(fv.shape[0], gv.shape[0])
        for k, (prob, S) in enumerate(_stiff_states(sysm, n, ns)):
            total += fac[n] * prob * float(_rows(fv, k) @ (S @ _rows(gv, k)))
    return total


def _identity_stiffness(sysm: CubeSystem, n: int) -> sp.csr_matrix:
    cache = sysm.__dict__.setdefault("_id_stiff", {})
    if n not in cache:
        a = sysm.asm[n]
        eye = np.broadcast_to(np.eye(sysm.box.d), (len(a.elements), n, sysm.box.d, sysm.box.d))
        cache[n] = a.stiffness(np.ascontiguousarray(eye))
    return cache[n]


def dirichlet_norm_sq(sysm: CubeSystem, f: SectorField) -> float:
    """``E[(1/norm) int |grad f|^2 dmu]`` (identity coefficient)."""
    fac = sysm.sector_factor
    total = 0.0
    for n in range(1, sysm.n_max + 1):
        S = _identity_stiffness(sysm, n)
        for k, prob in enumerate(f.state_probs[n]):
            v = f.values[n][k]
            total += fac[n] * prob * float(v @ (S @ v))
    return total


def gradient_average(sysm: CubeSystem, f: SectorField) -> np.ndarray:
    """``E[(1/norm) int grad f dmu]``."""
    fac = sysm.sector_factor
    out = np.zeros(sysm.box.d)
    for n in range(1, sysm.n_max + 1):
        G = sysm.asm[n].grad
        for k, prob in enumerate(f.state_probs[n]):
            out += fac[n] * prob * (G @ f.values[n][k])
    return out


def flux_average(sysm: CubeSystem, f: SectorField) -> np.ndarray:
    """``E[(1/norm) int a grad f dmu]``."""
    fac = sysm.sector_factor
    out = np.zeros(sysm.box.d)
    for n in range(1, sysm.n_max + 1):
        vals = f.values[n]
        if vals.shape[0] == 1:
            out += fac[n] * (sysm.conditional(n).flux @ vals[0])
        else:
            for k, st in enumerate(sysm.states(n)):
                out += fac[n] * st.prob * (st.flux @ vals[k])
    return out


def sector_offset(sysm: CubeSystem, f: SectorField) -> list[np.ndarray]:
    """Per-(sector, state) averages ``E[f | G_U]`` (the sector-constant part)."""
    return [
        np.array([sysm.asm[n].mean_weights @ row for row in f.values[n]]) for n in range(sysm.n_max + 1)
    ]


def _combine(fields: Sequence[SectorField], coeffs: Sequence[float], kind: str = "free", slope=None) -> SectorField:
    grids = fields[0].grids
    vals, probs = [], []
    for n in range(len(grids)):
        ns = max(f.values[n].shape[0] for f in fields)
        acc = np.zeros((ns, grids[n].size))
        for f, c in zip(fields, coeffs):
            acc += c * f.values[n]  # single-state rows broadcast over states
        vals.append(acc)
        src = next((f for f in fields if f.values[n].shape[0] == ns), fields[0])
        probs.append(src.state_probs[n])
    return SectorField(grids, tuple(vals), kind, slope, tuple(probs))


def _recenter(sysm: CubeSystem, f: SectorField, kind: str = "free") -> SectorField:
    offs = sector_offset(sysm, f)
    vals = tuple(f.values[n] - offs[n][:, None] for n in range(len(f.grids)))
    return SectorField(f.grids, vals, kind, f.slope, f.state_probs)


# ---------------------------------------------------------------------------
# results
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class NuResult:
    value: float
    slope: tuple[float, ...]
    minimizer: SectorField
    flux: np.ndarray
    slope_residual: float
    stats: SolveStats

    def to_dict(self) -> dict:
        return {
            "value": self.value,
            "slope": list(self.slope),
            "flux": self.flux.tolist(),
            "slope_residual": self.slope_residual,
        }


@dataclass(frozen=True, eq=False)
class NuStarResult:
    value: float
    flux: tuple[float, ...]
    maximizer: SectorField
    average_gradient: np.ndarray
    mode: str
    stats: SolveStats

    def to_dict(self) -> dict:
        return {
            "value": self.value,
            "flux": list(self.flux),
            "average_gradient": self.average_gradient.tolist(),
            "mode": self.mode,
        }


@dataclass(frozen=True, eq=False)
class JResult:
    value: float
    p: tuple[float, ...]
    q: tuple[float, ...]
    optimizer: SectorField
    energy_residual: float
    slope: np.ndarray

    def to_dict(self) -> dict:
        return {
            "value": self.value,
            "p": list(self.p),
            "q": list(self.q),
            "energy_residual": self.energy_residual,
            "slope": self.slope.tolist(),
        }


# ---------------------------------------------------------------------------
# nu, nu*, abar
# ---------------------------------------------------------------------------


def _vec(x, d: int) -> tuple[float, ...]:
    arr = np.asarray(x, dtype=float).reshape(-1)
    if arr.size != d:
        raise ValueError(f"expected a vector of length {d}, got {arr.size}")
    return tuple(float(v) for v in arr)


@lru_cache(maxsize=64)
def _nu_cached(box: TriadicCube, p: tuple, ctx: Context) -> NuResult:
    sysm = cube_system(box, ctx)
    fld, energy, st = solve(assemble_dirichlet(box, p, ctx))
    flux = flux_average(sysm, fld)
    slope_res = float(np.linalg.norm(gradient_average(sysm, fld) - np.asarray(p)))
    return NuResult(energy, p, fld, flux, slope_res, st)


@lru_cache(maxsize=64)
def _nu_star_cached(box: TriadicCube, q: tuple, ctx: Context) -> NuStarResult:
    sysm = cube_system(box, ctx)
    fld, energy, st = solve(assemble_neumann(box, q, ctx))
    return NuStarResult(energy, q, fld, gradient_average(sysm, fld), ctx.mode, st)


def nu(box: TriadicCube, p: Sequence[float], ctx: Context) -> NuResult:
    """``nu(U, p) = inf over l_p + H^1_0 of E[(1/norm) int 1/2 grad v . a grad v]``."""
    return _nu_cached(box, _vec(p, box.d), ctx)


def nu_star(box: TriadicCube, q: Sequence[float], ctx: Context) -> NuStarResult:
    """``nu*(U, q) = sup over H^1 of E[(1/norm) int (-1/2 grad u . a grad u + q . grad u)]``."""
    return _nu_star_cached(box, _vec(q, box.d), ctx)


def _polarize(values: dict, d: int) -> np.ndarray:
    """Recover ``M`` from ``f(p) = 1/2 p.Mp`` at ``e_i`` and ``e_i + e_j``."""
    M = np.zeros((d, d))
    for i in range(d):
        M[i, i] = 2.0 * values[(i,)]
    for i in range(d):
        for j in range(i + 1, d):
            M[i, j] = M[j, i] = values[(i, j)] - values[(i,)] - values[(j,)]
    return M


def abar_pair(box: TriadicCube, ctx: Context, tol: float = 1e-8) -> tuple[np.ndarray, np.ndarray]:
    """``(abar(U), abar_*(U))`` by polarization, with consistency checks.

    The flux matrix (columns ``E[a grad v(e_j)]``) must be symmetric and agree
    with the polarized matrix; ``Id <= abar_* <= abar <= Lambda Id`` is checked
    for models with ``a >= Id``.
    """
    d = box.d
    eye = np.eye(d)
    nu_vals, ns_vals = {}, {}
    flux_cols = []
    for i in range(d):
        r = nu(box, eye[i], ctx)
        nu_vals[(i,)] = r.value
        flux_cols.append(r.flux)
        ns_vals[(i,)] = nu_star(box, eye[i], ctx).value
    for i in range(d):
        for j in range(i + 1, d):
            nu_vals[(i, j)] = nu(box, eye[i] + eye[j], ctx).value
            ns_vals[(i, j)] = nu_star(box, eye[i] + eye[j], ctx).value
    abar = _polarize(nu_vals, d)
    astar_inv = _polarize(ns_vals, d)
    F = np.column_stack(flux_cols)
    scale = max(1.0, float(np.abs(abar).max()))
    if np.abs(F - F.T).max() > tol * scale or np.abs(F - abar).max() > tol * scale:
        raise InvariantError(f"flux matrix {F.tolist()} inconsistent with polarized abar {abar.tolist()}")
    astar = np.linalg.inv(astar_inv)
    gap = np.linalg.eigvalsh(abar - astar).min()
    if gap < -tol * scale:
        raise InvariantError(f"abar - abar_* has eigenvalue {gap:.3e} < 0")
    if ctx.disc.normalizer == "truncated_mean":
        model = ctx.model
        b_eigs = np.linalg.eigvalsh(model.base_matrix)
        lower = min(model.levels) * b_eigs.min()
        upper = max(model.levels) * b_eigs.max()
        lo = np.linalg.eigvalsh(astar).min()
        hi = np.linalg.eigvalsh(abar).max()
        if lo < lower - tol * scale or hi > upper + tol * scale:
            raise InvariantError(f"ellipticity bounds violated: min eig abar_* {lo:.6g}, max eig abar {hi:.6g}")
    return abar, astar


# ---------------------------------------------------------------------------
# J
# ---------------------------------------------------------------------------


def j_value(box: TriadicCube, p: Sequence[float], q: Sequence[float], ctx: Context, tol: float = 1e-9) -> JResult:
    """``J(U,p,q) = nu(U,p) + nu*(U,q) - p.q`` with its optimizer and energy identity."""
    p = _vec(p, box.d)
    q = _vec(q, box.d)
    sysm = cube_system(box, ctx)
    rv = nu(box, p, ctx)
    ru = nu_star(box, q, ctx)
    value = rv.value + ru.value - float(np.dot(p, q))
    vj = _recenter(sysm, _combine([ru.maximizer, rv.minimizer], [1.0, -1.0]), "neumann")
    energy = 0.5 * bilinear(sysm, vj, vj)
    scale = max(1.0, abs(rv.value) + abs(ru.value))
    if value < -tol * scale:
        raise InvariantError(f"J = {value:.3e} < 0 at p={p}, q={q}")
    slope = gradient_average(sysm, vj)
    return JResult(value, p, q, vj, abs(value - energy) / scale, slope)


# ---------------------------------------------------------------------------
# quadratic response
# ---------------------------------------------------------------------------


def _check_dirichlet_class(sysm: CubeSystem, w: SectorField, p: tuple, tol: float) -> None:
    """Every node tied to the same free unknown must carry the same value of ``w - l_p``."""
    if any(v.shape[0] != 1 for v in w.values):
        raise InadmissibleFieldError("Dirichlet-class candidates cannot depend on the exterior")
    maps, n_free = sysm.free_map()
    lo = np.full(n_free, np.inf)
    hi = np.full(n_free, -np.inf)
    scale = 1.0
    for n in range(sysm.n_max + 1):
        phi = w.values[n][0] - sysm.affine_values(n, p)
        np.minimum.at(lo, maps[n], phi)
        np.maximum.at(hi, maps[n], phi)
        scale = max(scale, float(np.abs(phi).max()))
    spread = float((hi - lo).max(initial=0.0))
    if spread > tol * scale:
        raise InadmissibleFieldError(f"boundary trace constraint violated by {spread:.3e}")


def _harmonic_residual(sysm: CubeSystem, w: SectorField) -> float:
    """Largest ``|E[(1/norm) int grad w . a grad psi]|`` over the nodal basis of the Dirichlet class."""
    maps, n_free = sysm.free_map()
    fac = sysm.sector_factor
    r = np.zeros(n_free)
    for n in range(1, sysm.n_max + 1):
        P = sysm.prolongation(n)
        vals = w.values[n]
        for k, (prob, S) in enumerate(_stiff_states(sysm, n, vals.shape[0])):
            r += fac[n] * prob * (P.T @ (S @ _rows(vals, k)))
    return float(np.abs(r).max(initial=0.0))


def quadratic_response_check(
    box: TriadicCube,
    kind: str,
    candidate: SectorField,
    ctx: Context,
    p: Optional[Sequence[float]] = None,
    q: Optional[Sequence[float]] = None,
    tol: float = 1e-8,
) -> float:
    """Relative residual of the quadratic response identity for ``candidate``.

    ``kind`` is ``nu`` (candidate in ``l_p + H^1_0``; ``p`` defaults to the
    candidate's slope), ``nu_star`` (candidate in ``H^1``, flux ``q``) or ``J``
    (candidate ``a``-harmonic, with ``p`` and ``q``).
    """
    sysm = cube_system(box, ctx)
    if kind == "nu":
        pp = _vec(p if p is not None else candidate.slope, box.d)
        _check_dirichlet_class(sysm, candidate, pp, tol)
        rv = nu(box, pp, ctx)
        diff = _combine([candidate, rv.minimizer], [1.0, -1.0])
        lhs = 0.5 * bilinear(sysm, diff, diff)
        rhs = 0.5 * bilinear(sysm, candidate, candidate) - rv.value
        scale = max(1.0, abs(rv.value))
    elif kind == "nu_star":
        qq = _vec(q, box.d)
        ru = nu_star(box, qq, ctx)
        diff = _combine([candidate, ru.maximizer], [1.0, -1.0])
        lhs = 0.5 * bilinear(sysm, diff, diff)
        obj = -0.5 * bilinear(sysm, candidate, candidate) + float(np.dot(qq, gradient_average(sysm, candidate)))
        rhs = ru.value - obj
        scale = max(1.0, abs(ru.value))
    elif kind == "J":
        pp, qq = _vec(p, box.d), _vec(q, box.d)
        res = _harmonic_residual(sysm, candidate)
        energy_scale = max(1.0, bilinear(sysm, candidate, candidate))
        if res > 1e-6 * energy_scale:
            raise InadmissibleFieldError(f"candidate is not a-harmonic (residual {res:.3e})")
        jr = j_value(box, pp, qq, ctx)
        diff = _combine([candidate, jr.optimizer], [1.0, -1.0])
        lhs = 0.5 * bilinear(sysm, diff, diff)
        obj = (
            -0.5 * bilinear(sysm, candidate, candidate)
            - float(np.dot(pp, flux_average(sysm, candidate)))
            + float(np.dot(qq, gradient_average(sysm, candidate)))
        )
        rhs = jr.value - obj
        scale = max(1.0, abs(jr.value), energy_scale)
    else:
        raise ValueError(f"unknown kind {kind!r}")
    return abs(lhs - rhs) / scale


def optimizer_gap(box: TriadicCube, p: Sequence[float], ctx: Context) -> tuple[float, float]:
    """``E[(1/norm) int |grad(u - v)|^2]`` at ``q = abar_*(U) p``, returned with ``J(U, p, q)``.

    Since ``a >= Id`` this is at most ``2 J(U, p, abar_*(U) p)``.
    """
    p = np.asarray(_vec(p, box.d))
    _, astar = abar_pair(box, ctx)
    q = astar @ p
    jr = j_value(box, p, q, ctx)
    sysm = cube_system(box, ctx)
    return dirichlet_norm_sq(sysm, jr.optimizer), jr.value
