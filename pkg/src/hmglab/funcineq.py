"""Empirical harness for the functional inequalities on configuration space.

All expectations here are plain expectations under the truncated Poisson law
of the cube the field lives on (no ``1/norm`` factor):

``E[F] = sum_N pi_N * (average over U^N and over exterior states of F_N)``.

Fields are evaluated pointwise by multilinear interpolation on their sector
grids, so every quantity can be computed either exactly (element integration
or tensor quadrature, when the field is piecewise multilinear in the relevant
variables) or by Monte Carlo with a standard error.

Contents
--------
* :func:`snk_gradient_average` and :func:`martingale_residual`: conditional
  sub-cube averages of the gradient given the sub-cube counts.
* :func:`poincare_ratio`, :func:`random_corpus` and
  :func:`multiscale_poincare_check`.
* :func:`localize`: the localization operators ``A_t``, ``A_{s,eps}`` and
  ``Atilde_{s,eps}``, with checks of the gradient formula, the bracket and the
  quadratic identity.
* :func:`weak_caccioppoli_check` and :func:`caccioppoli_parameters`.
"""

from __future__ import annotations

import itertools
import logging
import math
import weakref
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np

from .coefficients import CoefficientModel
from .configspace import (
    SectorField,
    SectorGrid,
    TriadicCube,
    build_sector_grid,
    multiset_rank,
    rng_stream,
    sector_weights,
)
from .quantities import InadmissibleFieldError, InvariantError, _harmonic_residual
from .sectorsolver import Context, SectorAssembly, cube_system

logger = logging.getLogger(__name__)

__all__ = [
    "AveragedGradient",
    "LocalizationReport",
    "LocalizedField",
    "MCEstimate",
    "MartingaleReport",
    "MultiscaleReport",
    "CaccioppoliReport",
    "evaluate_field",
    "snk_gradient_average",
    "snk_energy",
    "snk_contraction_mc",
    "martingale_residual",
    "poincare_ratio",
    "random_corpus",
    "multiscale_poincare_check",
    "localize",
    "weak_caccioppoli_check",
    "caccioppoli_parameters",
    "theta_prime",
]

#: quadrature nodes per smooth piece of the ``t`` integral in ``A_{s,eps}``
GL_NODES = 6
#: largest tensor-quadrature size for the shell average before switching to Monte Carlo
SHELL_BUDGET = 4096


@dataclass(frozen=True)
class MCEstimate:
    """Sample mean with its standard error."""

    mean: float
    stderr: float
    samples: int

    def to_dict(self) -> dict:
        return {"mean": self.mean, "stderr": self.stderr, "samples": self.samples}


def _estimate(x: np.ndarray) -> MCEstimate:
    x = np.asarray(x, dtype=float)
    n = len(x)
    se = float(x.std(ddof=1) / math.sqrt(n)) if n > 1 else float("inf")
    return MCEstimate(float(x.mean()), se, n)


# ---------------------------------------------------------------------------
# pointwise evaluation
# ---------------------------------------------------------------------------


def _vertex_bits(n: int, d: int) -> np.ndarray:
    """All ``2**(n*d)`` corner offsets of an element, shape ``(V, n, d)``."""
    combos = np.array(list(itertools.product((0, 1), repeat=n * d)), dtype=np.int64)
    return combos.reshape(-1, n, d)


_BITS: dict = {}


def _bits(n: int, d: int) -> np.ndarray:
    if (n, d) not in _BITS:
        _BITS[(n, d)] = _vertex_bits(n, d)
    return _BITS[(n, d)]


def _interp(grid: SectorGrid, row: np.ndarray, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Multilinear interpolant of one sector row and its particle gradients.

    ``pts`` has shape ``(S, N, d)`` with ``N == grid.n``.  Returns values of
    shape ``(S,)`` and gradients of shape ``(S, N, d)``.
    """
    pts = np.asarray(pts, dtype=float)
    S, N, d = pts.shape
    if N == 0:
        return np.full(S, float(row[0])), np.zeros((S, 0, d))
    G = grid.nodes_per_axis
    h = grid.h
    u = (pts - grid.sites[0]) / h
    c = np.clip(np.floor(u), 0, G - 2).astype(np.int64)
    xi = u - c
    bits = _bits(N, d)
    strides = G ** np.arange(d - 1, -1, -1)
    site = ((c[:, None] + bits[None]) * strides).sum(axis=-1)  # (S, V, N)
    fv = row[grid.orbit_map(site)]  # (S, V)
    fac = np.where(bits[None] == 1, xi[:, None], 1.0 - xi[:, None]).reshape(S, len(bits), N * d)
    value = (fac.prod(axis=2) * fv).sum(axis=1)
    # leave-one-out products of the factors, for the partial derivatives
    K = N * d
    pre = np.ones((S, len(bits), K + 1))
    post = np.ones((S, len(bits), K + 1))
    for k in range(K):
        pre[:, :, k + 1] = pre[:, :, k] * fac[:, :, k]
        post[:, :, K - k - 1] = post[:, :, K - k] * fac[:, :, K - k - 1]
    loo = pre[:, :, :K] * post[:, :, 1:]
    sign = np.where(bits == 1, 1.0, -1.0).reshape(len(bits), K) / h
    grads = np.einsum("sv,vk,svk->sk", fv, sign, loo).reshape(S, N, d)
    return value, grads


def evaluate_field(field: SectorField, pts: np.ndarray, state: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Values and particle gradients of ``field`` at configurations ``pts``.

    Parameters
    ----------
    field
        The sector field.
    pts
        Array of shape ``(S, N, d)``: ``S`` configurations of ``N`` particles,
        all inside the field's cube.
    state
        Exterior state row (ignored for single-state fields).
    """
    pts = np.asarray(pts, dtype=float)
    N = pts.shape[1]
    if N > field.n_max:
        raise ValueError(f"field is truncated at {field.n_max} particles, got {N}")
    vals = field.values[N]
    row = vals[0] if vals.shape[0] == 1 else vals[state]
    return _interp(field.grids[N], row, pts)


# ---------------------------------------------------------------------------
# exact sector expectations
# ---------------------------------------------------------------------------


_ASM: "weakref.WeakKeyDictionary[SectorGrid, SectorAssembly]" = weakref.WeakKeyDictionary()


def _assembly(grid: SectorGrid) -> SectorAssembly:
    if grid not in _ASM:
        _ASM[grid] = SectorAssembly(grid)
    return _ASM[grid]


def _identity_stiff(asm: SectorAssembly):
    if not hasattr(asm, "_id_stiffness"):
        n, d = asm.n, asm.d
        eye = np.broadcast_to(np.eye(d), (len(asm.elements), n, d, d))
        asm._id_stiffness = asm.stiffness(np.ascontiguousarray(eye))
    return asm._id_stiffness


def _weights(field: SectorField, rho: float) -> np.ndarray:
    box = field.grids[0].cube
    return sector_weights(rho, box.volume, field.n_max, allow_low_mass=True, floor=0.0).as_array()


def _rows(field: SectorField, n: int) -> Iterator[tuple[float, np.ndarray]]:
    for prob, row in zip(field.state_probs[n], field.values[n]):
        yield float(prob), row


def _second_moment(field: SectorField, rho: float, center: str = "none") -> float:
    """``E[(f - c)^2]`` with ``c`` the global mean, the per-sector mean, or 0."""
    pi = _weights(field, rho)
    mean_total = 0.0
    if center == "global":
        for n in range(field.n_max + 1):
            a = _assembly(field.grids[n])
            mean_total += pi[n] * sum(p * float(a.mean_weights @ r) for p, r in _rows(field, n))
    out = 0.0
    for n in range(field.n_max + 1):
        a = _assembly(field.grids[n])
        for p, r in _rows(field, n):
            if center == "sector":
                c = float(a.mean_weights @ r)
            elif center == "global":
                c = mean_total
            else:
                c = 0.0
            v = r - c
            out += pi[n] * p * float(v @ (a.mass @ v))
    return out


def _gradient_energy(field: SectorField, rho: float) -> float:
    """``E[int |grad f|^2 dmu]``."""
    pi = _weights(field, rho)
    out = 0.0
    for n in range(1, field.n_max + 1):
        S = _identity_stiff(_assembly(field.grids[n]))
        for p, r in _rows(field, n):
            out += pi[n] * p * float(r @ (S @ r))
    return out


# ---------------------------------------------------------------------------
# conditional sub-cube averages of the gradient
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class AveragedGradient:
    """Values of ``S_{n,k} grad f`` for every sector and sub-cube count vector.

    Attributes
    ----------
    n, k
        Cube level and sub-cube level.
    subcubes
        The ``3**((n-k)d)`` sub-cubes of side ``3**k``.
    counts
        Per sector ``N``: array ``(C_N, n_sub)`` of count vectors summing to ``N``.
    values
        Per sector: array ``(states, C_N, n_sub, d)``; zero where the count is 0.
    count_probs
        Per sector: multinomial probability of each count vector given ``N``.
    state_probs
        Per sector: exterior state probabilities of the field.
    method
        ``"exact"`` or ``"mc"``.
    stderr
        Per sector standard errors (Monte Carlo only; NaN for unobserved groups).
    """

    n: int
    k: int
    subcubes: tuple[TriadicCube, ...]
    counts: tuple[np.ndarray, ...]
    values: tuple[np.ndarray, ...]
    count_probs: tuple[np.ndarray, ...]
    state_probs: tuple[np.ndarray, ...]
    method: str = "exact"
    stderr: Optional[tuple[np.ndarray, ...]] = None

    @property
    def n_sub(self) -> int:
        return len(self.subcubes)

    def index(self, cv: np.ndarray) -> np.ndarray:
        """Row index of count vectors ``cv`` (last axis ``n_sub``) in ``counts[N]``."""
        cv = np.asarray(cv, dtype=np.int64)
        return multiset_rank(_counts_to_sorted(cv), self.n_sub)

    def value(self, cv: Sequence[int], state: int = 0) -> np.ndarray:
        cv = np.asarray(cv, dtype=np.int64)
        N = int(cv.sum())
        vals = self.values[N]
        return vals[0 if vals.shape[0] == 1 else state, int(self.index(cv))]


def _counts_to_sorted(cv: np.ndarray) -> np.ndarray:
    """Count vectors ``(..., n_sub)`` to sorted label tuples ``(..., N)``."""
    cv = np.asarray(cv, dtype=np.int64)
    N = int(cv.sum(axis=-1).max()) if cv.size else 0
    flat = cv.reshape(-1, cv.shape[-1])
    out = np.empty((len(flat), N), dtype=np.int64)
    for r, row in enumerate(flat):
        out[r] = np.repeat(np.arange(len(row)), row)
    return out.reshape(cv.shape[:-1] + (N,))


def _all_count_vectors(n_sub: int, N: int) -> np.ndarray:
    """All count vectors of ``N`` particles in ``n_sub`` boxes, in multiset-rank order."""
    if N == 0:
        return np.zeros((1, n_sub), dtype=np.int64)
    labels = np.array(list(itertools.combinations_with_replacement(range(n_sub), N)), dtype=np.int64)
    labels = labels[np.argsort(multiset_rank(labels, n_sub))]
    cv = np.zeros((len(labels), n_sub), dtype=np.int64)
    for j in range(N):
        np.add.at(cv, (np.arange(len(labels)), labels[:, j]), 1)
    return cv


def _multinomial_probs(cv: np.ndarray, n_sub: int) -> np.ndarray:
    N = int(cv[0].sum()) if len(cv) else 0
    logp = math.lgamma(N + 1) - np.sum([[math.lgamma(c + 1) for c in row] for row in cv], axis=1) - N * math.log(n_sub)
    return np.exp(logp)


def _subcube_of(points: np.ndarray, box: TriadicCube, side: float) -> np.ndarray:
    """Flat sub-cube index of points ``(..., d)``; row-major over the axes."""
    per_axis = int(round(box.side / side))
    rel = np.floor((np.asarray(points) - box.lower) / side).astype(np.int64)
    rel = np.clip(rel, 0, per_axis - 1)
    strides = per_axis ** np.arange(box.d - 1, -1, -1)
    return (rel * strides).sum(axis=-1)


def _check_levels(box: TriadicCube, n: int, k: int) -> None:
    if not 0 <= k <= n:
        raise ValueError(f"need 0 <= k <= n, got n={n}, k={k}")
    if abs(box.side - 3.0**n) > 1e-9:
        raise ValueError(f"field lives on a cube of side {box.side}, not 3^{n}")


def snk_gradient_average(
    field: SectorField,
    n: int,
    k: int,
    method: str = "auto",
    n_samples: int = 10_000,
    seed: int = 0,
    rho: float = 1.0,
    budget: int = 2_000_000,
) -> AveragedGradient:
    """Compute ``S_{n,k} grad f`` on the cube of level ``n``.

    In exact mode every element of every sector is integrated: the elements
    whose cells realize a given count vector are summed, particle gradients
    are grouped by sub-cube, and the sum is divided by the number of
    particles in the sub-cube and by the measure of the count-vector event.
    This is exact for the piecewise multilinear fields of the sector grids.

    In Monte Carlo mode configurations are drawn from the truncated law and
    the sub-cube mean gradient is averaged within each (sector, count
    vector, state) group.

    ``method="auto"`` uses the exact route unless the element count exceeds
    ``budget``.
    """
    box = field.grids[0].cube
    _check_levels(box, n, k)
    side = 3.0**k
    subs = tuple(box.subcubes(side))
    n_sub = len(subs)
    d = box.d
    h = field.grids[0].h
    if side / h < 1 - 1e-9 or abs(side / h - round(side / h)) > 1e-9:
        raise ValueError(f"grid spacing {h} does not resolve sub-cubes of side {side}")
    n_elems = sum(len(_assembly(g).elements) for g in field.grids) if method != "mc" else 0
    if method == "auto":
        method = "exact" if n_elems <= budget else "mc"
        if method == "mc":
            logger.info("S_{n,k}: %d elements exceed the budget %d, using Monte Carlo", n_elems, budget)
    counts, values, probs, errs = [], [], [], []
    if method == "exact":
        for N in range(field.n_max + 1):
            cvs = _all_count_vectors(n_sub, N)
            counts.append(cvs)
            probs.append(_multinomial_probs(cvs, n_sub))
            n_states = field.values[N].shape[0]
            out = np.zeros((n_states, len(cvs), n_sub, d))
            if N == 0:
                values.append(out)
                continue
            a = _assembly(field.grids[N])
            cell_sub = _subcube_of(a.cell_mid, box, side)
            esub = cell_sub[a.elements]  # (E, N)
            rank = multiset_rank(np.sort(esub, axis=1), n_sub)
            raw = h ** (N * d - 1)  # integral of a reference derivative over one element
            perms = np.exp(
                math.lgamma(N + 1) - np.sum([[math.lgamma(c + 1) for c in row] for row in cvs], axis=1)
            )
            for s, row in enumerate(field.values[N]):
                fe = row[a.vertex]  # (E, V)
                gp = np.einsum("ev,iav->eia", fe, a.G_ref) * (a.weight * raw)[:, None, None]
                acc = np.zeros((len(cvs), n_sub, d))
                np.add.at(acc, (np.repeat(rank, N), esub.ravel()), gp.reshape(-1, d))
                denom = cvs[:, :, None] * (perms * side ** (d * N))[:, None, None]
                out[s] = np.divide(acc, denom, out=np.zeros_like(acc), where=denom > 0)
            values.append(out)
        return AveragedGradient(n, k, subs, tuple(counts), tuple(values), tuple(probs), field.state_probs, "exact")
    if method != "mc":
        raise ValueError(f"unknown method {method!r}")
    rng = rng_stream(seed, "snk", n, k)
    pi = _weights(field, rho)
    sums = [None] * (field.n_max + 1)
    sq = [None] * (field.n_max + 1)
    cnt = [None] * (field.n_max + 1)
    Ns = rng.choice(len(pi), size=n_samples, p=pi)
    for N in range(field.n_max + 1):
        cvs = _all_count_vectors(n_sub, N)
        counts.append(cvs)
        probs.append(_multinomial_probs(cvs, n_sub))
        n_states = field.values[N].shape[0]
        sums[N] = np.zeros((n_states, len(cvs), n_sub, d))
        sq[N] = np.zeros((n_states, len(cvs), n_sub, d))
        cnt[N] = np.zeros((n_states, len(cvs)))
        M = int((Ns == N).sum())
        if M == 0 or N == 0:
            continue
        pts = box.lower + box.side * rng.random((M, N, d))
        st = rng.choice(n_states, size=M, p=field.state_probs[N]) if n_states > 1 else np.zeros(M, dtype=np.int64)
        sub = _subcube_of(pts, box, side)  # (M, N)
        cv = np.zeros((M, n_sub), dtype=np.int64)
        for j in range(N):
            np.add.at(cv, (np.arange(M), sub[:, j]), 1)
        rank = multiset_rank(np.sort(sub, axis=1), n_sub)
        for s in range(n_states):
            sel = st == s
            if not sel.any():
                continue
            _, gr = evaluate_field(field, pts[sel], s)
            per = np.zeros((int(sel.sum()), n_sub, d))
            np.add.at(per, (np.repeat(np.arange(int(sel.sum())), N), sub[sel].ravel()), gr.reshape(-1, d))
            c = cv[sel]
            mean = np.divide(per, c[:, :, None], out=np.zeros_like(per), where=c[:, :, None] > 0)
            np.add.at(sums[N][s], rank[sel], mean)
            np.add.at(sq[N][s], rank[sel], mean**2)
            np.add.at(cnt[N][s], rank[sel], 1.0)
    for N in range(field.n_max + 1):
        c = cnt[N][:, :, None, None]
        with np.errstate(invalid="ignore", divide="ignore"):
            mean = np.where(c > 0, sums[N] / np.maximum(c, 1), np.nan)
            var = np.where(c > 1, (sq[N] - c * mean**2) / np.maximum(c - 1, 1), np.nan)
            se = np.sqrt(np.maximum(var, 0) / np.maximum(c, 1))
        if N == 0:
            mean = np.zeros_like(sums[N])
            se = np.zeros_like(sums[N])
        values.append(mean)
        errs.append(se)
    return AveragedGradient(
        n, k, subs, tuple(counts), tuple(values), tuple(probs), field.state_probs, "mc", tuple(errs)
    )


def snk_energy(avg: AveragedGradient, rho: float = 1.0) -> float:
    """``E[int |S_{n,k} grad f|^2 dmu] = E[sum_z N_z |S(z)|^2]``."""
    box_volume = 3.0 ** (avg.n * avg.subcubes[0].d)
    pi = sector_weights(rho, box_volume, len(avg.values) - 1, allow_low_mass=True, floor=0.0).as_array()
    out = 0.0
    for N in range(1, len(avg.values)):
        vals = np.nan_to_num(avg.values[N])
        per_cv = (avg.counts[N][None, :, :] * (vals**2).sum(axis=-1)).sum(axis=-1)  # (states, C)
        sp = avg.state_probs[N] if vals.shape[0] > 1 else np.ones(1)
        out += pi[N] * float(sp @ (per_cv @ avg.count_probs[N]))
    return out


def _sample_configs(box: TriadicCube, pi: np.ndarray, M: int, rng: np.random.Generator) -> list[np.ndarray]:
    Ns = rng.choice(len(pi), size=M, p=pi)
    return [box.lower + box.side * rng.random((int(N), box.d)) for N in Ns]


def snk_contraction_mc(
    field: SectorField, n: int, k: int, n_samples: int = 10_000, seed: int = 0, rho: float = 1.0
) -> dict:
    """Monte Carlo check of ``E int |S_{n,k} grad f|^2 <= E int |grad f|^2``.

    Both sides are evaluated on the same samples (the averaged gradient from
    the exact table), so the margin has a paired standard error.
    """
    box = field.grids[0].cube
    avg = snk_gradient_average(field, n, k, method="exact")
    rng = rng_stream(seed, "snk-contraction", n, k)
    pi = _weights(field, rho)
    side = 3.0**k
    margin = np.zeros(n_samples)
    full = np.zeros(n_samples)
    for i, pts in enumerate(_sample_configs(box, pi, n_samples, rng)):
        N = len(pts)
        if N == 0:
            continue
        ns = field.values[N].shape[0]
        s = int(rng.choice(ns, p=field.state_probs[N])) if ns > 1 else 0
        _, gr = evaluate_field(field, pts[None], s)
        sub = _subcube_of(pts, box, side)
        cv = np.bincount(sub, minlength=avg.n_sub)
        S = avg.value(cv, s)
        full[i] = float((gr**2).sum())
        margin[i] = full[i] - float((cv * (S**2).sum(axis=-1)).sum())
    est = _estimate(margin)
    return {
        "margin": est.mean,
        "stderr": est.stderr,
        "gradient_energy": float(full.mean()),
        "holds": est.mean >= -3 * est.stderr,
        "exact_margin": float(_gradient_energy(field, rho) - snk_energy(avg, rho)),
    }


@dataclass(frozen=True)
class MartingaleReport:
    """Residual of the tower identity between two levels of ``S``."""

    residual: float
    stderr: float
    samples: int
    groups: int
    dropped_mass: float

    @property
    def holds(self) -> bool:
        return self.residual <= 3 * self.stderr + 1e-12

    def to_dict(self) -> dict:
        return {
            "residual": self.residual,
            "stderr": self.stderr,
            "samples": self.samples,
            "groups": self.groups,
            "dropped_mass": self.dropped_mass,
            "holds": self.holds,
        }


def _inner_average(
    field: SectorField, state: int, pts: np.ndarray, box: TriadicCube, n: int, k: int, inner: int, rng
) -> np.ndarray:
    """Per-particle values of ``S^y_{n,k} grad f`` for a level-``n`` block partition.

    Each particle gets the conditional average over its level-``k`` sub-cube
    of its level-``n`` block; the conditional expectation resamples the
    positions of the block's particles uniformly within their sub-cubes,
    keeping everything else fixed, with ``inner`` fresh draws.
    """
    N, d = pts.shape
    side_k = 3.0**k
    side_n = 3.0**n
    block = _subcube_of(pts, box, side_n)
    fine = _subcube_of(pts, box, side_k)
    fine_lower = box.lower + side_k * _unflatten(fine, int(round(box.side / side_k)), d)
    out = np.zeros((N, d))
    for b in np.unique(block):
        members = np.nonzero(block == b)[0]
        draws = np.repeat(pts[None], inner, axis=0)
        draws[:, members] = fine_lower[members][None] + side_k * rng.random((inner, len(members), d))
        _, gr = evaluate_field(field, draws, state)
        gm = gr.mean(axis=0)  # (N, d), average over draws
        for z in np.unique(fine[members]):
            sel = members[fine[members] == z]
            out[sel] = gm[sel].mean(axis=0)
    return out


def _unflatten(idx: np.ndarray, per_axis: int, d: int) -> np.ndarray:
    out = np.empty(idx.shape + (d,), dtype=np.int64)
    rem = np.asarray(idx).copy()
    for a in range(d - 1, -1, -1):
        out[..., a] = rem % per_axis
        rem //= per_axis
    return out


def martingale_residual(
    field: SectorField,
    inner: tuple[int, int],
    outer: tuple[int, int],
    n_samples: int = 10_000,
    seed: int = 0,
    rho: float = 1.0,
    inner_draws: int = 16,
) -> MartingaleReport:
    """Monte Carlo residual of ``S_{n',k'} = E[avg_{box_{k'}} S_{n,k} | G_{n',k'}]``.

    ``inner = (n, k)`` and ``outer = (n', k')``; the field lives on the cube
    of level ``n'``.  Samples are grouped by (sector, level-``k'`` count
    vector, exterior state, sub-cube); within each group the mean of the
    inner quantity is compared with the exact outer table.  The residual is
    ``sqrt(sum_g P_g |m_g - e_g|^2)`` and its standard error is
    ``sqrt(sum_g P_g var_g / n_g)``; groups seen once carry no variance
    estimate and are dropped (their sample mass is reported).
    """
    n, k = inner
    n2, k2 = outer
    if not (n <= n2 and k <= k2 and k <= n and k2 <= n2):
        raise ValueError(f"levels {inner} and {outer} are not nested")
    box = field.grids[0].cube
    _check_levels(box, n2, k2)
    outer_tab = snk_gradient_average(field, n2, k2, method="exact")
    inner_tab = snk_gradient_average(field, n, k, method="exact") if n == n2 else None
    rng = rng_stream(seed, "martingale", n, k, n2, k2)
    pi = _weights(field, rho)
    side_k, side_k2 = 3.0**k, 3.0**k2
    n_sub2 = outer_tab.n_sub
    d = box.d
    groups: dict[tuple, list] = {}
    for pts in _sample_configs(box, pi, n_samples, rng):
        N = len(pts)
        if N == 0:
            continue
        ns = field.values[N].shape[0]
        s = int(rng.choice(ns, p=field.state_probs[N])) if ns > 1 else 0
        if inner_tab is not None:
            fine = _subcube_of(pts, box, side_k)
            cv = np.bincount(fine, minlength=inner_tab.n_sub)
            per_particle = inner_tab.value(cv, s)[fine]
        else:
            per_particle = _inner_average(field, s, pts, box, n, k, inner_draws, rng)
        coarse = _subcube_of(pts, box, side_k2)
        cv2 = np.bincount(coarse, minlength=n_sub2)
        key_cv = tuple(cv2.tolist())
        for z in np.nonzero(cv2)[0]:
            x = per_particle[coarse == z].mean(axis=0)
            groups.setdefault((N, key_cv, s, int(z)), []).append(x)
    total = sum(len(v) for v in groups.values())
    res2 = 0.0
    var = 0.0
    dropped = 0
    used = 0
    for (N, key_cv, s, z), xs in groups.items():
        xs = np.asarray(xs)
        if len(xs) < 2:
            dropped += len(xs)
            continue
        used += 1
        P = len(xs) / total
        e = outer_tab.value(np.asarray(key_cv), s)[z]
        m = xs.mean(axis=0)
        res2 += P * float(((m - e) ** 2).sum())
        var += P * float(xs.var(axis=0, ddof=1).sum()) / len(xs)
    return MartingaleReport(math.sqrt(res2), math.sqrt(var), n_samples, used, dropped / max(total, 1))


# ---------------------------------------------------------------------------
# Poincare inequalities
# ---------------------------------------------------------------------------


def _drop_boundary(grid_hi: SectorGrid) -> tuple[np.ndarray, np.ndarray]:
    """Rows of sector ``n`` touching the boundary and the sector ``n-1`` node they tie to."""
    reps = grid_hi.reps
    onb = grid_hi.site_on_boundary[reps]
    rows = np.nonzero(onb.any(axis=1))[0]
    first = onb[rows].argmax(axis=1)
    keep = np.ones((len(rows), reps.shape[1]), dtype=bool)
    keep[np.arange(len(rows)), first] = False
    lower = reps[rows][keep].reshape(len(rows), reps.shape[1] - 1)
    return rows, multiset_rank(lower, grid_hi.n_sites)


def h10_trace_defect(field: SectorField) -> float:
    """Largest ``|f_{n+1}(x, xbar) - f_n(x)|`` over boundary sites ``xbar``."""
    if field.collar:
        return float("inf")
    worst = 0.0
    for n in range(1, field.n_max + 1):
        rows, tie = _drop_boundary(field.grids[n])
        if len(rows):
            worst = max(worst, float(np.abs(field.values[n][0, rows] - field.values[n - 1][0, tie]).max()))
    return worst


def poincare_ratio(field: SectorField, box: Optional[TriadicCube] = None, cls: str = "h1", rho: float = 1.0) -> float:
    """``variance / (diam(U)^2 * E int |grad f|^2 dmu)`` for the field on ``U``.

    ``cls="h10"`` centers by ``E[f]`` and requires the boundary trace ties;
    ``cls="h1"`` centers by the per-sector (and per exterior state) mean,
    i.e. by ``E[f | G_U]``.  A constant field gives 0.  A field with zero
    gradient and nonzero variance raises :class:`InvariantError`.
    """
    U = field.grids[0].cube
    if box is not None and (abs(box.side - U.side) > 1e-12 or tuple(box.center) != tuple(U.center)):
        raise ValueError("the field does not live on the requested cube")
    if cls == "h10":
        scale = max(1.0, max(float(np.abs(v).max()) for v in field.values))
        defect = h10_trace_defect(field)
        if defect > 1e-9 * scale:
            raise InadmissibleFieldError(f"field violates the H^1_0 trace ties by {defect:.3e}")
        var = _second_moment(field, rho, "global")
    elif cls == "h1":
        var = _second_moment(field, rho, "sector")
    else:
        raise ValueError(f"unknown class {cls!r}")
    grad = _gradient_energy(field, rho)
    diam2 = U.d * U.side**2
    scale = max(1.0, _second_moment(field, rho, "none"))
    if grad <= 1e-14 * scale:
        if var <= 1e-14 * scale:
            return 0.0
        raise InvariantError(f"zero gradient with variance {var:.3e}: the field is not in the {cls} class")
    return var / (diam2 * grad)


def random_corpus(
    box: TriadicCube,
    h: float,
    n_max: int,
    cls: str = "h1",
    count: int = 50,
    seed: int = 0,
    rho: float = 1.0,
) -> list[SectorField]:
    """Seeded random fields of the given class on ``box``.

    Node values are standard normal.  For ``h10`` the boundary nodes of each
    sector copy the tied node of the sector below, and the global mean is
    removed; for ``h1`` each sector is centered.
    """
    grids = tuple(build_sector_grid(box, n, h) for n in range(n_max + 1))
    out = []
    for i in range(count):
        rng = rng_stream(seed, "corpus", cls, i)
        vals = [rng.standard_normal(g.size) for g in grids]
        if cls == "h10":
            for n in range(1, n_max + 1):
                rows, tie = _drop_boundary(grids[n])
                vals[n][rows] = vals[n - 1][tie]
            fld = SectorField(grids, tuple(vals), "dirichlet", (0.0,) * box.d)
            pi = _weights(fld, rho)
            mean = sum(pi[n] * float(_assembly(grids[n]).mean_weights @ vals[n]) for n in range(n_max + 1))
            fld = SectorField(grids, tuple(v - mean for v in vals), "dirichlet", (0.0,) * box.d)
        elif cls == "h1":
            vals = [v - float(_assembly(g).mean_weights @ v) for g, v in zip(grids, vals)]
            fld = SectorField(grids, tuple(vals), "neumann")
        else:
            raise ValueError(f"unknown class {cls!r}")
        out.append(fld)
    return out


@dataclass(frozen=True)
class MultiscaleReport:
    """Both sides of the multiscale Poincare inequality (constant set to 1)."""

    lhs: float
    rhs: float
    gradient_term: float
    scale_terms: tuple[float, ...]
    plain_rhs: float

    @property
    def ratio(self) -> float:
        return self.lhs / self.rhs if self.rhs > 0 else 0.0

    def to_dict(self) -> dict:
        return {
            "lhs": self.lhs,
            "rhs": self.rhs,
            "gradient_term": self.gradient_term,
            "scale_terms": list(self.scale_terms),
            "plain_rhs": self.plain_rhs,
            "ratio": self.ratio,
        }


def _sector_centered(field: SectorField) -> SectorField:
    vals = []
    for n, g, v, _ in field.iter_sectors():
        a = _assembly(g)
        vals.append(v - (v @ a.mean_weights)[:, None])
    return SectorField(field.grids, tuple(vals), field.kind, field.slope, field.state_probs)


def multiscale_poincare_check(field: SectorField, n: int, rho: float = 1.0, gauge: bool = True) -> MultiscaleReport:
    """``||u||`` against ``||grad u|| + sum_k 3^k ||S_{n,k} grad u||``.

    With ``gauge=True`` the field is first projected onto ``E[u | G_n] = 0``
    (per-sector, per-state centering); otherwise a field that is not
    centered is rejected.
    """
    box = field.grids[0].cube
    _check_levels(box, n, 0)
    if gauge:
        field = _sector_centered(field)
    else:
        off = max(
            float(np.abs(v @ _assembly(g).mean_weights).max()) for _, g, v, _ in field.iter_sectors()
        )
        if off > 1e-9 * max(1.0, max(float(np.abs(v).max()) for v in field.values)):
            raise InadmissibleFieldError(f"field is not centered given G_n (offset {off:.3e})")
    lhs = math.sqrt(max(_second_moment(field, rho, "none"), 0.0))
    grad = math.sqrt(max(_gradient_energy(field, rho), 0.0))
    terms = []
    for k in range(n + 1):
        avg = snk_gradient_average(field, n, k, method="exact")
        terms.append(3.0**k * math.sqrt(max(snk_energy(avg, rho), 0.0)))
    diam = math.sqrt(box.d) * box.side
    return MultiscaleReport(lhs, grad + sum(terms), grad, tuple(terms), diam * grad)


# ---------------------------------------------------------------------------
# localization operators
# ---------------------------------------------------------------------------


def _tau(points: np.ndarray, center: np.ndarray) -> np.ndarray:
    """Smallest ``r`` with the point in the closed cube ``center + [-r/2, r/2]^d``."""
    return 2.0 * np.abs(np.asarray(points) - center).max(axis=-1)


def _grad_tau(points: np.ndarray, center: np.ndarray) -> np.ndarray:
    rel = np.asarray(points) - center
    a = np.abs(rel).argmax(axis=-1)
    out = np.zeros_like(rel)
    out[np.arange(len(rel)), a] = 2.0 * np.sign(rel[np.arange(len(rel)), a])
    return out


class LocalizedField:
    """``A_t f``, ``A_{s,eps} f`` and ``Atilde_{s,eps} f`` for a field on ``Q_{s+eps}``.

    ``A_t f`` keeps the particles in the closed cube ``Q_t`` and averages the
    others over the truncated Poisson law on the shell ``U \\ Q_t``: the
    number ``j`` of shell particles has weights proportional to
    ``(rho |shell|)^j / j!`` for ``j <= n_max - m``, and given ``j`` they are
    uniform in the shell.  In one dimension the shell average is a tensor
    midpoint rule on the shell pieces cut at grid lines, which is exact for
    the multilinear interpolant; when the rule has more than ``budget``
    points (or ``d > 1``) the shell average is sampled instead.

    The ``t`` integrals use Gauss-Legendre nodes on the pieces between the
    breakpoints (particles entering ``Q_t`` and shell faces crossing grid
    lines).
    """

    def __init__(
        self,
        field: SectorField,
        s: float,
        eps: float,
        rho: float = 1.0,
        budget: int = SHELL_BUDGET,
        mc_inner: int = 256,
        gl_nodes: int = GL_NODES,
    ):
        if field.collar:
            raise InadmissibleFieldError("localization needs a field of the interior configuration only")
        U = field.grids[0].cube
        if s < 0 or eps <= 0:
            raise ValueError("need s >= 0 and eps > 0")
        if abs(U.side - (s + eps)) > 1e-9:
            raise ValueError(f"field lives on a cube of side {U.side}, expected s + eps = {s + eps}")
        self.field = field
        self.U = U
        self.s = float(s)
        self.eps = float(eps)
        self.rho = float(rho)
        self.budget = int(budget)
        self.mc_inner = int(mc_inner)
        self.center = np.asarray(U.center, dtype=float)
        self.n_max = field.n_max
        self.used_mc = False
        gl_x, gl_w = np.polynomial.legendre.leggauss(gl_nodes)
        self._gl = (0.5 * (gl_x + 1.0), 0.5 * gl_w)
        ax = field.grids[0].axis
        self._grid_radii = np.unique(np.abs(ax)) if U.d == 1 else np.unique(np.abs(ax))

    # -- shell rule ------------------------------------------------------------

    def shell_measure(self, t: float) -> float:
        return self.U.volume - max(t, 0.0) ** self.U.d

    def _shell_rule(self, t: float, rng: Optional[np.random.Generator]) -> tuple[np.ndarray, np.ndarray, bool]:
        """Points and weights (summing to 1) of the one-particle shell average."""
        L = self.U.side
        c = self.center
        if self.U.d == 1:
            cuts = self.field.grids[0].axis
            lo_in, hi_in = -t / 2, t / 2
            pieces = []
            for a, b in ((-L / 2, lo_in), (hi_in, L / 2)):
                if b - a <= 1e-14:
                    continue
                inner = cuts[(cuts > a + 1e-14) & (cuts < b - 1e-14)]
                edges = np.concatenate([[a], inner, [b]])
                pieces.append(np.stack([0.5 * (edges[:-1] + edges[1:]), np.diff(edges)], axis=1))
            if not pieces:
                return np.zeros((0, 1)), np.zeros(0), False
            pw = np.concatenate(pieces)
            return (pw[:, :1] + c), pw[:, 1] / pw[:, 1].sum(), False
        if rng is None:
            raise ValueError("a random generator is needed for the shell average in d > 1")
        K = self.mc_inner
        out = []
        while sum(len(o) for o in out) < K:
            pts = self.U.lower + L * rng.random((4 * K, self.U.d))
            out.append(pts[_tau(pts, c) > t])
        pts = np.concatenate(out)[:K]
        return pts, np.full(K, 1.0 / K), True

    def _shell_weights(self, t: float, m: int) -> np.ndarray:
        top = self.n_max - m
        if top < 0:
            return np.zeros(0)
        lam = self.rho * self.shell_measure(t)
        j = np.arange(top + 1)
        if lam <= 0:
            w = (j == 0).astype(float)
        else:
            logw = j * math.log(lam) - np.array([math.lgamma(x + 1) for x in j])
            w = np.exp(logw - logw.max())
        return w / w.sum()

    def A(
        self, inside: np.ndarray, t: float, rng: Optional[np.random.Generator] = None, grad: bool = False
    ) -> tuple[float, np.ndarray]:
        """``A_t f`` at the configuration ``inside`` (points of the closed ``Q_t``).

        Returns the value and, with ``grad=True``, ``A_t(grad_x f)`` for each
        inside particle (shape ``(m, d)``).
        """
        v, g = self._A_batch(inside, np.array([float(t)]), rng, grad)
        return float(v[0]), g[0]

    def _A_batch(
        self, inside: np.ndarray, ts: np.ndarray, rng: Optional[np.random.Generator], grad: bool
    ) -> tuple[np.ndarray, np.ndarray]:
        """``A_t f`` for several ``t`` sharing the same inside configuration.

        The one-particle shell rules of the different ``t`` must have the same
        number of points, which holds when no ``t / 2`` lies on the other side
        of a grid line; callers group ``t`` by pieces to ensure it.
        """
        inside = np.asarray(inside, dtype=float).reshape(-1, self.U.d)
        m, d = inside.shape
        T = len(ts)
        if m > self.n_max:
            raise ValueError("more particles than the field's truncation")
        rules = [self._shell_rule(float(t), rng) for t in ts]
        if len({len(r[1]) for r in rules}) > 1:
            parts = [self._A_batch(inside, ts[i : i + 1], rng, grad) for i in range(T)]
            return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])
        pts = np.stack([r[0] for r in rules])  # (T, P, d)
        pw = np.stack([r[1] for r in rules])  # (T, P)
        sampled = rules[0][2]
        wj = np.stack([self._shell_weights(float(t), m) for t in ts])  # (T, J)
        values = np.zeros(T)
        g = np.zeros((T, m, d))
        P = pw.shape[1]
        for j in range(wj.shape[1]):
            w = wj[:, j]
            if not w.any():
                continue
            if j == 0:
                v, gr = evaluate_field(self.field, inside[None])
                values += w * float(v[0])
                g += w[:, None, None] * gr[0][None]
                continue
            if P == 0:
                continue
            if not sampled and P**j <= self.budget:
                combos = np.array(list(itertools.product(range(P), repeat=j)), dtype=np.int64)
                cw = np.prod(pw[:, combos], axis=2)  # (T, C)
                cpts = pts[:, combos]  # (T, C, j, d)
            else:
                if rng is None:
                    raise ValueError("shell average exceeds the quadrature budget and needs a generator")
                self.used_mc = True
                C = self.mc_inner
                combos = np.stack([rng.choice(P, size=(C, j), p=pw[i]) for i in range(T)])
                cw = np.full((T, C), 1.0 / C)
                cpts = np.stack([pts[i][combos[i]] for i in range(T)])
            C = cw.shape[1]
            cfg = np.concatenate(
                [np.broadcast_to(inside, (T, C, m, d)), cpts], axis=2
            ).reshape(T * C, m + j, d)
            v, gr = evaluate_field(self.field, cfg)
            values += w * (cw * v.reshape(T, C)).sum(axis=1)
            if grad and m:
                g += w[:, None, None] * np.einsum("tc,tcia->tia", cw, gr.reshape(T, C, m + j, d)[:, :, :m])
        return values, g

    # -- t integrals -------------------------------------------------------------

    def _pieces(self, taus: np.ndarray) -> list[tuple[float, float]]:
        s, e = self.s, self.eps
        br = [0.0, e]
        br += [float(x - s) for x in taus if s < x < s + e]
        br += [float(2 * r - s) for r in self._grid_radii if s < 2 * r < s + e]
        br = sorted(set(np.round(br, 14)))
        return [(a, b) for a, b in zip(br[:-1], br[1:]) if b - a > 1e-13]

    def _integrals(self, mu: np.ndarray, rng=None, grad: bool = False):
        """``(A_{s,eps} f, Atilde_{s,eps} f, t-average of A_{s+t} grad f)`` in one pass."""
        mu = np.asarray(mu, dtype=float).reshape(-1, self.U.d)
        taus = _tau(mu, self.center) if len(mu) else np.zeros(0)
        xs, ws = self._gl
        flat = 0.0
        tilde = 0.0
        g = np.zeros_like(mu)
        for a, b in self._pieces(taus):
            ts = a + (b - a) * xs
            wt = (b - a) * ws
            sel = taus <= self.s + 0.5 * (a + b)
            v, gr = self._A_batch(mu[sel], self.s + ts, rng, grad)
            flat += float((wt / self.eps) @ v)
            tilde += float((wt * 2.0 / self.eps**2 * (self.eps - ts)) @ v)
            if grad:
                g[sel] += np.einsum("t,tia->ia", wt / self.eps, gr)
        return flat, tilde, g

    def value(self, mu: np.ndarray, rng=None) -> float:
        """``A_{s,eps} f(mu)``."""
        return self._integrals(mu, rng)[0]

    def tilde(self, mu: np.ndarray, rng=None) -> float:
        """``Atilde_{s,eps} f(mu)``."""
        return self._integrals(mu, rng)[1]

    def jump(self, mu: np.ndarray, i: int, rng=None) -> float:
        """``Delta_{tau(x_i)}(A f)``: value with ``x_i`` kept minus value with it averaged."""
        mu = np.asarray(mu, dtype=float).reshape(-1, self.U.d)
        taus = _tau(mu, self.center)
        t = float(taus[i])
        keep = taus <= t
        without = keep.copy()
        without[i] = False
        return self.A(mu[keep], t, rng)[0] - self.A(mu[without], t, rng)[0]

    def gradient(self, mu: np.ndarray, rng=None) -> np.ndarray:
        """Gradient of ``A_{s,eps} f`` from the three-case formula, shape ``(m, d)``.

        Inside ``Q_s``: the average of ``A_{s+t}`` of the gradient.  In the
        shell: the same average restricted to ``t >= tau(x) - s`` minus the
        jump term ``grad tau(x) Delta_{tau(x)}(A f) / eps``; with
        ``Q_r = (-r/2, r/2)^d`` one has ``tau(x) = 2|x|_inf`` and
        ``grad tau = 2 n(x)``.
        """
        mu = np.asarray(mu, dtype=float).reshape(-1, self.U.d)
        _, _, g = self._integrals(mu, rng, grad=True)
        taus = _tau(mu, self.center)
        gt = _grad_tau(mu, self.center) if len(mu) else np.zeros_like(mu)
        for i in np.nonzero((taus >= self.s) & (taus < self.s + self.eps))[0]:
            g[i] -= gt[i] * self.jump(mu, i, rng) / self.eps
        return g


def _fd_gradient(fun, mu: np.ndarray, eta: float) -> np.ndarray:
    out = np.zeros_like(mu)
    for i in range(len(mu)):
        for a in range(mu.shape[1]):
            up = mu.copy()
            dn = mu.copy()
            up[i, a] += eta
            dn[i, a] -= eta
            out[i, a] = (fun(up) - fun(dn)) / (2 * eta)
    return out


def _near_kink(mu: np.ndarray, loc: LocalizedField, eta: float) -> bool:
    """True when a finite difference would straddle a grid line or ``dQ_s``."""
    ax = loc.field.grids[0].axis
    rel = mu - loc.center
    near_grid = (np.abs(rel[..., None] - ax) < 4 * eta).any()
    near_face = (np.abs(_tau(mu, loc.center) - loc.s) < 8 * eta).any() if len(mu) else False
    return bool(near_grid or near_face)


@dataclass(frozen=True)
class LocalizationReport:
    """Checks of the localization operators on one field.

    ``interior_residual``, ``shell_residual`` and ``exterior_residual`` are the
    largest differences between the gradient formula and centered finite
    differences of ``A_{s,eps} f``, for particles in ``Q_s``, in the shell and
    outside ``Q_{s+eps}`` (the last is a particle added outside the cube).
    ``commute_residual`` compares finite differences of ``A_s f`` with
    ``A_s(grad f)`` on ``Q_s``.  The Monte Carlo entries are paired
    estimates with standard errors.
    """

    s: float
    eps: float
    interior_residual: float
    shell_residual: float
    exterior_residual: float
    commute_residual: float
    max_jump: float
    bracket: tuple[MCEstimate, ...]
    bracket_times: tuple[float, ...]
    atilde_identity: MCEstimate
    jensen_margin: MCEstimate
    samples: int
    method: str

    @property
    def bracket_increment(self) -> MCEstimate:
        """``E[(A_{s+eps} f)^2 - (A_s f)^2]``."""
        return self.bracket[-1]

    @property
    def bracket_monotone(self) -> bool:
        return all(b.mean >= -3 * b.stderr - 1e-12 for b in self.bracket)

    def to_dict(self) -> dict:
        return {
            "s": self.s,
            "eps": self.eps,
            "interior_residual": self.interior_residual,
            "shell_residual": self.shell_residual,
            "exterior_residual": self.exterior_residual,
            "commute_residual": self.commute_residual,
            "max_jump": self.max_jump,
            "bracket_times": list(self.bracket_times),
            "bracket": [b.to_dict() for b in self.bracket],
            "bracket_monotone": self.bracket_monotone,
            "atilde_identity": self.atilde_identity.to_dict(),
            "jensen_margin": self.jensen_margin.to_dict(),
            "samples": self.samples,
            "method": self.method,
        }


def _sample_truncated(U: TriadicCube, n_max: int, rho: float, M: int, rng) -> list[np.ndarray]:
    pi = sector_weights(rho, U.volume, n_max, allow_low_mass=True, floor=0.0).as_array()
    return _sample_configs(U, pi, M, rng)


def localize(
    field: SectorField,
    s: float,
    eps: float,
    n_samples: int = 10_000,
    seed: int = 0,
    rho: float = 1.0,
    budget: int = SHELL_BUDGET,
    fd_samples: int = 40,
    eta: float = 1e-5,
    bracket_points: int = 5,
) -> tuple[LocalizedField, LocalizationReport]:
    """Build ``A_{s,eps} f`` and check its properties.

    Parameters
    ----------
    field
        Single-state field on ``Q_{s+eps}``.
    s, eps
        Inner scale and regularization width.
    n_samples
        Monte Carlo sample size for the bracket, the ``Atilde`` identity and
        the Jensen contraction.
    fd_samples
        Number of configurations on which the gradient formula is compared
        with finite differences.
    """
    loc = LocalizedField(field, s, eps, rho, budget)
    U = loc.U
    d = U.d
    rng = rng_stream(seed, "localize", s, eps)
    # --- gradient formula against finite differences -------------------------
    fd_rng = rng_stream(seed, "localize-fd", s, eps)
    res = {"interior": 0.0, "shell": 0.0, "exterior": 0.0, "commute": 0.0}
    max_jump = 0.0
    tried = 0
    seen = 0
    while seen < fd_samples and tried < 50 * fd_samples:
        tried += 1
        mu = _sample_truncated(U, loc.n_max, rho, 1, fd_rng)[0]
        if len(mu) == 0 or _near_kink(mu, loc, eta):
            continue
        seen += 1
        key = int(fd_rng.integers(2**31))

        def fresh():
            return np.random.default_rng(key)

        g = loc.gradient(mu, fresh())
        fd = _fd_gradient(lambda x: loc.value(x, fresh()), mu, eta)
        taus = _tau(mu, loc.center)
        inner = taus < s
        shell = ~inner
        scale = max(1.0, float(np.abs(fd).max()))
        if inner.any():
            res["interior"] = max(res["interior"], float(np.abs(g[inner] - fd[inner]).max()) / scale)
        if shell.any():
            res["shell"] = max(res["shell"], float(np.abs(g[shell] - fd[shell]).max()) / scale)
            for i in np.nonzero(shell)[0]:
                max_jump = max(max_jump, abs(loc.jump(mu, i, fresh())))
        # a particle outside Q_{s+eps} does not enter the localized field
        outside = U.upper + 0.5
        ext = np.vstack([mu, outside[None]])
        val_ext = loc.value(ext[U.contains(ext, closed=True)], fresh())
        res["exterior"] = max(res["exterior"], abs(val_ext - loc.value(mu, fresh())))
        # commutation on Q_s
        if inner.any():
            sel = taus <= s
            _, ag = loc.A(mu[sel], s, fresh(), grad=True)
            idx = np.nonzero(sel)[0]
            fdA = _fd_gradient(lambda x: loc.A(x, s, fresh())[0], mu[sel], eta)
            which = inner[idx]
            res["commute"] = max(res["commute"], float(np.abs(ag[which] - fdA[which]).max()) / scale)
    # --- Monte Carlo identities ----------------------------------------------------
    times = tuple(float(x) for x in np.linspace(s, s + eps, bracket_points))
    sq = np.zeros((n_samples, len(times)))
    at_lhs = np.zeros(n_samples)
    at_rhs = np.zeros(n_samples)
    jen = np.zeros(n_samples)
    for r, mu in enumerate(_sample_truncated(U, loc.n_max, rho, n_samples, rng)):
        taus = _tau(mu, loc.center) if len(mu) else np.zeros(0)
        for c, t in enumerate(times):
            sq[r, c] = loc.A(mu[taus <= t], t, rng)[0] ** 2
        f_val, f_grad = evaluate_field(field, mu[None]) if len(mu) else evaluate_field(field, np.zeros((1, 0, d)))
        a_val, a_tilde, a_grad = loc._integrals(mu, rng, grad=True)
        at_lhs[r] = a_val**2
        at_rhs[r] = float(f_val[0]) * a_tilde
        inside = taus < s
        jen[r] = float((f_grad[0][inside] ** 2).sum() - (a_grad[inside] ** 2).sum())
    bracket = tuple(_estimate(sq[:, c] - sq[:, c - 1]) for c in range(1, len(times)))
    report = LocalizationReport(
        float(s),
        float(eps),
        res["interior"],
        res["shell"],
        res["exterior"],
        res["commute"],
        max_jump,
        bracket,
        times,
        _estimate(at_lhs - at_rhs),
        _estimate(jen),
        n_samples,
        "mc" if loc.used_mc else "exact",
    )
    return loc, report


# ---------------------------------------------------------------------------
# Caccioppoli
# ---------------------------------------------------------------------------


def theta_prime(Lambda: float) -> float:
    """``2 Lambda / (2 Lambda + 1)``."""
    return 2.0 * Lambda / (2.0 * Lambda + 1.0)


def caccioppoli_parameters(d: int, Lambda: float) -> dict:
    """Explicit parameter choice for iterating the weak Caccioppoli inequality.

    Returns ``N``, ``delta``, ``R0``, ``theta_tilde``, ``theta``, ``C`` and the
    leading-order approximations they are compared with.
    """
    N = 2 * math.floor(d * math.log(3) / math.log(1 + 1 / (2 * Lambda))) + 1
    delta = 0.5 * (3 ** (1 / (N + 1)) - 1)
    th_tilde = theta_prime(Lambda) * (1 + 2 * delta) ** d
    theta = th_tilde ** (N + 1)
    C = 3**d / (2 * delta**2) * sum((1 + 2 * delta) ** (-2 * n) for n in range(N + 1))
    return {
        "N": N,
        "delta": delta,
        "R0": 2 / delta,
        "theta_prime": theta_prime(Lambda),
        "theta_tilde": th_tilde,
        "theta": theta,
        "C": C,
        "approx_delta": 1 / (8 * d * Lambda),
        "approx_R0": 16 * d * Lambda,
        "approx_theta_tilde": (1 + 1 / (2 * Lambda)) ** -0.5,
        "approx_theta": 3.0**-d,
        "approx_C": 2**8 * 3**d * d**3 * Lambda**3,
    }


@dataclass(frozen=True)
class CaccioppoliReport:
    """Monte Carlo estimates of both sides of the weak Caccioppoli inequality."""

    lhs: MCEstimate
    rhs: MCEstimate
    margin: MCEstimate
    theta_prime: float
    harmonic_residual: float
    terms: dict = field(default_factory=dict)

    @property
    def holds(self) -> bool:
        return self.margin.mean >= -3 * self.margin.stderr

    def __iter__(self):
        yield self.lhs.mean
        yield self.rhs.mean

    def to_dict(self) -> dict:
        return {
            "lhs": self.lhs.to_dict(),
            "rhs": self.rhs.to_dict(),
            "margin": self.margin.to_dict(),
            "theta_prime": self.theta_prime,
            "harmonic_residual": self.harmonic_residual,
            "terms": dict(self.terms),
            "holds": self.holds,
        }


def _pointwise_levels(model: CoefficientModel, mu: np.ndarray, ext: np.ndarray) -> np.ndarray:
    """``a(mu, x_i) = g(mu(B_1(x_i))) B`` scalar factors for every particle of ``mu``."""
    allp = np.vstack([mu, ext]) if len(ext) else mu
    dist = np.linalg.norm(mu[:, None, :] - allp[None, :, :], axis=-1)
    return model.level((dist < 1.0).sum(axis=1))


def _sample_collar(U: TriadicCube, rho: float, rng) -> np.ndarray:
    big = U.expanded(1.0)
    k = int(rng.poisson(rho * big.volume))
    pts = big.lower + big.side * rng.random((k, U.d))
    return pts[~U.contains(pts, closed=True)]


def weak_caccioppoli_check(
    u: SectorField,
    r: float,
    s: float,
    eps: float,
    ctx: Context,
    n_samples: int = 10_000,
    seed: int = 0,
    harmonic_tol: float = 1e-7,
) -> CaccioppoliReport:
    """Both sides of the weak Caccioppoli inequality for an ``a``-harmonic ``u``.

    ``lhs = theta'/(2 eps^2) E[(A_s u)^2] + E int_{Q_r} grad A_{s,eps}u . a grad A_{s,eps}u``
    and ``rhs = theta' (E[(A_{s+eps} u)^2] / (2 eps^2) + E int_{Q_{s+eps}} grad u . a grad u)``,
    with ``theta' = 2 Lambda / (2 Lambda + 1)``.  The coefficient is the
    pointwise one, with the exterior of the cube sampled in the unit collar.
    Every term is estimated on the same samples, so the margin
    ``rhs - lhs`` has a paired standard error.

    Raises
    ------
    ValueError
        If ``s < r + 2``.
    InadmissibleFieldError
        If ``u`` fails the ``a``-harmonicity residual test on ``Q_{s+eps}``.
    """
    if s < r + 2 - 1e-12:
        raise ValueError(f"need s >= r + 2, got r={r}, s={s}")
    U = u.grids[0].cube
    sysm = cube_system(U, ctx)
    if u.collar:
        raise InadmissibleFieldError("the Caccioppoli harness needs a field of the interior configuration")
    res = _harmonic_residual(sysm, u)
    energy_scale = max(1.0, float(np.abs(np.concatenate([v.ravel() for v in u.values])).max()))
    if res > harmonic_tol * energy_scale:
        raise InadmissibleFieldError(f"u is not a-harmonic on the cube (residual {res:.3e})")
    model = ctx.model
    rho = ctx.disc.rho
    tp = theta_prime(model.Lambda)
    loc = LocalizedField(u, s, eps, rho)
    rng = rng_stream(seed, "caccioppoli", r, s, eps)
    lhs = np.zeros(n_samples)
    rhs = np.zeros(n_samples)
    parts = np.zeros((n_samples, 4))
    B = model.base_matrix
    for i, mu in enumerate(_sample_truncated(U, u.n_max, rho, n_samples, rng)):
        ext = _sample_collar(U, rho, rng)
        taus = _tau(mu, loc.center) if len(mu) else np.zeros(0)
        As = loc.A(mu[taus <= s], s, rng)[0]
        uv, ug = evaluate_field(u, mu[None]) if len(mu) else evaluate_field(u, np.zeros((1, 0, U.d)))
        e_full = 0.0
        e_in = 0.0
        if len(mu):
            lv = _pointwise_levels(model, mu, ext)
            e_full = float(np.einsum("i,ia,ab,ib->", lv, ug[0], B, ug[0]))
            inner = taus < r
            if inner.any():
                _, _, ag = loc._integrals(mu, rng, grad=True)
                e_in = float(np.einsum("i,ia,ab,ib->", lv[inner], ag[inner], B, ag[inner]))
        parts[i] = (As**2, e_in, float(uv[0]) ** 2, e_full)
        lhs[i] = tp / (2 * eps**2) * As**2 + e_in
        rhs[i] = tp * (float(uv[0]) ** 2 / (2 * eps**2) + e_full)
    means = parts.mean(axis=0)
    terms = {
        "E[(A_s u)^2]": float(means[0]),
        "interior_energy": float(means[1]),
        "E[u^2]": float(means[2]),
        "full_energy": float(means[3]),
        "used_mc_shell": loc.used_mc,
    }
    return CaccioppoliReport(_estimate(lhs), _estimate(rhs), _estimate(rhs - lhs), tp, res, terms)
