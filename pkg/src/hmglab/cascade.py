"""Multi-scale driver: the pair (abar, abar_*) along triadic cubes and its diagnostics."""

from __future__ import annotations

import itertools
import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from .configspace import SectorField, TriadicCube, triadic_cube
from .quantities import (
    _combine,
    abar_pair,
    dirichlet_norm_sq,
    j_value,
    sector_offset,
)
from .sectorsolver import Context, cube_system

logger = logging.getLogger(__name__)

__all__ = [
    "CascadeRecord",
    "CascadeError",
    "RateFit",
    "run_cascade",
    "tau_defects",
    "gap_bound",
    "gap_and_rate",
    "two_scale_check",
    "variance_defect",
    "flatness_defect",
    "step4_diagnostic",
    "monotonicity_report",
]

LOG3 = math.log(3.0)


class CascadeError(RuntimeError):
    """A level failed; ``records`` holds the levels completed before it."""

    def __init__(self, message: str, records: list):
        super().__init__(message)
        self.records = records


@dataclass(frozen=True)
class CascadeRecord:
    """Everything computed on one triadic cube.

    ``J`` lists ``J(cube, e_i, abar_* e_i)`` per basis direction; ``V`` and
    ``flatness`` use ``(p, q) = (e_1, abar_* e_1)``.  ``tau`` is filled in once
    the next level is known.
    """

    m: int
    h: float
    abar: tuple[tuple[float, ...], ...]
    abarstar: tuple[tuple[float, ...], ...]
    J: tuple[float, ...]
    gap: float
    V: float
    flatness: float
    optimizer_gap: float
    truncated_mass: float
    low_mass: bool
    tau: Optional[float] = None
    timings: Mapping[str, float] = field(default_factory=dict, compare=False)

    @property
    def abar_matrix(self) -> np.ndarray:
        return np.array(self.abar)

    @property
    def abarstar_matrix(self) -> np.ndarray:
        return np.array(self.abarstar)

    def to_dict(self, include_timings: bool = False) -> dict:
        out = {
            "m": self.m,
            "h": self.h,
            "abar": [list(r) for r in self.abar],
            "abarstar": [list(r) for r in self.abarstar],
            "J": list(self.J),
            "tau": self.tau,
            "gap": self.gap,
            "V": self.V,
            "flatness": self.flatness,
            "optimizer_gap": self.optimizer_gap,
            "truncated_mass": self.truncated_mass,
            "low_mass": self.low_mass,
        }
        if include_timings:
            out["timings"] = dict(self.timings)
        return out

    @classmethod
    def from_dict(cls, data: Mapping) -> "CascadeRecord":
        return cls(
            m=int(data["m"]),
            h=float(data["h"]),
            abar=tuple(tuple(float(x) for x in r) for r in data["abar"]),
            abarstar=tuple(tuple(float(x) for x in r) for r in data["abarstar"]),
            J=tuple(float(x) for x in data["J"]),
            gap=float(data["gap"]),
            V=float(data["V"]),
            flatness=float(data["flatness"]),
            optimizer_gap=float(data["optimizer_gap"]),
            truncated_mass=float(data["truncated_mass"]),
            low_mass=bool(data["low_mass"]),
            tau=None if data.get("tau") is None else float(data["tau"]),
        )


def _as_tuple(M: np.ndarray) -> tuple[tuple[float, ...], ...]:
    return tuple(tuple(float(x) for x in row) for row in np.atleast_2d(M))


# ---------------------------------------------------------------------------
# per-level defects
# ---------------------------------------------------------------------------


def _j_optimizer(box: TriadicCube, p, q, ctx: Context):
    return j_value(box, p, q, ctx)


def variance_defect(m: int, p: Sequence[float], q: Sequence[float], ctx: Context) -> float:
    """``E[(1/norm) int |S_m grad v - (abar_*^{-1} q - p)|^2 dmu]`` on the cube of level ``m``.

    ``S_m grad v`` only depends on the particle count: it is the average over
    positions (and exterior states) of ``(1/N) sum_i grad_i v_N``.
    """
    box = triadic_cube(m, d=ctx.model.d)
    sysm = cube_system(box, ctx)
    _, astar = abar_pair(box, ctx)
    target = np.linalg.solve(astar, np.asarray(q, dtype=float)) - np.asarray(p, dtype=float)
    jr = _j_optimizer(box, p, q, ctx)
    fac = sysm.sector_factor
    total = 0.0
    for n in range(1, sysm.n_max + 1):
        G = sysm.asm[n].grad
        vals, probs = jr.optimizer.values[n], jr.optimizer.state_probs[n]
        avg = sum(pr * (G @ row) for pr, row in zip(probs, vals)) / n
        total += fac[n] * n * float(np.sum((avg - target) ** 2))
    return total


def flatness_defect(m: int, p: Sequence[float], q: Sequence[float], ctx: Context) -> float:
    """``(1/(norm 3^{2m})) E[int |v - l_c - E[v - l_c | G]|^2 dmu]`` with ``c = abar_*^{-1} q - p``.

    The ``L^2(dmu)`` norm of a configuration function weighs the square by the
    particle count.
    """
    box = triadic_cube(m, d=ctx.model.d)
    sysm = cube_system(box, ctx)
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if not p.any() and not q.any():
        return 0.0
    _, astar = abar_pair(box, ctx)
    c = np.linalg.solve(astar, q) - p
    jr = _j_optimizer(box, p, q, ctx)
    fac = sysm.sector_factor
    total = 0.0
    for n in range(1, sysm.n_max + 1):
        a = sysm.asm[n]
        ell = sysm.affine_values(n, c)
        probs = jr.optimizer.state_probs[n]
        rows = jr.optimizer.values[n] - ell[None, :]
        mean = sum(pr * (a.mean_weights @ r) for pr, r in zip(probs, rows))
        for pr, r in zip(probs, rows):
            f = r - mean
            total += fac[n] * n * pr * float(f @ (a.mass @ f))
    return total / 9.0**m


def gap_bound(abar: np.ndarray, astar: np.ndarray) -> tuple[float, float]:
    """``(|abar - abar_*|, C sqrt(sup_{|p|<=1} J(p, abar_* p)))``.

    ``J(p, abar_* p) = 1/2 p.(abar - abar_*)p``, so the supremum is half the top
    eigenvalue of the difference; the constant is ``C = sqrt(2 lambda_max(abar))``.
    """
    diff = np.atleast_2d(abar) - np.atleast_2d(astar)
    gap = float(np.linalg.norm(diff, 2))
    sup_j = max(0.5 * float(np.linalg.eigvalsh(diff).max()), 0.0)
    C = math.sqrt(2.0 * float(np.linalg.eigvalsh(np.atleast_2d(abar)).max()))
    return gap, C * math.sqrt(sup_j)


def run_cascade(
    levels: Sequence[int],
    ctx: Context,
    h_plan: Optional[Mapping[int, float]] = None,
    on_record: Optional[Callable[[CascadeRecord], None]] = None,
) -> list[CascadeRecord]:
    """Compute one :class:`CascadeRecord` per level, then fill in ``tau``.

    ``h_plan`` maps a level to its grid spacing (default: ``ctx.disc.h``).
    ``on_record`` is called after each level so callers can persist partial
    results; a failing level raises :class:`CascadeError` carrying the
    completed records.
    """
    records: list[CascadeRecord] = []
    d = ctx.model.d
    for m in levels:
        h = (h_plan or {}).get(m, ctx.disc.h)
        cctx = ctx.with_h(h)
        box = triadic_cube(m, d=d)
        t0 = time.perf_counter()
        try:
            abar, astar = abar_pair(box, cctx)
            t1 = time.perf_counter()
            eye = np.eye(d)
            Js = tuple(j_value(box, eye[i], astar @ eye[i], cctx).value for i in range(d))
            p, q = eye[0], astar @ eye[0]
            V = variance_defect(m, p, q, cctx)
            flat = flatness_defect(m, p, q, cctx)
            sysm = cube_system(box, cctx)
            og = dirichlet_norm_sq(sysm, j_value(box, p, q, cctx).optimizer)
        except Exception as exc:  # persisted partial results are the contract here
            raise CascadeError(f"level {m} failed: {exc}", records) from exc
        t2 = time.perf_counter()
        gap, _ = gap_bound(abar, astar)
        rec = CascadeRecord(
            m=m,
            h=h,
            abar=_as_tuple(abar),
            abarstar=_as_tuple(astar),
            J=tuple(float(x) for x in Js),
            gap=float(gap),
            V=float(V),
            flatness=float(flat),
            optimizer_gap=float(og),
            truncated_mass=float(sysm.weights.truncated_mass),
            low_mass=bool(sysm.weights.low_mass),
            timings={"abar_pair": t1 - t0, "diagnostics": t2 - t1},
        )
        logger.info("level %d: abar=%s abar*=%s gap=%.3e", m, rec.abar, rec.abarstar, gap)
        records.append(rec)
        if on_record is not None:
            on_record(rec)
    taus = tau_defects(records)
    return [replace(r, tau=t) for r, t in zip(records, taus + [None])]


def tau_defects(records: Sequence[CascadeRecord]) -> list[float]:
    """``tau_m = 1/2 lmax(abar_m - abar_{m+1}) + 1/2 lmax(abar*_m^{-1} - abar*_{m+1}^{-1})``."""
    out = []
    for r0, r1 in zip(records[:-1], records[1:]):
        da = r0.abar_matrix - r1.abar_matrix
        ds = np.linalg.inv(r0.abarstar_matrix) - np.linalg.inv(r1.abarstar_matrix)
        out.append(0.5 * float(np.linalg.eigvalsh(da).max()) + 0.5 * float(np.linalg.eigvalsh(ds).max()))
    return out


def monotonicity_report(records: Sequence[CascadeRecord], band: float) -> dict:
    """Worst violations of ``abar`` non-increasing and ``abar_*`` non-decreasing.

    A violation is the largest eigenvalue of ``abar_{m+1} - abar_m`` (resp. the
    largest eigenvalue of ``abar*_m - abar*_{m+1}``); it passes when at most
    ``band``.
    """
    rows = []
    for r0, r1 in zip(records[:-1], records[1:]):
        up = float(np.linalg.eigvalsh(r1.abar_matrix - r0.abar_matrix).max())
        down = float(np.linalg.eigvalsh(r0.abarstar_matrix - r1.abarstar_matrix).max())
        gap_up = r1.gap - r0.gap
        rows.append(
            {
                "m": r0.m,
                "abar_increase": up,
                "abarstar_decrease": down,
                "gap_increase": gap_up,
                "abar_ok": up <= band,
                "abarstar_ok": down <= band,
                "gap_ok": gap_up <= band,
            }
        )
    return {
        "band": band,
        "pairs": rows,
        "abar_monotone": all(r["abar_ok"] for r in rows),
        "abarstar_monotone": all(r["abarstar_ok"] for r in rows),
        "gap_monotone": all(r["gap_ok"] for r in rows),
    }


# ---------------------------------------------------------------------------
# rate fit
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RateFit:
    """``|abar(cube_m) - ref| ~ C 3^{-alpha m}`` fitted by least squares in log scale."""

    alpha: Optional[float]
    C: Optional[float]
    reference: tuple[tuple[float, ...], ...]
    residual: Optional[float]
    levels_used: tuple[int, ...]
    degenerate: bool
    note: str
    gap_bounds: tuple[float, ...]
    gap_bound_ok: bool

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "C": self.C,
            "reference": [list(r) for r in self.reference],
            "residual": self.residual,
            "levels_used": list(self.levels_used),
            "degenerate": self.degenerate,
            "note": self.note,
            "gap_bounds": list(self.gap_bounds),
            "gap_bound_ok": self.gap_bound_ok,
        }


def gap_and_rate(
    records: Sequence[CascadeRecord],
    reference: str = "midpoint",
    resolution: float = 1e-10,
    slack: float = 1e-6,
) -> RateFit:
    """Fit the convergence rate of ``abar(cube_m)`` and check the gap bound at every level."""
    if len(records) < 3:
        raise ValueError(f"rate fitting needs at least 3 levels, got {len(records)}")
    last = records[-1]
    if reference == "midpoint":
        ref = 0.5 * (last.abar_matrix + last.abarstar_matrix)
    elif reference == "largest":
        ref = last.abar_matrix
    else:
        raise ValueError(f"unknown reference {reference!r}")
    bounds, ok = [], True
    for r in records:
        gap, bound = gap_bound(r.abar_matrix, r.abarstar_matrix)
        bounds.append(bound)
        ok = ok and gap <= bound + slack
    ms, logs, notes = [], [], []
    for r in records:
        dist = float(np.linalg.norm(r.abar_matrix - ref, 2))
        if dist <= resolution:
            notes.append(f"level {r.m} excluded: distance {dist:.1e} below resolution")
            continue
        ms.append(r.m)
        logs.append(math.log(dist))
    gaps_tiny = all(r.gap <= resolution for r in records)
    if len(ms) < 3:
        note = "exact homogenization, degenerate fit" if gaps_tiny else "fewer than 3 resolvable levels, degenerate fit"
        if notes:
            note += "; " + "; ".join(notes)
        return RateFit(None, None, _as_tuple(ref), None, tuple(ms), True, note, tuple(bounds), ok)
    x = np.array(ms, dtype=float) * LOG3
    y = np.array(logs)
    slope, intercept = np.polyfit(x, y, 1)
    resid = float(np.sqrt(np.mean((y - (slope * x + intercept)) ** 2)))
    return RateFit(
        float(-slope),
        float(math.exp(intercept)),
        _as_tuple(ref),
        resid,
        tuple(ms),
        False,
        "; ".join(notes),
        tuple(bounds),
        ok,
    )


# ---------------------------------------------------------------------------
# two-scale comparison
# ---------------------------------------------------------------------------


def _half_cell_rule() -> tuple[np.ndarray, np.ndarray]:
    """Two Gauss points on each half of ``[0, 1]``: exact for cubics on each half."""
    g = 0.25 / math.sqrt(3.0)
    return np.array([0.25 - g, 0.25 + g, 0.75 - g, 0.75 + g]), np.full(4, 0.25)


def _multilinear_derivatives(xi: np.ndarray, n: int, d: int) -> np.ndarray:
    """``dB[q, i, a, v]``: derivative along ``(i, a)`` of vertex basis ``v`` at points ``xi`` (Q, n, d)."""
    from .sectorsolver import _reference

    bits = _reference(n, d)[4]  # (V, n, d)
    Q = xi.shape[0]
    V = bits.shape[0]
    lin = np.where(bits[None], xi[:, None], 1.0 - xi[:, None])  # (Q, V, n, d)
    out = np.empty((Q, n, d, V))
    for i in range(n):
        for a in range(d):
            rest = lin.copy()
            rest[:, :, i, a] = np.where(bits[None, :, i, a] == 1, 1.0, -1.0)
            out[:, i, a, :] = rest.reshape(Q, V, -1).prod(axis=-1)
    return out


def _pattern_codes(counts: np.ndarray, cap: int) -> np.ndarray:
    base = cap + 1
    return (counts * base ** np.arange(counts.shape[-1])).sum(axis=-1)


def _encode(pat: tuple, cap: int) -> int:
    return int(sum(c * (cap + 1) ** j for j, c in enumerate(pat)))


def two_scale_check(n: int, k: int, p: Sequence[float], q: Sequence[float], ctx: Context) -> tuple[float, float]:
    """Both sides of the two-scale comparison between cubes of levels ``n >= k``.

    ``lhs`` is the normalized expectation over the big cube of
    ``1/2 |grad v(cube_n) - grad v(z + cube_k)|^2``, where ``z + cube_k`` is the
    sub-cube containing the particle; ``rhs = J(cube_k) - J(cube_n)``.

    Both optimizers live on the same grid spacing.  In collar mode the
    sub-cube optimizer depends on the particles of the big cube near the
    sub-cube and, for sub-cubes touching the big boundary, on the big cube's
    collar state.  The collar breakpoints fall on cell midpoints, so each cell
    splits into two halves on which the sub-cube state is fixed; two Gauss
    points per half and per coordinate then integrate the squared difference
    of two multilinear gradients exactly.
    """
    if k > n:
        raise ValueError("two-scale check needs k <= n")
    d = ctx.model.d
    h = ctx.disc.h
    small_side = 3.0**k
    cells_per_small = small_side / h
    if abs(cells_per_small - round(cells_per_small)) > 1e-9:
        raise ValueError(f"grid spacing {h} does not resolve sub-cubes of side {small_side}")
    big, small = triadic_cube(n, d=d), triadic_cube(k, d=d)
    jb = j_value(big, p, q, ctx)
    js = j_value(small, p, q, ctx)
    rhs = js.value - jb.value
    if n == k:
        return 0.0, rhs
    sb, ss = cube_system(big, ctx), cube_system(small, ctx)
    collar = ctx.mode == "collar" and sb.collar_sides is not None
    fac = sb.sector_factor
    lower = big.lower
    per_axis = int(round(3 ** (n - k)))
    strides_sub = per_axis ** np.arange(d - 1, -1, -1)
    G_small = ss.grids[0].nodes_per_axis
    strides_small = G_small ** np.arange(d - 1, -1, -1)
    pts1, w1 = _half_cell_rule()
    lhs = 0.0
    for N in range(1, sb.n_max + 1):
        a = sb.asm[N]
        E = len(a.elements)
        Q = 4 ** (N * d)
        grid_pts = np.stack(np.meshgrid(*([pts1] * (N * d)), indexing="ij"), axis=-1).reshape(Q, N, d)
        wq = np.full(Q, 4.0 ** (-N * d))
        dB = _multilinear_derivatives(grid_pts, N, d)  # (Q, N, d, V)
        cell_lo = a.cell_mid[a.elements] - 0.5 * h  # (E, N, d)
        xq = cell_lo[:, None] + h * grid_pts[None]  # (E, Q, N, d)
        sub_multi = np.floor((a.cell_mid[a.elements] - lower) / small_side + 1e-12).astype(np.int64)
        sub_id = sub_multi @ strides_sub  # (E, N)
        sub_lo = lower + sub_multi * small_side  # (E, N, d)
        local_cell = np.rint((cell_lo - sub_lo) / h).astype(np.int64)  # (E, N, d)
        if collar:
            bl, br = sb.collar_sides["left"], sb.collar_sides["right"]
            big_combos = [
                ((pl, pr), ql * qr)
                for (pl, ql), (pr, qr) in itertools.product(zip(bl[0], bl[1]), zip(br[0], br[1]))
            ]
        else:
            big_combos = [(None, 1.0)]
        # small-field contributions do not depend on the big state except through
        # the shared faces, so precompute everything that does not
        groups = []
        for i in range(N):
            same = sub_id == sub_id[:, i : i + 1]
            keys = (same * (1 << np.arange(N))).sum(axis=1)
            for key in np.unique(keys):
                rows = np.nonzero(keys == key)[0]
                S = [j for j in range(N) if (key >> j) & 1]
                groups.append((i, rows, S))
        for big_pat, prob in big_combos:
            state_b = 0 if big_pat is None else sb.pattern_index[N][big_pat]
            vb = jb.optimizer.values[N][state_b][a.vertex]  # (E, V)
            grad_b = np.einsum("ev,qiav->eqia", vb, dB, optimize=True) / h  # (E, Q, N, d)
            acc = np.zeros(E)
            for i, rows, S in groups:
                c = len(S)
                pos_i = S.index(i)
                bits_c = _reference_bits(c, d)  # (Vc, c, d)
                sites = local_cell[rows][:, None, S, :] + bits_c[None]  # (R, Vc, c, d)
                idx = ss.grids[c].orbit_map(sites @ strides_small)  # (R, Vc)
                dBs = _multilinear_derivatives(grid_pts[:, S, :], c, d)[:, pos_i]  # (Q, d, Vc)
                vals_s = js.optimizer.values[c]
                if vals_s.shape[0] == 1:
                    grad_s = np.einsum("rv,qav->rqa", vals_s[0][idx], dBs, optimize=True) / h
                else:
                    state_s = _small_states(ss, c, big_pat, rows, i, S, sub_id, sub_multi, xq, small_side, lower, per_axis)
                    all_states = np.einsum("srv,qav->srqa", vals_s[:, idx], dBs, optimize=True) / h
                    grad_s = np.take_along_axis(all_states, state_s[None, :, :, None], axis=0)[0]
                diff = grad_b[rows][:, :, i, :] - grad_s  # (R, Q, d)
                acc[rows] += (diff**2).sum(axis=-1) @ wq
            lhs += fac[N] * prob * 0.5 * float(np.sum(acc * a.weight * a.scale_mass))
    return lhs, rhs


def _reference_bits(n: int, d: int) -> np.ndarray:
    from .sectorsolver import _reference

    return _reference(n, d)[4]


def _small_states(ss, c, big_pat, rows, i, S, sub_id, sub_multi, xq, side, lower, per_axis) -> np.ndarray:
    """Exterior-state index of the sub-cube field for every (row, quadrature point) (d = 1)."""
    cap = ss.collar_sides["cap"]
    lengths = ss.collar_sides["left"][2]
    z = sub_multi[rows, i, 0]
    face_lo = lower[0] + z * side
    face_hi = face_lo + side
    x = xq[rows][..., 0]  # (R, Q, N)
    outside = sub_id[rows] != sub_id[rows, i : i + 1]  # (R, N)
    t_left = face_lo[:, None, None] - x
    t_right = x - face_hi[:, None, None]
    counts = []
    for t in (t_left, t_right):
        hit = outside[:, None, :, None] & (t[..., None] > 0) & (t[..., None] < lengths[None, None, None, :])
        counts.append(np.minimum(hit.sum(axis=2), cap))  # (R, Q, J)
    code_l = _pattern_codes(counts[0], cap)
    code_r = _pattern_codes(counts[1], cap)
    if big_pat is not None:
        code_l = np.where((z == 0)[:, None], _encode(big_pat[0], cap), code_l)
        code_r = np.where((z == per_axis - 1)[:, None], _encode(big_pat[1], cap), code_r)
    base = (cap + 1) ** len(lengths)
    table = {_encode(pl, cap) * base + _encode(pr, cap): idx for (pl, pr), idx in ss.pattern_index[c].items()}
    codes = code_l * base + code_r
    uniq, inv = np.unique(codes, return_inverse=True)
    lookup = np.array([table[int(u)] for u in uniq])
    return lookup[inv].reshape(codes.shape)


# ---------------------------------------------------------------------------
# Step-4 iteration
# ---------------------------------------------------------------------------


def step4_diagnostic(F: Sequence[float], beta: float) -> dict:
    """Weighted sums ``Ft_m = sum_{n<=m} 3^{-beta (m-n)/2} F_n`` and their ratios.

    ``theta_hat`` is the last ratio ``Ft_{M}/Ft_{M-1}`` (the asymptotic
    contraction estimate); ``contraction`` says whether every ratio is below 1.
    """
    F = [float(x) for x in F]
    if len(F) < 3:
        raise ValueError(f"Step-4 diagnostic needs at least 3 levels, got {len(F)}")
    if beta <= 0:
        raise ValueError("beta must be positive")
    w = 3.0 ** (-beta / 2.0)
    Ft = []
    acc = 0.0
    for f in F:
        acc = w * acc + f
        Ft.append(acc)
    ratios = [b / a if a > 0 else None for a, b in zip(Ft[:-1], Ft[1:])]
    if any(r is None for r in ratios):
        return {"Ft": Ft, "ratios": ratios, "theta_hat": None, "contraction": None, "note": "undefined: zero weighted sum"}
    return {"Ft": Ft, "ratios": ratios, "theta_hat": ratios[-1], "contraction": all(r < 1 for r in ratios), "note": ""}
