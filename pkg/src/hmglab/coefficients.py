"""Coefficient fields a(mu, x) with unit range of dependence.

Every built-in model has the form ``a(mu, x) = g(mu(B_1(x))) * B`` where ``B`` is
a fixed symmetric matrix and ``g`` is a table indexed by the number of points
in the open unit ball around ``x`` (saturating at the last entry).  That form
makes the expectation over a Poisson exterior a finite Poisson sum.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import stats

from .configspace import Configuration, TriadicCube

logger = logging.getLogger(__name__)

__all__ = [
    "CoefficientModel",
    "ValidationReport",
    "InvalidModelError",
    "constant_model",
    "crowding_model",
    "radial_count_model",
    "custom_model",
    "evaluate",
    "exterior_measure",
    "circle_rect_overlap",
    "conditional_level",
    "conditional_coefficient",
    "conditional_coefficient_mc",
    "validate_model",
    "require_valid",
]

# Points at distance exactly 1 are outside the open ball; grid arithmetic
# needs a small guard so that a distance of 0.9999999999 from rounding is not
# counted as inside.
BALL_GUARD = 1e-9


class InvalidModelError(ValueError):
    """Raised when a model fails validation and is blocked from use."""


@dataclass(frozen=True)
class CoefficientModel:
    """Immutable description of a coefficient field.

    Attributes
    ----------
    kind
        ``"constant"``, ``"crowding"``, ``"radial-count"`` or ``"custom"``.
    d
        Space dimension.
    Lambda
        Ellipticity bound: ``Id <= a <= Lambda Id``.
    base
        The matrix ``B`` (row-major tuple of tuples).
    levels
        Scalar multipliers ``g(0), g(1), ..., g(K)``; counts above ``K`` use ``g(K)``.
    thresholds
        Count thresholds of the radial-count family (informational).
    name
        Identifier used in hashes and records; required for custom models.
    custom
        Optional callable ``(points (k, d), x (d,)) -> (d, d) matrix``.
    """

    kind: str
    d: int
    Lambda: float
    base: tuple[tuple[float, ...], ...]
    levels: tuple[float, ...] = (1.0,)
    thresholds: tuple[int, ...] = ()
    name: str = ""
    custom: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = field(
        default=None, compare=False, repr=False
    )

    @property
    def base_matrix(self) -> np.ndarray:
        return np.array(self.base, dtype=float)

    @property
    def count_cap(self) -> int:
        """Counts at or above this value all map to the last level."""
        return len(self.levels) - 1

    @property
    def has_closed_form(self) -> bool:
        return self.custom is None

    def level(self, count) -> np.ndarray:
        lv = np.asarray(self.levels, dtype=float)
        c = np.minimum(np.asarray(count, dtype=np.int64), self.count_cap)
        return lv[c]

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "d": self.d,
            "Lambda": self.Lambda,
            "base": [list(r) for r in self.base],
            "levels": list(self.levels),
            "thresholds": list(self.thresholds),
            "name": self.name,
        }


def _identity(d: int) -> tuple[tuple[float, ...], ...]:
    return tuple(tuple(1.0 if i == j else 0.0 for j in range(d)) for i in range(d))


def constant_model(c: float | Sequence[Sequence[float]] = 1.0, d: int = 1, Lambda: Optional[float] = None) -> CoefficientModel:
    """``a = c Id`` (scalar ``c``) or ``a = c`` (matrix ``c``) everywhere."""
    if np.ndim(c) == 0:
        mat = float(c) * np.eye(d)
    else:
        mat = np.array(c, dtype=float)
        d = mat.shape[0]
    lam = float(np.linalg.eigvalsh(mat).max()) if Lambda is None else float(Lambda)
    return CoefficientModel("constant", d, lam, tuple(map(tuple, mat.tolist())), (1.0,))


def crowding_model(Lambda: float = 2.0, d: int = 1) -> CoefficientModel:
    """``a = Lambda Id`` when the ball ``B_1(x)`` holds exactly one point, else ``Id``.

    With ``Lambda = 2`` this is ``(1 + 1{mu(B_1(x)) = 1}) Id``: a lone particle
    diffuses twice as fast as a crowded one.
    """
    return CoefficientModel("crowding", d, float(Lambda), _identity(d), (1.0, float(Lambda), 1.0))


def radial_count_model(
    thresholds: Sequence[int], values: Sequence[float], d: int = 1, Lambda: Optional[float] = None
) -> CoefficientModel:
    """``a = values[j] Id`` where ``j`` is the number of thresholds ``<= mu(B_1(x))``."""
    th = tuple(int(t) for t in thresholds)
    if list(th) != sorted(set(th)) or (th and th[0] < 0):
        raise ValueError("thresholds must be strictly increasing non-negative integers")
    if len(values) != len(th) + 1:
        raise ValueError("radial-count needs one more level value than thresholds")
    top = th[-1] if th else 0
    lv = tuple(float(values[sum(t <= c for t in th)]) for c in range(top + 1))
    lam = max(values) if Lambda is None else Lambda
    return CoefficientModel("radial-count", d, float(lam), _identity(d), lv, th)


def custom_model(
    func: Callable[[np.ndarray, np.ndarray], np.ndarray], name: str, d: int = 1, Lambda: float = 1.0
) -> CoefficientModel:
    """Wrap an arbitrary callable; conditional expectations use Monte Carlo."""
    if not name:
        raise ValueError("custom models need a name")
    return CoefficientModel("custom", d, float(Lambda), _identity(d), (1.0,), (), name, func)


def evaluate(model: CoefficientModel, mu: Configuration | np.ndarray, x: Sequence[float]) -> np.ndarray:
    """Coefficient matrix ``a(mu, x)``."""
    pts = mu.as_array() if isinstance(mu, Configuration) else np.asarray(mu, dtype=float).reshape(-1, model.d)
    xv = np.asarray(x, dtype=float).reshape(model.d)
    if model.custom is not None:
        return np.asarray(model.custom(pts, xv), dtype=float).reshape(model.d, model.d)
    if len(pts):
        count = int((np.linalg.norm(pts - xv, axis=1) < 1.0).sum())
    else:
        count = 0
    return float(model.level(count)) * model.base_matrix


# ---------------------------------------------------------------------------
# exterior geometry
# ---------------------------------------------------------------------------


def _seg_w(lo: float, hi: float, r: float) -> float:
    """Integral of sqrt(r^2 - x^2) over [lo, hi] (clipped to [-r, r])."""
    lo, hi = max(lo, -r), min(hi, r)
    if hi <= lo:
        return 0.0

    def prim(t):
        t = min(max(t, -r), r)
        return 0.5 * (t * math.sqrt(max(r * r - t * t, 0.0)) + r * r * math.asin(t / r))

    return prim(hi) - prim(lo)


def _quadrant_area(a: float, b: float, r: float) -> float:
    """Area of the disk of radius ``r`` at the origin intersected with ``{X <= a, Y <= b}``."""
    if a <= -r or b <= -r:
        return 0.0
    a = min(a, r)
    if b >= r:
        return 2.0 * _seg_w(-r, a, r)
    c = math.sqrt(r * r - b * b)
    # middle band |x| < c: the chord runs from -w(x) up to b
    mid = b * max(0.0, min(a, c) + c) + _seg_w(-c, min(a, c), r)
    if b < 0:
        return mid
    # outer bands |x| >= c: the full chord of length 2 w(x) lies below b
    return mid + 2.0 * _seg_w(-r, min(a, -c), r) + 2.0 * _seg_w(c, a, r)


def circle_rect_overlap(center: Sequence[float], r: float, lower: Sequence[float], upper: Sequence[float]) -> float:
    """Exact area of a disk intersected with an axis-parallel rectangle."""
    cx, cy = center
    x0, y0 = lower[0] - cx, lower[1] - cy
    x1, y1 = upper[0] - cx, upper[1] - cy
    area = (
        _quadrant_area(x1, y1, r)
        - _quadrant_area(x0, y1, r)
        - _quadrant_area(x1, y0, r)
        + _quadrant_area(x0, y0, r)
    )
    return max(area, 0.0)


def exterior_measure(x: Sequence[float], box: TriadicCube) -> float:
    """``|B_1(x) \\ U|`` for ``x`` in the cube ``U = box``."""
    xv = np.asarray(x, dtype=float).reshape(box.d)
    lo, hi = box.lower, box.upper
    if box.d == 1:
        inside = max(0.0, min(xv[0] + 1.0, hi[0]) - max(xv[0] - 1.0, lo[0]))
        return max(2.0 - inside, 0.0)
    if box.d == 2:
        return max(math.pi - circle_rect_overlap(xv, 1.0, lo, hi), 0.0)
    raise NotImplementedError("exterior measure is implemented for d = 1 and d = 2")


# ---------------------------------------------------------------------------
# conditional expectations
# ---------------------------------------------------------------------------


def conditional_level(model: CoefficientModel, k_int, lam, rho: float) -> np.ndarray:
    """``E[g(k_int + X)]`` with ``X ~ Poisson(rho * lam)``, vectorized."""
    k = np.asarray(k_int, dtype=np.int64)
    mean = rho * np.asarray(lam, dtype=float)
    k, mean = np.broadcast_arrays(k, mean)
    cap = model.count_cap
    out = np.zeros(k.shape, dtype=float)
    left = np.ones(k.shape, dtype=float)
    for j in range(cap + 1):
        reach = k + j
        live = reach < cap
        pj = stats.poisson.pmf(j, mean)
        out += np.where(live, pj * model.level(reach), 0.0)
        left -= np.where(live, pj, 0.0)
    out += np.clip(left, 0.0, 1.0) * model.levels[-1]
    return out


def conditional_coefficient_mc(
    model: CoefficientModel,
    interior: Configuration,
    x: Sequence[float],
    box: TriadicCube,
    rho: float,
    rng: np.random.Generator,
    n_pairs: int = 2000,
) -> tuple[np.ndarray, np.ndarray]:
    """Antithetic Monte Carlo estimate of ``E[a(mu, x) | mu restricted to U]``.

    Only the exterior inside the box ``[x - 1, x + 1]^d`` can matter.  Each pair
    uses uniforms ``u`` and ``1 - u`` for both the point count (inverse CDF) and
    the positions.  Returns the mean matrix and its standard error (entrywise).
    """
    d = model.d
    xv = np.asarray(x, dtype=float).reshape(d)
    pts_in = interior.as_array()
    window_vol = 2.0**d
    lam = rho * window_vol
    vals = np.empty((n_pairs, d, d))
    kmax = int(stats.poisson.ppf(1 - 1e-15, lam)) + 1
    for i in range(n_pairs):
        uc = rng.random()
        upos = rng.random((kmax, d))
        pair = []
        for flip in (False, True):
            c = 1.0 - uc if flip else uc
            k = int(stats.poisson.ppf(c, lam))
            pos = (1.0 - upos[:k]) if flip else upos[:k]
            ext = xv - 1.0 + 2.0 * pos
            ext = ext[~box.contains(ext, closed=True)] if len(ext) else ext
            allpts = np.vstack([pts_in, ext]) if len(ext) else pts_in
            pair.append(evaluate(model, allpts, xv))
        vals[i] = 0.5 * (pair[0] + pair[1])
    return vals.mean(axis=0), vals.std(axis=0, ddof=1) / math.sqrt(n_pairs)


def conditional_coefficient(
    model: CoefficientModel,
    interior: Configuration,
    x: Sequence[float],
    box: TriadicCube,
    rho: float,
    rng: Optional[np.random.Generator] = None,
    tol: float = 1e-2,
    sample_budget: int = 200_000,
) -> np.ndarray:
    """``E[a(mu, x) | mu restricted to U = interior]`` with a Poisson(rho) exterior."""
    xv = np.asarray(x, dtype=float).reshape(model.d)
    if model.has_closed_form:
        pts = interior.as_array()
        k = int((np.linalg.norm(pts - xv, axis=1) < 1.0).sum()) if len(pts) else 0
        lam = exterior_measure(xv, box)
        return float(conditional_level(model, k, lam, rho)) * model.base_matrix
    if rng is None:
        raise ValueError("Monte Carlo fallback needs an rng stream")
    pairs = 1000
    while True:
        mean, se = conditional_coefficient_mc(model, interior, xv, box, rho, rng, pairs)
        if se.max() <= tol:
            return mean
        if 2 * pairs * 2 > sample_budget:
            raise RuntimeError(
                f"Monte Carlo standard error {se.max():.2e} above tolerance {tol} "
                f"within a budget of {sample_budget} samples"
            )
        pairs *= 2


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ValidationReport:
    valid: bool
    min_eig: float
    max_eig: float
    range_ok: bool
    stationarity_ok: bool
    samples: int
    messages: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "valid": self.valid,
            "min_eig": self.min_eig,
            "max_eig": self.max_eig,
            "range_ok": self.range_ok,
            "stationarity_ok": self.stationarity_ok,
            "samples": self.samples,
            "messages": list(self.messages),
        }


def validate_model(model: CoefficientModel, sample_budget: int = 200, rng: Optional[np.random.Generator] = None) -> ValidationReport:
    """Check ellipticity, symmetry, finite range and stationarity on random samples."""
    if sample_budget < 1:
        raise ValueError("sample_budget must be at least 1")
    rng = np.random.default_rng(0) if rng is None else rng
    d = model.d
    msgs = []
    lo, hi = math.inf, -math.inf
    range_ok = True
    stat_ok = True
    for _ in range(sample_budget):
        x = rng.uniform(-1.0, 1.0, d)
        k = rng.poisson(3.0)
        pts = x + rng.uniform(-2.0, 2.0, (k, d))
        a = evaluate(model, pts, x)
        if not np.allclose(a, a.T, atol=1e-12) and "asymmetric coefficient" not in msgs:
            msgs.append("asymmetric coefficient")
        eig = np.linalg.eigvalsh(0.5 * (a + a.T))
        lo, hi = min(lo, eig.min()), max(hi, eig.max())
        # finite range: points farther than 1 from x do not matter
        direction = rng.normal(size=d)
        direction /= np.linalg.norm(direction)
        far = x + direction * rng.uniform(1.0 + 1e-6, 3.0)
        near = pts[np.linalg.norm(pts - x, axis=1) < 1.0] if k else pts
        if not (np.allclose(evaluate(model, np.vstack([pts, far]), x), a)
                and np.allclose(evaluate(model, near, x), a)):
            range_ok = False
        shift = rng.uniform(-5.0, 5.0, d)
        if not np.allclose(evaluate(model, pts + shift, x + shift), a):
            stat_ok = False
    if model.has_closed_form:
        # every table entry is reachable, so check them all, not only sampled ones
        for g in model.levels:
            eig = np.linalg.eigvalsh(g * model.base_matrix)
            lo, hi = min(lo, eig.min()), max(hi, eig.max())
    tol = 1e-12
    if lo < 1.0 - tol:
        msgs.append(f"smallest eigenvalue {lo:g} below 1")
    if hi > model.Lambda + tol:
        msgs.append(f"largest eigenvalue {hi:g} above Lambda = {model.Lambda:g}")
    if not range_ok:
        msgs.append("value depends on points farther than 1")
    if not stat_ok:
        msgs.append("value not translation invariant")
    valid = not msgs
    return ValidationReport(valid, float(lo), float(hi), range_ok, stat_ok, sample_budget, tuple(msgs))


@lru_cache(maxsize=64)
def _cached_validation(model: CoefficientModel) -> ValidationReport:
    return validate_model(model, 200, np.random.default_rng(12345))


def require_valid(model: CoefficientModel) -> ValidationReport:
    """Validate (cached per model) and raise :class:`InvalidModelError` if invalid."""
    report = _cached_validation(model)
    if not report.valid:
        raise InvalidModelError(f"model {model.kind!r} {model.name!r} is invalid: " + "; ".join(report.messages))
    return report
