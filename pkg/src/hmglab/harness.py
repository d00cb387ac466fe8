"""Named check suites driven by a run configuration.

:func:`identity_suite` evaluates the variational identities of the
finite-volume quantities and returns one :class:`Check` per named residual.
:func:`inequality_suite` runs the functional-inequality harness on a fixed
set of ``a``-harmonic and optimizer fields and returns one entry per
inequality per field.  Both are pure given ``(config, seed)``.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, Optional, Sequence

import numpy as np

from . import funcineq as fi
from .coefficients import validate_model
from .config import RunConfig
from .configspace import TriadicCube, cube, rng_stream, triadic_cube
from .quantities import (
    _harmonic_residual,
    abar_pair,
    bilinear,
    flux_average,
    j_value,
    nu,
    nu_star,
    optimizer_gap,
    quadratic_response_check,
)
from .sectorsolver import Context, affine_field, cube_system

__all__ = ["Check", "identity_suite", "inequality_suite", "harness_fields", "LOCAL_GEOMETRY"]

#: ``(side, s, eps, r, h, n_max)`` of the cube used for the localization and Caccioppoli checks
LOCAL_GEOMETRY = (4.0, 3.0, 1.0, 1.0, 0.5, 5)
#: fields of the inequality harness: name -> how to build it on a cube
FIELD_NAMES = ("nu_minimizer", "nu_star_maximizer", "v_J")
_J_SLOPES = ((1.0,), (1.3,))


@dataclass(frozen=True)
class Check:
    """One named check: ``value`` is compared with ``bound`` (``value <= bound`` passes)."""

    name: str
    value: float
    bound: float
    passed: bool
    where: str = ""
    detail: Optional[dict] = None

    def to_dict(self) -> dict:
        out = {"name": self.name, "where": self.where, "value": self.value, "bound": self.bound, "passed": self.passed}
        if self.detail:
            out["detail"] = self.detail
        return out


def _check(name: str, value: float, bound: float, where: str = "", detail: Optional[dict] = None) -> Check:
    value = float(value)
    return Check(name, value, float(bound), bool(value <= bound), where, detail)


# ---------------------------------------------------------------------------
# identities
# ---------------------------------------------------------------------------


def _unit_ball(rng: np.random.Generator, d: int, k: int) -> np.ndarray:
    """``k`` points drawn uniformly from the closed unit ball of R^d."""
    x = rng.standard_normal((k, d))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    return x * rng.random((k, 1)) ** (1.0 / d)


def model_check(cfg: RunConfig) -> Check:
    rep = validate_model(cfg.coefficient_model(), 200, rng_stream(cfg.seed, "validate-model"))
    return Check("model_valid", 0.0 if rep.valid else 1.0, 0.0, rep.valid, "model", rep.to_dict())


def identities_on_cube(box: TriadicCube, ctx: Context, tol: float, seed: int) -> list[Check]:
    """Every identity residual on one cube (relative to the natural scale)."""
    d = box.d
    where = f"Q_{box.side:g}"
    eye = np.eye(d)
    sysm = cube_system(box, ctx)
    out: list[Check] = []

    abar, astar = abar_pair(box, ctx, tol=math.inf)
    scale = max(1.0, float(np.abs(abar).max()))
    flux = np.column_stack([nu(box, eye[i], ctx).flux for i in range(d)])
    out.append(_check("flux_symmetry", np.abs(flux - flux.T).max() / scale, tol, where))
    out.append(_check("flux_equals_abar", np.abs(flux - abar).max() / scale, tol, where))
    out.append(_check("slope_nu", max(nu(box, eye[i], ctx).slope_residual for i in range(d)), tol, where))
    slope_star = max(
        float(np.abs(nu_star(box, eye[i], ctx).average_gradient - np.linalg.solve(astar, eye[i])).max())
        for i in range(d)
    )
    out.append(_check("slope_nu_star", slope_star / scale, tol, where))
    lo = float(np.linalg.eigvalsh(abar - astar).min())
    out.append(_check("abar_above_abarstar", max(-lo, 0.0) / scale, tol, where))
    model = ctx.model
    b = np.linalg.eigvalsh(model.base_matrix)
    below = min(model.levels) * b.min() - float(np.linalg.eigvalsh(astar).min())
    above = float(np.linalg.eigvalsh(abar).max()) - max(model.levels) * b.max()
    out.append(_check("ellipticity_bounds", max(below, above, 0.0) / scale, tol, where))

    rng = rng_stream(seed, "identities", where)
    # bilinearity: nu and nu* at random slopes against the polarized matrices
    worst = 0.0
    for p in rng.standard_normal((5, d)):
        worst = max(worst, abs(nu(box, p, ctx).value - 0.5 * p @ abar @ p) / max(1.0, p @ p))
        worst = max(worst, abs(nu_star(box, p, ctx).value - 0.5 * p @ np.linalg.solve(astar, p)) / max(1.0, p @ p))
    out.append(_check("bilinearity", worst / scale, tol, where))

    p1, q1 = rng.standard_normal(d), rng.standard_normal(d)
    p2, q2 = rng.standard_normal(d), rng.standard_normal(d)
    out.append(_check("quadratic_response_nu", quadratic_response_check(box, "nu", affine_field(box, p1, ctx), ctx), tol, where))
    out.append(
        _check(
            "quadratic_response_nu_star",
            quadratic_response_check(box, "nu_star", affine_field(box, p2, ctx), ctx, q=q1),
            tol,
            where,
        )
    )
    harmonic = j_value(box, p2, q2, ctx).optimizer
    out.append(_check("quadratic_response_J", quadratic_response_check(box, "J", harmonic, ctx, p=p1, q=q1), tol, where))
    jr = j_value(box, p1, q1, ctx)
    out.append(_check("J_energy", jr.energy_residual, tol, where))

    # linearity of (p, q) -> v_J, nodewise
    a = j_value(box, p1, q1, ctx).optimizer
    b_ = j_value(box, p2, q2, ctx).optimizer
    c = j_value(box, p1 + p2, q1 + q2, ctx).optimizer
    lin = max(float(np.abs(vc - va - vb).max()) for va, vb, vc in zip(a.values, b_.values, c.values))
    size = max(1.0, max(float(np.abs(v).max()) for v in c.values))
    out.append(_check("J_linearity", lin / size, tol, where))

    # J >= 0 on 100 random pairs of the unit ball; J is the exact quadratic form
    # recovered above (bilinearity), and a few pairs are also solved directly
    P, Q = _unit_ball(rng, d, 100), _unit_ball(rng, d, 100)
    ainv = np.linalg.inv(astar)
    Jq = 0.5 * np.einsum("ki,ij,kj->k", P, abar, P) + 0.5 * np.einsum("ki,ij,kj->k", Q, ainv, Q) - (P * Q).sum(1)
    direct = [j_value(box, P[k], Q[k], ctx).value for k in range(5)]
    form_err = max(abs(x - y) for x, y in zip(direct, Jq[:5]))
    out.append(_check("J_nonnegative", max(-float(Jq.min()), -min(direct), 0.0), 1e-9, where, {"min_J": float(Jq.min())}))
    out.append(_check("J_quadratic_form", form_err / scale, tol, where))

    # a-harmonicity of the optimizers
    vmin = nu(box, eye[0], ctx).minimizer
    energy = max(1.0, bilinear(sysm, vmin, vmin))
    out.append(_check("harmonic_nu_minimizer", _harmonic_residual(sysm, vmin) / energy, tol, where))
    out.append(_check("harmonic_v_J", _harmonic_residual(sysm, jr.optimizer) / max(1.0, bilinear(sysm, jr.optimizer, jr.optimizer)), tol, where))

    gap, jv = optimizer_gap(box, eye[0], ctx)
    out.append(_check("optimizer_gap", gap - 2 * jv, 1e-8, where, {"gap": gap, "J": jv}))
    # flux of the nu minimizer equals abar p (the flux identity at a random slope)
    fl = flux_average(sysm, nu(box, p1, ctx).minimizer)
    out.append(_check("flux_identity", float(np.abs(fl - abar @ p1).max()) / scale, tol, where))
    return out


def identity_suite(cfg: RunConfig, sides: Optional[Sequence[float]] = None) -> list[Check]:
    """Model validation followed by :func:`identities_on_cube` on every ``Q_s``.

    Stops after the model check if the model is invalid, since nothing else
    is meaningful then.
    """
    first = model_check(cfg)
    if not first.passed:
        return [first]
    out = [first]
    for s in sides or cfg.check_sides:
        out.extend(identities_on_cube(cube(s, cfg.d), cfg.context(), cfg.identity_tol, cfg.seed))
    return out


# ---------------------------------------------------------------------------
# functional inequalities
# ---------------------------------------------------------------------------


def harness_fields(box: TriadicCube, ctx: Context) -> dict:
    """The fields the inequality harness runs on.

    All three are single-state (interior mode) and ``a``-harmonic against
    ``H^1_0`` tests: the minimizer of ``nu(e_1)``, the maximizer of
    ``nu*(e_1)`` and the ``J`` optimizer at ``(p, q) = (e_1, 1.3 e_1)``.
    """
    ctx = replace(ctx, mode="interior")
    e1 = np.eye(box.d)[0]
    return {
        "nu_minimizer": nu(box, e1, ctx).minimizer,
        "nu_star_maximizer": nu_star(box, e1, ctx).maximizer,
        "v_J": j_value(box, _J_SLOPES[0][0] * e1, _J_SLOPES[1][0] * e1, ctx).optimizer,
    }


def _entry(name: str, field: str, lhs: float, rhs: float, holds: bool, stderr: float = 0.0, detail=None) -> dict:
    ratio = lhs / rhs if rhs > 0 else (0.0 if lhs <= 0 else math.inf)
    out = {
        "inequality": name,
        "field": field,
        "lhs": float(lhs),
        "rhs": float(rhs),
        "ratio": float(ratio),
        "stderr": float(stderr),
        "holds": bool(holds),
    }
    if detail is not None:
        out["detail"] = detail
    return out


def _field_job(args) -> list[dict]:
    cfg, name = args
    rho = cfg.rho
    M = cfg.mc_samples
    seed = cfg.seed
    ctx = cfg.context()
    out = []
    # --- on the cube of level 1 ------------------------------------------------
    box = triadic_cube(1, d=cfg.d)
    fld = harness_fields(box, ctx)[name]
    bound = 1.0 / (math.pi**2 * cfg.d)
    r = fi.poincare_ratio(fld, cls="h1", rho=rho)
    out.append(_entry("poincare_h1", name, r, bound, r <= bound))
    avg = fi.snk_gradient_average(fld, 1, 0, method="exact", rho=rho)
    e_s = fi.snk_energy(avg, rho)
    e_g = fi._gradient_energy(fld, rho)
    out.append(_entry("snk_jensen_exact", name, e_s, e_g, e_s <= e_g * (1 + 1e-12) + 1e-14))
    mc = fi.snk_contraction_mc(fld, 1, 0, n_samples=M, seed=seed, rho=rho)
    out.append(
        _entry("snk_jensen_mc", name, mc["gradient_energy"] - mc["margin"], mc["gradient_energy"], mc["holds"], mc["stderr"], mc)
    )
    mt = fi.martingale_residual(fld, (1, 0), (1, 1), n_samples=M, seed=seed, rho=rho, inner_draws=cfg.mc_inner)
    out.append(_entry("snk_martingale", name, mt.residual, 3 * mt.stderr, mt.holds, mt.stderr, mt.to_dict()))
    ms = fi.multiscale_poincare_check(fld, 1, rho=rho)
    out.append(_entry("multiscale_poincare", name, ms.lhs, ms.rhs, ms.lhs <= ms.rhs, 0.0, ms.to_dict()))
    # --- localization and Caccioppoli on Q_side -----------------------------------
    side, s, eps, rr, h, n_max = LOCAL_GEOMETRY
    lctx = Context(ctx.model, replace(ctx.disc, h=h, n_max=n_max, allow_low_mass=True), "interior")
    U = cube(side, cfg.d)
    lf = harness_fields(U, lctx)[name]
    _, rep = fi.localize(lf, s, eps, n_samples=M, seed=seed, rho=rho, budget=cfg.shell_budget)
    jm = rep.jensen_margin
    out.append(_entry("localization_jensen", name, -jm.mean, 3 * jm.stderr + 1e-12, jm.mean >= -3 * jm.stderr - 1e-12, jm.stderr))
    inc = rep.bracket_increment
    out.append(_entry("bracket_monotone", name, -inc.mean, 3 * inc.stderr + 1e-12, rep.bracket_monotone, inc.stderr))
    gres = max(rep.interior_residual, rep.shell_residual, rep.exterior_residual, rep.commute_residual)
    out.append(_entry("localization_gradient", name, gres, 1e-6, gres <= 1e-6, 0.0, rep.to_dict()))
    cr = fi.weak_caccioppoli_check(lf, rr, s, eps, lctx, n_samples=M, seed=seed)
    out.append(_entry("weak_caccioppoli", name, cr.lhs.mean, cr.rhs.mean, cr.holds, cr.margin.stderr, cr.to_dict()))
    return out


def _corpus_job(args) -> list[dict]:
    cfg, cls = args
    box = triadic_cube(1, d=cfg.d)
    bound = 1.0 / (math.pi**2 * cfg.d)
    ratios = [fi.poincare_ratio(f, cls=cls, rho=cfg.rho) for f in fi.random_corpus(box, cfg.h, cfg.n_max, cls, 20, cfg.seed, cfg.rho)]
    worst = max(ratios)
    return [_entry(f"poincare_{cls}", f"random_corpus_{cls}", worst, bound, worst <= bound, 0.0, {"count": len(ratios)})]


def _run_jobs(fn: Callable, jobs: list, workers: int) -> list:
    if workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
        return list(pool.map(fn, jobs))


def inequality_suite(cfg: RunConfig, workers: int = 1, fields: Sequence[str] = FIELD_NAMES) -> list[dict]:
    """One entry per inequality per field (plus the random Poincare corpora), in a fixed order."""
    entries: list[dict] = []
    for chunk in _run_jobs(_field_job, [(cfg, name) for name in fields], workers):
        entries.extend(chunk)
    for chunk in _run_jobs(_corpus_job, [(cfg, cls) for cls in ("h1", "h10")], workers):
        entries.extend(chunk)
    return entries
