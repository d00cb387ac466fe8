"""Command-line front end: ``hmglab compute|cascade|check|report``.

Exit codes: 0 success, 2 configuration error (or an empty store for
``report``), 3 solver failure, 4 invariant failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .cascade import CascadeError, CascadeRecord, gap_and_rate, gap_bound, monotonicity_report, run_cascade, step4_diagnostic, tau_defects
from .coefficients import InvalidModelError
from .config import ConfigError, RunConfig, config_hash, dump_config, load_config
from .configspace import GridBudgetError, TruncationError, cube, triadic_cube
from .harness import identity_suite, inequality_suite
from .quantities import InadmissibleFieldError, InvariantError, abar_pair, j_value, nu, nu_star
from .sectorsolver import SolverError, cube_system
from .store import ResultStore, canonical, merge_stores

logger = logging.getLogger("hmglab")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3
EXIT_INVARIANT = 4

CASCADE_FIXED = ("m",)
CASCADE_TAIL = ("tau", "gap", "V", "flatness", "gap_bound")


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# shared plumbing
# ---------------------------------------------------------------------------


def _workers(args, cfg: Optional[RunConfig]) -> int:
    if args.workers is not None:
        return args.workers
    env = os.environ.get("HMGLAB_WORKERS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise CliError(EXIT_CONFIG, f"HMGLAB_WORKERS: expected an integer, got {env!r}")
    return cfg.workers if cfg is not None else 1


def _effective_config(args) -> RunConfig:
    if not args.config:
        raise CliError(EXIT_CONFIG, "--config: a configuration file is required")
    cfg = load_config(args.config)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.out is not None:
        changes["out"] = args.out
    if changes:
        cfg = cfg.replace(**changes)
    return cfg


def _run_key(command: str, cfg: RunConfig, extra) -> str:
    blob = canonical([command, config_hash(cfg), extra])
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _disc_key(ctx) -> dict:
    return asdict(ctx.disc)


def _record(kind: str, cfg: RunConfig, key: dict, result: dict) -> dict:
    return {"type": kind, "config_hash": config_hash(cfg), "key": key, "result": result}


def _parse_vector(text: Optional[str], d: int, flag: str) -> Optional[tuple[float, ...]]:
    if text is None:
        return None
    try:
        vals = tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise CliError(EXIT_CONFIG, f"{flag}: expected comma-separated numbers, got {text!r}")
    if len(vals) != d:
        raise CliError(EXIT_CONFIG, f"{flag}: expected {d} components, got {len(vals)}")
    return vals


class _Run:
    """Manifest bookkeeping around one command; records go through :meth:`emit`."""

    def __init__(self, store: ResultStore, command: str, cfg: RunConfig, extra, force: bool):
        self.store = store
        self.key = _run_key(command, cfg, extra)
        self.command = command
        self.cfg = cfg
        self.count = 0
        self.cached = store.completed(self.key) and not force

    def __enter__(self):
        if not self.cached:
            self.store.begin_run(self.key, self.command, config_hash(self.cfg))
        return self

    def emit(self, record: dict) -> None:
        self.store.append(record)
        self.count += 1

    def __exit__(self, exc_type, exc, tb):
        if not self.cached:
            self.store.end_run(self.key, "ok" if exc_type is None else "failed", self.count)
        return False


# ---------------------------------------------------------------------------
# compute
# ---------------------------------------------------------------------------


def _compute_job(job) -> list[dict]:
    cfg, box, h, p, q = job
    ctx = cfg.context(h)
    sysm = cube_system(box, ctx)
    key = {
        "model": ctx.model.to_dict(),
        "U": box.to_dict(),
        "p": None if p is None else list(p),
        "q": None if q is None else list(q),
        "disc": _disc_key(ctx),
        "mode": ctx.mode,
        "seed": cfg.seed,
    }
    common = {"truncated_mass": sysm.weights.truncated_mass, "low_mass": sysm.weights.low_mass}
    out = []
    if p is not None:
        r = nu(box, p, ctx)
        res = dict(r.to_dict(), iterations=r.stats.iterations, **common)
        out.append(_record("nu", cfg, key, res))
    if q is not None:
        r = nu_star(box, q, ctx)
        res = dict(r.to_dict(), iterations=r.stats.iterations, **common)
        out.append(_record("nu_star", cfg, key, res))
    if p is not None and q is not None:
        r = j_value(box, p, q, ctx)
        out.append(_record("J", cfg, key, dict(r.to_dict(), **common)))
    return out


def cmd_compute(args) -> int:
    cfg = _effective_config(args)
    d = cfg.d
    p = _parse_vector(args.p, d, "--p")
    q = _parse_vector(args.q, d, "--q")
    if p is None and q is None:
        p = tuple(np.eye(d)[0])
    if args.side is not None:
        boxes = [(cube(s, d), cfg.h) for s in args.side]
    else:
        boxes = [(triadic_cube(m, d=d), cfg.h_for(m)) for m in (args.level or [0])]
    store = ResultStore(cfg.out)
    extra = {"boxes": [b.to_dict() for b, _ in boxes], "p": p, "q": q}
    with _Run(store, "compute", cfg, extra, args.force) as run:
        if run.cached:
            print("compute: skipped (cached)")
            return EXIT_OK
        jobs = [(cfg, b, h, p, q) for b, h in boxes]
        workers = _workers(args, cfg)
        if workers > 1 and len(jobs) > 1:
            with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
                results = list(pool.map(_compute_job, jobs))
        else:
            results = [_compute_job(j) for j in jobs]
        for recs in results:  # single writer, submission order
            for rec in recs:
                run.emit(rec)
                print(f"{rec['type']:8s} U={rec['key']['U']['side']:g} value={rec['result']['value']:.12g}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# cascade
# ---------------------------------------------------------------------------


def calibrate_band(cfg: RunConfig) -> float:
    """Twice the worst monotonicity violation of the constant model on the same plan.

    The constant model is exact in the continuum, so any violation it shows is
    discretization and truncation error.  The result is floored at the
    identity tolerance.
    """
    base = cfg.replace(model="constant", c=1.0)
    mats = []
    for m in range(cfg.levels + 1):
        mats.append(abar_pair(triadic_cube(m, d=cfg.d), base.context(cfg.h_for(m))))
    worst = 0.0
    for (a0, s0), (a1, s1) in zip(mats[:-1], mats[1:]):
        worst = max(worst, float(np.linalg.eigvalsh(a1 - a0).max()), float(np.linalg.eigvalsh(s0 - s1).max()))
    return max(2.0 * worst, cfg.identity_tol)


def cascade_columns(d: int) -> list[str]:
    idx = [f"{i + 1}{j + 1}" for i in range(d) for j in range(d)]
    return (
        list(CASCADE_FIXED)
        + [f"abar_{ij}" for ij in idx]
        + [f"abarstar_{ij}" for ij in idx]
        + [f"J_{i + 1}" for i in range(d)]
        + list(CASCADE_TAIL)
    )


def cascade_rows(records: Sequence[CascadeRecord]) -> list[dict]:
    rows = []
    for r in records:
        d = len(r.abar)
        row = {"m": r.m}
        for i in range(d):
            for j in range(d):
                row[f"abar_{i + 1}{j + 1}"] = r.abar[i][j]
                row[f"abarstar_{i + 1}{j + 1}"] = r.abarstar[i][j]
        for i, J in enumerate(r.J):
            row[f"J_{i + 1}"] = J
        row["tau"] = "" if r.tau is None else r.tau
        row["gap"] = r.gap
        row["V"] = r.V
        row["flatness"] = r.flatness
        row["gap_bound"] = gap_bound(r.abar_matrix, r.abarstar_matrix)[1]
        rows.append(row)
    return rows


def _write_csv(path: Path, columns: Sequence[str], rows: Sequence[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v) for k, v in row.items()})


def cascade_summary(records: Sequence[CascadeRecord], band: float, beta: float) -> dict:
    """Monotonicity report, rate fit and Step-4 diagnostic (when enough levels)."""
    out = {"levels": [r.m for r in records], "monotonicity": monotonicity_report(records, band), "warnings": []}
    if len(records) < 3:
        out["warnings"].append("insufficient levels")
        out["rate_fit"] = None
        out["step4"] = None
        return out
    out["rate_fit"] = gap_and_rate(records).to_dict()
    F = [sum(r.J) for r in records]
    out["step4"] = step4_diagnostic(F, beta)
    return out


def cmd_cascade(args) -> int:
    cfg = _effective_config(args)
    store = ResultStore(cfg.out)
    out_dir = Path(cfg.out)
    with _Run(store, "cascade", cfg, None, args.force) as run:
        if run.cached:
            print("cascade: skipped (cached)")
            return EXIT_OK
        band = cfg.band if cfg.band is not None else calibrate_band(cfg)
        ctx = cfg.context()
        chash = config_hash(cfg)

        def persist(rec: CascadeRecord) -> None:
            key = {"model": ctx.model.to_dict(), "m": rec.m, "h": rec.h, "mode": ctx.mode, "seed": cfg.seed}
            res = rec.to_dict()
            res.pop("tau")  # tau needs the next level; it is part of the summary record
            run.emit({"type": "cascade_level", "config_hash": chash, "key": key, "result": res})
            print(f"level {rec.m}: gap={rec.gap:.6e} J={list(rec.J)}")

        try:
            records = run_cascade(range(cfg.levels + 1), ctx, cfg.plan(), on_record=persist)
        except CascadeError as exc:
            cause = exc.__cause__
            if isinstance(cause, (InvariantError, InvalidModelError)):
                raise CliError(EXIT_INVARIANT, str(exc)) from exc
            if isinstance(cause, (GridBudgetError, TruncationError)):
                raise CliError(EXIT_CONFIG, str(exc)) from exc
            raise CliError(EXIT_SOLVER, f"{exc} ({len(exc.records)} levels persisted)") from exc
        summary = cascade_summary(records, band, cfg.beta)
        summary["tau"] = tau_defects(records)
        summary["plan"] = {str(m): h for m, h in cfg.plan().items()}
        summary["band_source"] = "config" if cfg.band is not None else "constant-model calibration"
        run.emit({"type": "cascade_summary", "config_hash": chash, "key": {"levels": cfg.levels, "seed": cfg.seed}, "result": summary})
        _write_csv(out_dir / "cascade.csv", cascade_columns(cfg.d), cascade_rows(records))
        (out_dir / "cascade.json").write_text(
            canonical({"config": dump_config(cfg), "records": [r.to_dict() for r in records], "summary": summary}) + "\n"
        )
    for w in summary["warnings"]:
        print(f"warning: {w}", file=sys.stderr)
    mono = summary["monotonicity"]
    print(f"band {band:.3e}: abar monotone {mono['abar_monotone']}, abar* monotone {mono['abarstar_monotone']}")
    if summary["rate_fit"] is not None:
        fit = summary["rate_fit"]
        print(f"rate fit: alpha={fit['alpha']} C={fit['C']} ({fit['note'] or 'ok'})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# check
# ---------------------------------------------------------------------------


def cmd_check(args) -> int:
    cfg = _effective_config(args)
    out_dir = Path(cfg.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    report: dict = {"config_hash": config_hash(cfg), "suite": args.suite, "seed": cfg.seed}
    failures: list[str] = []
    if args.suite in ("identities", "all"):
        checks = identity_suite(cfg)
        report["identities"] = [c.to_dict() for c in checks]
        for c in checks:
            print(f"{'PASS' if c.passed else 'FAIL'} {c.where:6s} {c.name:28s} {c.value:.3e} (bound {c.bound:.1e})")
        failures += [f"{c.name} on {c.where}" for c in checks if not c.passed]
    if args.suite in ("inequalities", "all") and not failures:
        entries = inequality_suite(cfg, workers=_workers(args, cfg))
        report["inequalities"] = entries
        cols = ("field", "inequality", "lhs", "rhs", "ratio", "stderr", "holds")
        _write_csv(out_dir / "inequalities.csv", cols, [{k: e[k] for k in cols} for e in entries])
        for e in entries:
            print(f"{'PASS' if e['holds'] else 'FAIL'} {e['field']:20s} {e['inequality']:22s} lhs={e['lhs']:.4g} rhs={e['rhs']:.4g}")
        failures += [f"{e['inequality']} on {e['field']}" for e in entries if not e["holds"]]
    report["passed"] = not failures
    report["first_failure"] = failures[0] if failures else None
    (out_dir / f"check_{args.suite}.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    if failures:
        raise CliError(EXIT_INVARIANT, f"invariant failed: {failures[0]}")
    print("all checks passed")
    return EXIT_OK


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


def _latest_cascade(records: list[dict]) -> tuple[list[CascadeRecord], Optional[dict]]:
    """Level records and summary of the last cascade in the (merged) log."""
    summaries = [r for r in records if r["type"] == "cascade_summary"]
    if not summaries:
        return [], None
    summary = summaries[-1]
    chash = summary["config_hash"]
    by_m = {}
    for r in records:
        if r["type"] == "cascade_level" and r["config_hash"] == chash:
            by_m.setdefault(r["result"]["m"], r["result"])
    taus = summary["result"].get("tau", [])
    levels = []
    for i, m in enumerate(sorted(by_m)):
        data = dict(by_m[m], tau=taus[i] if i < len(taus) else None)
        levels.append(CascadeRecord.from_dict(data))
    return levels, summary["result"]


def cmd_report(args) -> int:
    out_dir = Path(args.out or (load_config(args.config).out if args.config else "hmglab-out"))
    stores = [ResultStore(out_dir)] + [ResultStore(p) for p in args.merge or []]
    records = merge_stores(stores)
    if not records:
        raise CliError(EXIT_CONFIG, f"store {out_dir} is empty")
    rep_dir = out_dir / "report"
    rep_dir.mkdir(parents=True, exist_ok=True)
    if args.merge:
        with open(rep_dir / "merged_records.jsonl", "w") as fh:
            for r in records:
                fh.write(canonical(r) + "\n")
    levels, summary = _latest_cascade(records)
    lines = [f"records: {len(records)} (after deduplication over {len(stores)} store(s))"]
    if not levels:
        lines.append("no cascade in the store; nothing to fit")
        (rep_dir / "summary.txt").write_text("\n".join(lines) + "\n")
        print("\n".join(lines))
        return EXIT_OK
    ms = [r.m for r in levels]
    gaps = [r.gap for r in levels]
    taus = [r.tau for r in levels]
    _write_csv(rep_dir / "gap_vs_m.csv", ("m", "gap", "gap_bound"), [{"m": r.m, "gap": r.gap, "gap_bound": gap_bound(r.abar_matrix, r.abarstar_matrix)[1]} for r in levels])
    _write_csv(rep_dir / "tau_vs_m.csv", ("m", "tau"), [{"m": r.m, "tau": "" if r.tau is None else r.tau} for r in levels])
    _write_csv(rep_dir / "V_vs_n.csv", ("n", "V"), [{"n": r.m, "V": r.V} for r in levels])
    fit = None
    dist: list[Optional[float]] = [None] * len(levels)
    fitted: list[Optional[float]] = [None] * len(levels)
    if len(levels) >= 3:
        fit = gap_and_rate(levels)
        ref = np.array(fit.reference)
        dist = [float(np.linalg.norm(r.abar_matrix - ref, 2)) for r in levels]
        if not fit.degenerate:
            fitted = [fit.C * 3.0 ** (-fit.alpha * m) for m in ms]
    _write_csv(
        rep_dir / "rate_line.csv",
        ("m", "distance", "fitted"),
        [{"m": m, "distance": "" if x is None else x, "fitted": "" if y is None else y} for m, x, y in zip(ms, dist, fitted)],
    )
    if fit is None:
        lines.append("insufficient levels for a rate fit")
    elif fit.degenerate:
        lines.append(f"{fit.note}")
    else:
        lines.append(f"alpha = {fit.alpha:.6g}")
        lines.append(f"C = {fit.C:.6g}")
        lines.append(f"fit residual = {fit.residual:.3g} over levels {list(fit.levels_used)}")
    if fit is not None:
        lines.append(f"gap bound holds at every level: {fit.gap_bound_ok}")
    if summary is not None:
        mono = summary["monotonicity"]
        lines.append(f"monotone within band {mono['band']:.3e}: abar {mono['abar_monotone']}, abar* {mono['abarstar_monotone']}, gap {mono['gap_monotone']}")
    lines.append("levels: " + ", ".join(f"m={m} gap={g:.4e}" + ("" if t is None else f" tau={t:.4e}") for m, g, t in zip(ms, gaps, taus)))
    if not args.no_figures:
        from .plotting import plot_rate, plot_series

        plot_series(rep_dir / "gap_vs_m.png", ms, gaps, "level m", "|abar - abar*|", "duality gap")
        plot_series(rep_dir / "tau_vs_m.png", ms, taus, "level m", "tau", "subadditivity defect")
        plot_series(rep_dir / "V_vs_n.png", ms, [r.V for r in levels], "level n", "V", "variance defect")
        plot_rate(rep_dir / "rate_line.png", ms, dist, fitted, None if fit is None or fit.degenerate else fit.alpha)
    (rep_dir / "summary.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hmglab", description="Finite-volume bulk diffusion matrices on Poisson configuration space.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, config_required: bool = True) -> None:
        p.add_argument("--config", required=config_required, help="run configuration file")
        p.add_argument("--force", action="store_true", help="recompute even if the same run is cached")
        p.add_argument("--workers", type=int, default=None, help="worker processes (default: $HMGLAB_WORKERS, then the config)")
        p.add_argument("--seed", type=int, default=None, help="override the configured seed")
        p.add_argument("--out", default=None, help="output directory / result store")

    p = sub.add_parser("compute", help="nu, nu* and J on one or more cubes")
    common(p)
    p.add_argument("--level", type=int, action="append", help="triadic level m of the cube (repeatable, default 0)")
    p.add_argument("--side", type=float, action="append", help="side of a general cube Q_s (repeatable)")
    p.add_argument("--p", default=None, help="slope p, comma separated (default e_1 when q is absent)")
    p.add_argument("--q", default=None, help="flux q, comma separated")
    p.set_defaults(func=cmd_compute)

    p = sub.add_parser("cascade", help="run levels 0..M and write cascade.csv")
    common(p)
    p.set_defaults(func=cmd_cascade)

    p = sub.add_parser("check", help="identity and inequality suites")
    common(p)
    p.add_argument("suite", nargs="?", default="all", choices=("identities", "inequalities", "all"))
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("report", help="plot data and summary from a result store")
    common(p, config_required=False)
    p.add_argument("--merge", action="append", help="additional store directory to merge (repeatable)")
    p.add_argument("--no-figures", action="store_true", help="write CSVs and the summary only")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "workers", None) is not None and args.workers < 1:
        print("error: --workers must be positive", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (GridBudgetError, TruncationError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SolverError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except (InvariantError, InvalidModelError, InadmissibleFieldError) as exc:
        print(f"invariant failure: {exc}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
