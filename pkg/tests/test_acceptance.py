"""Acceptance criteria 1-8, one test each.

Every test prints a single ``criterion N: PASS|FAIL ...`` line (outside
pytest's capture, so it shows up in the run log) and then asserts.
"""

import math

import numpy as np
import pytest

from hmglab.cascade import gap_and_rate, monotonicity_report, run_cascade, step4_diagnostic, two_scale_check
from hmglab.cli import calibrate_band, main
from hmglab.coefficients import constant_model, crowding_model
from hmglab.config import parse_config
from hmglab.configspace import cube, sector_weights, triadic_cube
from hmglab.harness import identities_on_cube, inequality_suite
from hmglab.quantities import abar_pair, j_value, nu, nu_star
from hmglab.sectorsolver import Context, Discretization
from oracles import DenseCube, OracleModel

CASCADE_CFG = """schema = 1
model = crowding
d = 1
rho = 1.0
Lambda = 2.0
n_max = 3
h = 0.25
h_plan = 3:0.5
levels = 3
mode = collar
tol = 1e-10
"""


@pytest.fixture
def verdict(capsys):
    def emit(n: int, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'} {detail}")

    return emit


@pytest.fixture(scope="module")
def crowding_cascade():
    cfg = parse_config(CASCADE_CFG)
    records = run_cascade(range(cfg.levels + 1), cfg.context(), cfg.plan())
    return cfg, records, calibrate_band(cfg)


def test_criterion_1_constant_coefficient_exactness(verdict):
    worst = {"abar": 0.0, "abarstar": 0.0, "nu": 0.0, "J": -math.inf}
    for c in (1.0, 2.0):
        ctx = Context(constant_model(c), Discretization(h=0.25, n_max=3, rho=1.0, allow_low_mass=True), "collar")
        for m in range(3):
            box = triadic_cube(m)
            abar, astar = abar_pair(box, ctx)
            worst["abar"] = max(worst["abar"], abs(abar[0, 0] - c))
            worst["abarstar"] = max(worst["abarstar"], abs(astar[0, 0] - c))
            for p in (1.0, -0.6):
                worst["nu"] = max(worst["nu"], abs(nu(box, [p], ctx).value - 0.5 * c * p * p))
                worst["J"] = max(worst["J"], j_value(box, [p], [c * p], ctx).value)
    ok = max(worst["abar"], worst["abarstar"], worst["nu"]) <= 1e-8 and worst["J"] <= 1e-8
    verdict(1, ok, " ".join(f"{k}={v:.2e}" for k, v in worst.items()))
    assert ok


def test_criterion_2_duality_and_monotonicity(crowding_cascade, verdict):
    cfg, records, band = crowding_cascade
    rng = np.random.default_rng(2)
    # 100 pairs from the unit ball of R^2, i.e. |(p, q)| <= 1
    ang = rng.uniform(0, 2 * np.pi, 100)
    rad = np.sqrt(rng.uniform(0, 1, 100))
    P, Q = rad * np.cos(ang), rad * np.sin(ang)
    min_J, min_eig, form_err = math.inf, math.inf, 0.0
    for r in records:
        a, s = r.abar[0][0], r.abarstar[0][0]
        Jq = 0.5 * a * P**2 + 0.5 * Q**2 / s - P * Q
        ctx = cfg.context(r.h)
        direct = [j_value(triadic_cube(r.m), [P[k]], [Q[k]], ctx).value for k in range(5)]
        form_err = max(form_err, max(abs(x - y) for x, y in zip(direct, Jq[:5])))
        min_J = min(min_J, float(Jq.min()), min(direct))
        min_eig = min(min_eig, float(np.linalg.eigvalsh(r.abar_matrix - r.abarstar_matrix).min()))
    mono = monotonicity_report(records, band)
    ok = min_J >= -1e-9 and min_eig >= -1e-9 and form_err <= 1e-8 and mono["abar_monotone"] and mono["abarstar_monotone"]
    ups = [f"{p['abar_increase']:.3e}" for p in mono["pairs"]]
    verdict(
        2,
        ok,
        f"min J={min_J:.2e} min eig={min_eig:.2e} band={band:.1e} "
        f"abar increases={ups} abar monotone={mono['abar_monotone']} abar* monotone={mono['abarstar_monotone']}",
    )
    assert min_J >= -1e-9 and min_eig >= -1e-9 and form_err <= 1e-8
    assert mono["abarstar_monotone"]
    assert mono["abar_monotone"], "abar(cube_m) increases with m beyond the band"


def test_criterion_3_identity_suite(verdict):
    cfg = parse_config(CASCADE_CFG.replace("h_plan = 3:0.5\n", "") + "identity_tol = 1e-8\n")
    checks = []
    for side in (1.0, 3.0):
        checks += identities_on_cube(cube(side), cfg.context(), cfg.identity_tol, cfg.seed)
    failed = [f"{c.name}@{c.where}={c.value:.2e}" for c in checks if not c.passed]
    worst = max(c.value for c in checks if c.bound == cfg.identity_tol)
    verdict(3, not failed, f"{len(checks)} checks, worst relative residual {worst:.2e}" + (f" failed: {failed}" if failed else ""))
    assert not failed


def test_criterion_4_two_scale_and_gap_bound(crowding_cascade, verdict):
    cfg, records, _ = crowding_cascade
    slack = 1e-6
    # the level plan mixes spacings, and both optimizers of a pair must share one grid
    ctx = cfg.context(0.5)
    pairs = []
    for n in range(1, len(records)):
        q = records[n].abarstar[0][0]
        for k in range(n):
            lhs, rhs = two_scale_check(n, k, [1.0], [q], ctx)
            pairs.append((n, k, lhs, rhs))
    bad_pairs = [(n, k) for n, k, lhs, rhs in pairs if lhs > rhs + slack]
    fit = gap_and_rate(records, slack=slack)
    og_bad = [r.m for r in records if r.optimizer_gap > 2 * r.J[0] + 1e-8]
    ok = not bad_pairs and fit.gap_bound_ok and not og_bad
    detail = " ".join(f"({n},{k}) {lhs:.3e}<={rhs:.3e}" for n, k, lhs, rhs in pairs)
    verdict(4, ok, f"two-scale violations={bad_pairs} gap bound ok={fit.gap_bound_ok} optimizer-gap violations={og_bad}; {detail}")
    assert fit.gap_bound_ok
    assert not og_bad
    assert not bad_pairs, f"two-scale comparison fails on level pairs {bad_pairs}"


def test_criterion_5_oracle_equivalence(verdict):
    worst = 0.0
    model = OracleModel("crowding", Lambda=2.0)
    oc = DenseCube(1.0, 0.5, 2, 1.0, model)
    box = cube(1.0)
    for mode in ("interior", "collar"):
        ctx = Context(crowding_model(2.0), Discretization(h=0.5, n_max=2, allow_low_mass=True), mode)
        for p in (1.0, -0.7):
            r = nu(box, [p], ctx)
            ov, of = oc.nu(p)
            worst = max(worst, abs(r.value - ov))
            for n in range(3):
                coords = r.minimizer.grids[n].node_coordinates()
                worst = max(worst, float(np.abs(oc.at_nodes(of[n], n, coords) - r.minimizer.values[n][0]).max()))
            rs = nu_star(box, [p], ctx)
            sv, sf = oc.nu_star(p) if mode == "interior" else oc.nu_star_collar(p)[:2]
            worst = max(worst, abs(rs.value - sv))
            for n in range(1, 3):
                coords = rs.maximizer.grids[n].node_coordinates()
                avg = rs.maximizer.state_probs[n] @ rs.maximizer.values[n]
                worst = max(worst, float(np.abs(oc.at_nodes(sf[n], n, coords) - avg).max()))
            # J from the solver against nu + nu* - pq from the oracle
            worst = max(worst, abs(j_value(box, [p], [p], ctx).value - (ov + sv - p * p)))
    w = sector_weights(1.0, 1.0, 2, allow_low_mass=True).as_array()
    pmf = np.array([math.exp(-1.0) / math.factorial(n) for n in range(3)])
    wdiff = float(np.abs(w - pmf / pmf.sum()).max())
    ok = worst <= 1e-8 and wdiff <= 1e-12
    verdict(5, ok, f"max solver-oracle difference {worst:.2e}, weight difference {wdiff:.1e}")
    assert ok


def test_criterion_6_functional_inequality_harness(verdict):
    cfg = parse_config(
        "schema = 1\nmodel = crowding\nLambda = 2.0\nn_max = 3\nh = 0.5\nmode = interior\nmc_samples = 10000\n"
    )
    entries = inequality_suite(cfg, workers=3)
    wanted = {"snk_jensen_exact", "snk_jensen_mc", "snk_martingale", "localization_jensen", "bracket_monotone", "weak_caccioppoli"}
    assert wanted <= {e["inequality"] for e in entries}
    failed = [f"{e['inequality']}@{e['field']}" for e in entries if not e["holds"]]
    cacc = [e for e in entries if e["inequality"] == "weak_caccioppoli"]
    assert len(cacc) == 3 and all(e["detail"]["theta_prime"] == pytest.approx(0.8) for e in cacc)
    verdict(6, not failed, f"{len(entries)} entries" + (f" failed: {failed}" if failed else " all hold"))
    assert not failed


def test_criterion_7_rate_diagnostics(crowding_cascade, verdict):
    cfg, records, band = crowding_cascade
    fit = gap_and_rate(records)
    mono = monotonicity_report(records, band)
    r, beta = 0.5, 2.0
    out = step4_diagnostic([r**n for n in range(8)], beta)
    w = 3.0 ** (-beta / 2)
    closed = [(r ** (m + 1) - w ** (m + 1)) / (r - w) for m in range(8)]
    step4_ok = out["contraction"] and abs(out["theta_hat"] - closed[-1] / closed[-2]) <= 1e-6 and out["theta_hat"] < 1
    alpha_ok = fit.alpha is not None and fit.alpha > 0
    ok = alpha_ok and mono["gap_monotone"] and step4_ok
    gaps = [f"{x.gap:.4e}" for x in records]
    verdict(7, ok, f"alpha={fit.alpha} gaps={gaps} gap monotone={mono['gap_monotone']} step4 theta={out['theta_hat']:.6f}")
    assert alpha_ok
    assert step4_ok
    assert mono["gap_monotone"], "the duality gap grows between levels beyond the band"


def test_criterion_8_determinism(tmp_path, verdict):
    text = (
        "schema = 1\nmodel = crowding\nLambda = 2.0\nn_max = 2\nh = 0.5\nlevels = 2\nmode = collar\nseed = 11\n"
    )
    logs = []
    for run, workers in (("a", "1"), ("b", "2")):
        cfg = tmp_path / f"{run}.cfg"
        out = tmp_path / run
        cfg.write_text(text + f"out = {out}\n")
        assert main(["compute", "--config", str(cfg), "--level", "0", "--level", "1", "--p", "1.0", "--q", "1.2", "--workers", workers]) == 0
        assert main(["cascade", "--config", str(cfg)]) == 0
        logs.append((out / "records.jsonl").read_bytes())
    ok = logs[0] == logs[1] and len(logs[0]) > 0
    verdict(8, ok, f"record logs {len(logs[0])} and {len(logs[1])} bytes, identical={logs[0] == logs[1]}")
    assert ok
