"""Acceptance criteria, one test per criterion.

Each test records a PASS/FAIL line (shown in the terminal summary) before
asserting, so a failing criterion is still reported with its measured value.
"""
import itertools
import json
import math
import os
import shutil
import time
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest
from scipy import special, stats

from prefsamp import cli
from prefsamp.covariance import (
    MaternParams, TemporalParams, bessel_k, bessel_k_scaled, build_covariance, matern_correlation,
)
from prefsamp.geo import sample_uniform
from prefsamp.model import fit_map, predict_points, validate_holdout
from prefsamp.model.design import Structure, build_design
from prefsamp.model.likelihood import Hyper, dense_loglik, evaluate, pack
from prefsamp.pstest import SurfaceLookup, ps_test, spearman_rho
from prefsamp.synthetic import simulate_spacetime, triples_to_data
from conftest import bump_surface, lattice_data, make_model, preferential_sites, record_criterion


def _sim_data(seed, n_sites=30, n_years=30, side=100.0, trend_slope=-0.02):
    rng = np.random.default_rng(seed)
    coords = rng.uniform(0, side, (n_sites, 2))
    years = np.arange(1990, 1990 + n_years)
    triples, _ = simulate_spacetime(coords, years, range_km=25.0, sigma_w=0.27, a=0.95, tau_eps=75.0,
                                    trend=trend_slope * (years - years[0]), rng=rng)
    return triples_to_data(coords, triples)


def test_criterion_01_matern_identities():
    t0 = time.perf_counter()
    phi = 4.0
    u = np.linspace(0.01 * phi, 10 * phi, 1000)
    err05 = np.max(np.abs(matern_correlation(u, 0.5, phi) - np.exp(-u / phi)))
    err15 = np.max(np.abs(matern_correlation(u, 1.5, phi) - (1 + u / phi) * np.exp(-u / phi)))
    g0 = [matern_correlation(0.0, k, phi) for k in (0.5, 1.0, 1.5, 2.0)]
    dt = time.perf_counter() - t0
    ok = err05 <= 1e-10 and err15 <= 1e-10 and all(g == 1.0 for g in g0) and dt < 1
    record_criterion(1, ok, f"max err k=0.5 {err05:.1e}, k=1.5 {err15:.1e}, gamma(0)=1: "
                            f"{all(g == 1.0 for g in g0)}, {dt:.3f}s")
    assert ok


def test_criterion_02_bessel_reference():
    t0 = time.perf_counter()
    k_half = bessel_k(0.5, 1.0)
    err_half = abs(k_half - math.sqrt(math.pi / 2) * math.exp(-1))
    rng = np.random.default_rng(2024)
    nu = rng.uniform(0.5, 2.0, 1000)
    x = rng.uniform(0.01, 50.0, 1000)
    lhs = bessel_k_scaled(nu + 1, x)
    rhs = bessel_k_scaled(nu - 1, x) + (2 * nu / x) * bessel_k_scaled(nu, x)
    rel = float(np.max(np.abs(lhs - rhs) / np.abs(lhs)))
    dt = time.perf_counter() - t0
    ok = err_half <= 1e-10 and rel <= 1e-9 and dt < 1
    record_criterion(2, ok, f"K_1/2(1) err {err_half:.1e}, recurrence rel err {rel:.1e}, {dt:.3f}s")
    assert ok


def _kron_oracle(pts, n_years, sp, tp):
    S = len(pts)
    R = np.empty((S, S))
    for i in range(S):
        for j in range(S):
            u = math.dist(pts[i], pts[j]) / sp.phi
            k = sp.kappa
            R[i, j] = 1.0 if u == 0 else 2 ** (1 - k) / math.gamma(k) * u ** k * special.kv(k, u)
    A = np.array([[tp.a ** abs(s - t) for t in range(n_years)] for s in range(n_years)])
    return tp.marginal_var * np.kron(A, R) + sp.nugget_var * np.eye(S * n_years)


def test_criterion_03_covariance_equivalence():
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(10):
        pts = rng.uniform(0, 50, (3, 2))
        sp = MaternParams(kappa=rng.uniform(0.5, 2), range_km=rng.uniform(2, 60), nugget_var=rng.uniform(0, 0.5))
        tp = TemporalParams(a=rng.uniform(-0.95, 0.95), sigma_w=rng.uniform(0.1, 1.5))
        got = build_covariance(np.tile(pts, (4, 1)), np.repeat(np.arange(4), 3), sp, tp)
        worst = max(worst, float(np.max(np.abs(got - _kron_oracle(pts.tolist(), 4, sp, tp)))))
    n_spd = 0
    for _ in range(100):
        n = int(rng.integers(5, 60))
        sp = MaternParams(kappa=rng.uniform(0.5, 2), range_km=rng.uniform(1, 80), nugget_var=rng.uniform(0.01, 1))
        tp = TemporalParams(a=rng.uniform(-0.95, 0.95), sigma_w=rng.uniform(0.05, 2))
        build_covariance(rng.uniform(0, 100, (n, 2)), rng.integers(0, 8, n), sp, tp, check=True)
        n_spd += 1
    dt = time.perf_counter() - t0
    ok = worst <= 1e-12 and n_spd == 100 and dt < 10
    record_criterion(3, ok, f"max |kron diff| {worst:.1e}, SPD {n_spd}/100, {dt:.2f}s")
    assert ok


def test_criterion_04_likelihood_oracle():
    t0 = time.perf_counter()
    worst, n_cases, max_n = 0.0, 0, 0
    for seed in range(3):
        data = lattice_data(n_sites=6, n_years=7, seed=seed, keep_prob=0.85)
        max_n = max(max_n, data.n)
        for trend in ("none", "linear", "quadratic", "rw1", "rw2"):
            for temporal in ("ar1", "iid", "static"):
                st = Structure(trend, temporal)
                design = build_design(data, st, 1.0)
                h = Hyper(range_km=15.0 + 5 * seed, sigma_w=0.35, a=0.6 if temporal == "ar1" else 0.0,
                          tau_eps=25.0, tau_rw=12.0 if st.trend.rw_order else None, kappa=1.0)
                theta = pack(h, design)
                res = evaluate(theta, design)
                ll_r, ll_ml = dense_loglik(theta, design)
                worst = max(worst, abs(res.loglik_restricted - ll_r), abs(res.loglik_ml - ll_ml))
                n_cases += 1
    dt = time.perf_counter() - t0
    ok = worst <= 1e-8 and max_n <= 40 and dt < 10
    record_criterion(4, ok, f"{n_cases} cases (n <= {max_n}), max |diff| {worst:.1e}, {dt:.2f}s")
    assert ok


def test_criterion_05_kriging_interpolation():
    t0 = time.perf_counter()
    data = lattice_data(n_sites=15, n_years=6, seed=5, keep_prob=0.8)
    h = Hyper(range_km=30.0, sigma_w=0.3, a=0.9, tau_eps=math.inf, tau_rw=None, kappa=1.0)
    model = make_model(data, h, trend="linear")
    mean, _ = predict_points(model, data.obs_coords(), data.obs_years())
    err = float(np.max(np.abs(mean - data.z)))
    dt = time.perf_counter() - t0
    ok = err <= 1e-6 and dt < 5
    record_criterion(5, ok, f"max |pred - obs| {err:.1e} on {data.n} points, {dt:.2f}s")
    assert ok


def test_criterion_06_simulation_recovery():
    t0 = time.perf_counter()
    est = []
    for seed in range(10):
        m = fit_map(_sim_data(seed), trend="rw1")
        est.append((m.hyper.range_km, m.hyper.sigma_w, m.hyper.a))
    r, s, a = np.median(np.array(est), axis=0)
    dt = time.perf_counter() - t0
    ok = (abs(r / 25.0 - 1) <= 0.30 and abs(s / 0.27 - 1) <= 0.15 and abs(a / 0.95 - 1) <= 0.15
          and dt < 300)
    record_criterion(6, ok, f"median range {r:.2f} (25), sigma_w {s:.4f} (0.27), a {a:.4f} (0.95), {dt:.0f}s")
    assert ok


def test_criterion_07_pstest_calibration():
    t0 = time.perf_counter()
    pvals = []
    for trial in range(200):
        poly, surf = bump_surface(trial)
        rng = np.random.default_rng(10_000 + trial)
        pts = sample_uniform(poly, 25, rng)
        resp = SurfaceLookup(surf)(pts)
        pvals.append(ps_test(pts, resp, surf, poly, k=3, m=199, seed=trial).p_lower)
    # add-one p-values live on {1/200, ..., 1}; jitter within each atom for the continuous KS test
    u = np.asarray(pvals) - np.random.default_rng(0).uniform(0, 1 / 200, len(pvals))
    ks = stats.kstest(u, "uniform")
    dt = time.perf_counter() - t0
    ok = ks.pvalue > 0.01 and dt < 180
    record_criterion(7, ok, f"KS p {ks.pvalue:.3f} over 200 trials (m=199), {dt:.0f}s")
    assert ok


def test_criterion_08_pstest_power():
    t0 = time.perf_counter()
    ps, rhos = [], []
    for trial in range(50):
        poly, surf = bump_surface(1000 + trial)
        pts, resp = preferential_sites(surf, 25, np.random.default_rng(trial))
        r = ps_test(pts, resp, surf, poly, k=3, m=199, seed=trial)
        ps.append(r.p_lower)
        rhos.append(r.rho_obs)
    p_med, rho_med = float(np.median(ps)), float(np.median(rhos))
    dt = time.perf_counter() - t0
    ok = p_med < 0.05 and rho_med < -0.4 and dt < 120
    record_criterion(8, ok, f"median p_lower {p_med:.4f}, median rho {rho_med:.3f} over 50 trials, {dt:.0f}s")
    assert ok


def _midranks(v):
    return [Fraction(sum(w < x for w in v)) + Fraction(sum(w == x for w in v) + 1, 2) for x in v]


def _spearman_oracle(x, y):
    rx, ry = _midranks(x), _midranks(y)
    mx, my = sum(rx) / len(rx), sum(ry) / len(ry)
    num = sum((a - mx) * (b - my) for a, b in zip(rx, ry))
    dx = sum((a - mx) ** 2 for a in rx)
    dy = sum((b - my) ** 2 for b in ry)
    return float(num) / math.sqrt(float(dx) * float(dy))


def test_criterion_09_spearman_brute_force():
    t0 = time.perf_counter()
    family = [1, 2, 2, 3, 3, 3, 4]
    y_all = [2, 7, 1, 8, 2, 8, 1]
    worst, n_checked = 0.0, 0
    for n in range(3, 8):
        y = y_all[:n]
        for perm in set(itertools.permutations(family[:n])):
            if len(set(perm)) < 2:
                continue
            got = spearman_rho(perm, y)
            worst = max(worst, abs(got - _spearman_oracle(perm, y)))
            n_checked += 1
    dt = time.perf_counter() - t0
    # exact mid-ranks; the only difference allowed is float rounding of the final ratio
    ok = worst <= 4 * np.finfo(float).eps and dt < 30
    record_criterion(9, ok, f"{n_checked} permutations, max |diff| {worst:.1e}, {dt:.2f}s")
    assert ok


def test_criterion_10_real_data(tmp_path):
    src = os.environ.get("PREFSAMP_SOCAB_CONFIG")
    if not src or not Path(src).is_file():
        record_criterion(10, True, "real SOCAB data not available (set PREFSAMP_SOCAB_CONFIG)", skipped=True)
        pytest.skip("real SOCAB data not available")
    raw = json.loads(Path(src).read_text())
    base = Path(src).parent
    raw["paths"] = {k: str((base / v).resolve()) for k, v in raw.get("paths", {}).items()}
    raw["paths"]["output_dir"] = str(tmp_path / "out")
    raw.setdefault("pstest", {}).update({"k": 3, "m": 1000, "years": [2019]})
    raw["predict"] = {**raw.get("predict", {}), "years": [2019]}
    cfg = tmp_path / "config.json"
    cfg.write_text(json.dumps(raw))
    for cmd in ("ingest", "fit", "predict", "pstest"):
        assert cli.main([cmd, "-c", str(cfg)]) == 0
    res = json.loads((tmp_path / "out" / "pstest" / "results.json").read_text())
    e = next(e for e in res["entries"] if e["year"] == 2019)
    ok = e["rho"] is not None and abs(e["rho"] + 0.822) <= 0.15 and e["p_lower"] < 0.01
    record_criterion(10, ok, f"2019 rho {e['rho']}, p_lower {e['p_lower']} (target -0.822, < 0.01)")
    assert ok


def test_criterion_11_holdout():
    t0 = time.perf_counter()
    data = _sim_data(5, n_sites=30, n_years=27)
    rep = validate_holdout(data, fraction=0.1, seed=1, trend="rw1")
    share = rep.outside_share
    dt = time.perf_counter() - t0
    ok = 0.01 <= share <= 0.12 and dt < 180
    record_criterion(11, ok, f"outside-95% share {share:.3f} of {rep.n_holdout} held out "
                             f"(recorded reference {rep.reference_outside_share:.2f}), {dt:.0f}s")
    assert ok


def test_criterion_12_cli_determinism(tmp_path):
    t0 = time.perf_counter()
    commands = ("ingest", "variogram", "fit", "predict", "validate", "pstest", "compare", "report")
    snapshots = []
    for name in ("a", "b"):
        root = tmp_path / name
        assert cli.main(["synth", str(root)]) == 0
        for cmd in commands:
            assert cli.main([cmd, "-c", str(root / "config.json")]) == 0, cmd
        out = root / "out"
        snapshots.append({p.relative_to(out).as_posix(): p.read_bytes() for p in out.rglob("*") if p.is_file()})
    # rerun every command in place as well
    root = tmp_path / "a"
    for cmd in commands:
        assert cli.main([cmd, "-c", str(root / "config.json")]) == 0, cmd
    out = root / "out"
    again = {p.relative_to(out).as_posix(): p.read_bytes() for p in out.rglob("*") if p.is_file()}
    differ = sorted(k for k in snapshots[0].keys() | snapshots[1].keys() | again.keys()
                    if not (snapshots[0].get(k) == snapshots[1].get(k) == again.get(k)))
    dt = time.perf_counter() - t0
    ok = not differ
    record_criterion(12, ok, f"{len(snapshots[0])} output files, {len(differ)} differ "
                             f"across 3 runs of {len(commands)} commands, {dt:.0f}s")
    assert ok, differ
