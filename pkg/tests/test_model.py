import math

import numpy as np
import pytest
from scipy import integrate, stats

from prefsamp.errors import ConfigError, DataError
from prefsamp.ingest import Observation, Retention
from prefsamp.model import (
    OptimizerConfig, PcPriorSpec, SpaceTimeData, SpaceTimeModel, Structure, compare_structures,
    fit_map, fit_trend_regression, predict, predict_points, rw_penalty, validate_holdout,
)
from prefsamp.model.design import build_design
from prefsamp.model.fit import objective_gradient
from prefsamp.model.likelihood import Hyper, dense_covariance, dense_loglik, evaluate, pack
from prefsamp.model.priors import pc_prec_logdensity, pc_prior_logdensity_matern
from conftest import lattice_data, make_model

SPEC = PcPriorSpec()


def test_pc_range_tail_probability():
    lam_s = -math.log(0.01) / 35.0
    # marginal over r: strip the sigma factor
    dens = lambda r: math.exp(pc_prior_logdensity_matern(r, 0.0, SPEC) - math.log(lam_s))
    lower, _ = integrate.quad(dens, 0, 6, epsabs=1e-14)
    upper, _ = integrate.quad(dens, 6, np.inf, epsabs=1e-14)
    assert lower == pytest.approx(0.01, abs=1e-8)
    assert lower + upper == pytest.approx(1.0, abs=1e-8)


def test_pc_range_alternative_threshold():
    spec = PcPriorSpec(range_km=3.0)
    lam_s = -math.log(0.01) / 35.0
    dens = lambda r: math.exp(pc_prior_logdensity_matern(r, 0.0, spec) - math.log(lam_s))
    assert integrate.quad(dens, 0, 3)[0] == pytest.approx(0.01, abs=1e-8)


def test_pc_sigma_tail_closed_form():
    lam_s = -math.log(0.01) / 35.0
    assert math.exp(-lam_s * 35.0) == pytest.approx(0.01)
    # the sigma factor integrates to the stated tail
    r_part = pc_prior_logdensity_matern(10.0, 0.0, SPEC) - math.log(lam_s)
    dens = lambda s: math.exp(pc_prior_logdensity_matern(10.0, s, SPEC) - r_part)
    assert integrate.quad(dens, 35, np.inf)[0] == pytest.approx(0.01, rel=1e-8)


def test_pc_density_finite_positive():
    r = np.geomspace(0.5, 1e4, 50)
    s = np.geomspace(1e-4, 100, 50)
    assert np.all(np.isfinite(pc_prior_logdensity_matern(r[:, None], s[None, :], SPEC)))


def test_pc_precision_prior_tail():
    u, alpha = 0.37, 0.01
    lam = -math.log(alpha) / u
    # P(tau^-1/2 > u) = P(tau < u^-2)
    p = integrate.quad(lambda t: math.exp(pc_prec_logdensity(t, u, alpha)), 0, u ** -2, epsabs=1e-13)[0]
    assert p == pytest.approx(alpha, rel=1e-6)
    assert lam > 0


def test_rw_penalty_cases():
    tau = 2.5
    const = rw_penalty(np.full(6, 3.0), 1, tau)
    assert const == pytest.approx(0.5 * 5 * math.log(tau / (2 * math.pi)))
    line = rw_penalty(np.arange(7) * 0.3 - 1, 2, tau)
    assert line == pytest.approx(0.5 * 5 * math.log(tau / (2 * math.pi)))
    rng = np.random.default_rng(0)
    v = rng.standard_normal(9)
    ss = sum((v[i + 1] - v[i]) ** 2 for i in range(8))
    assert rw_penalty(v, 1, tau) == pytest.approx(0.5 * 8 * math.log(tau / (2 * math.pi)) - 0.5 * tau * ss)
    with pytest.raises(ValueError):
        rw_penalty(v[:2], 2, tau)


def test_rw_penalty_invariances():
    rng = np.random.default_rng(1)
    v = rng.standard_normal(12)
    t = np.arange(12)
    assert rw_penalty(v + 4.2, 1, 1.3) == pytest.approx(rw_penalty(v, 1, 1.3), rel=1e-12)
    assert rw_penalty(v + 4.2 - 0.7 * t, 2, 1.3) == pytest.approx(rw_penalty(v, 2, 1.3), rel=1e-12)


STRUCTURES = [Structure(tr, tm) for tr in ("none", "linear", "quadratic", "rw1", "rw2")
              for tm in ("ar1", "iid", "static")]


@pytest.mark.parametrize("structure", STRUCTURES, ids=lambda s: s.label)
def test_likelihood_matches_dense(structure):
    data = lattice_data(n_sites=6, n_years=7, seed=3, keep_prob=0.8)
    assert data.n <= 40
    design = build_design(data, structure, 1.0)
    h = Hyper(range_km=18.0, sigma_w=0.4, a=0.7 if structure.temporal.value == "ar1" else 0.0,
              tau_eps=20.0, tau_rw=15.0 if structure.trend.rw_order else None, kappa=1.0)
    res = evaluate(pack(h, design), design)
    ll_r, ll_ml = dense_loglik(pack(h, design), design)
    assert res.loglik_restricted == pytest.approx(ll_r, abs=1e-8)
    assert res.loglik_ml == pytest.approx(ll_ml, abs=1e-8)


def test_latent_means_match_dense_conditional():
    data = lattice_data(n_sites=5, n_years=6, seed=4, keep_prob=0.85)
    structure = Structure("rw1", "ar1")
    design = build_design(data, structure, 1.0)
    h = Hyper(range_km=25.0, sigma_w=0.3, a=0.8, tau_eps=30.0, tau_rw=10.0, kappa=1.0)
    res = evaluate(pack(h, design), design, want_latent=True)
    cov = dense_covariance(h, design)
    resid = data.z - design.X @ res.beta
    alpha = np.linalg.solve(cov, resid)
    field_cov = cov - np.eye(data.n) / h.tau_eps
    from prefsamp.model.priors import difference_matrix
    D = difference_matrix(data.n_years, 1)
    q = np.linalg.pinv(D.T @ D) / h.tau_rw
    rw_cov = q[:, data.year_idx]
    field_cov = field_cov - rw_cov[data.year_idx]
    np.testing.assert_allclose(res.latent["trend"], rw_cov @ alpha, atol=1e-10)
    got = res.latent["field"][data.year_idx, data.site_idx]
    np.testing.assert_allclose(got, field_cov @ alpha, atol=1e-10)


def _const_obs(value, n_sites=5, n_years=4):
    rng = np.random.default_rng(0)
    xy = rng.uniform(0, 40, (n_sites, 2))
    return [Observation(f"s{s}", xy[s, 0], xy[s, 1], 2000 + t, 1.0, z=value)
            for s in range(n_sites) for t in range(n_years)]


def test_fit_constant_field():
    m = fit_map(_const_obs(0.42), trend="rw1")
    assert m.beta0 == pytest.approx(0.42, abs=1e-6)
    assert np.max(np.abs(m.trend)) < 1e-6
    assert math.isfinite(m.objective)


def test_fit_needs_two_sites():
    with pytest.raises(DataError):
        fit_map(_const_obs(0.1, n_sites=1))


@pytest.fixture(scope="module")
def fitted():
    data = lattice_data(n_sites=15, n_years=10, seed=7, side=80.0, range_km=25.0, sigma_w=0.27,
                        a=0.9, tau_eps=75.0)
    return fit_map(data, trend="rw1")


def test_gradient_at_optimum(fitted):
    g = objective_gradient(fitted)
    assert np.linalg.norm(g) / max(1.0, abs(fitted.objective)) <= 1e-3


def test_fit_deterministic(fitted):
    again = fit_map(fitted.data, trend="rw1")
    assert np.array_equal(again.theta, fitted.theta)


def test_save_load_round_trip(fitted, tmp_path):
    fitted.save(tmp_path / "m.json")
    back = SpaceTimeModel.load(tmp_path / "m.json", fitted.data)
    np.testing.assert_array_equal(back.theta, fitted.theta)
    np.testing.assert_array_equal(back.trend, fitted.trend)
    assert back.hyper == fitted.hyper
    pts = fitted.data.coords[:3]
    a = predict_points(fitted, pts, [2003] * 3)
    b = predict_points(back, pts, [2003] * 3)
    np.testing.assert_array_equal(a[0], b[0])


def test_load_rejects_other_data(fitted, tmp_path):
    fitted.save(tmp_path / "m.json")
    other = lattice_data(n_sites=15, n_years=10, seed=8)
    with pytest.raises(DataError):
        SpaceTimeModel.load(tmp_path / "m.json", other)


def test_predict_year_outside_span(fitted):
    with pytest.raises(ConfigError):
        predict(fitted, fitted.data.coords, 1999)


def test_predict_sd_monotone(fitted):
    far = fitted.data.coords.max(axis=0) + 200.0
    surf = predict(fitted, np.vstack([fitted.data.coords, far]), 2005)
    assert np.all(surf.sd >= 0)
    assert np.all(surf.sd[:-1] <= surf.sd[-1])


def test_noiseless_interpolation():
    data = lattice_data(n_sites=10, n_years=5, seed=2, keep_prob=0.8)
    h = Hyper(range_km=30.0, sigma_w=0.3, a=0.8, tau_eps=math.inf, tau_rw=None, kappa=1.0)
    model = make_model(data, h)
    mean, sd = predict_points(model, data.obs_coords(), data.obs_years())
    np.testing.assert_allclose(mean, data.z, atol=1e-6)
    assert np.all(sd < 1e-3)


def test_two_site_kriging_formula():
    coords = np.array([[0.0, 0.0], [10.0, 0.0]])
    z = np.array([[0.3, -0.1], [0.5, 0.2]])   # (year, site)
    data = SpaceTimeData(site_ids=["a", "b"], coords=coords, years=np.array([2000, 2001]),
                         site_idx=np.array([0, 1, 0, 1]), year_idx=np.array([0, 0, 1, 1]),
                         z=z.ravel())
    h = Hyper(range_km=20.0, sigma_w=0.5, a=0.0, tau_eps=10.0, tau_rw=None, kappa=1.0)
    model = make_model(data, h, temporal="iid")
    x0 = np.array([[3.0, 4.0]])
    mean, sd = predict_points(model, x0, [2001])
    from prefsamp.covariance import matern_correlation, range_to_phi
    phi = range_to_phi(20.0, 1.0)
    v, nug = 0.25, 0.1
    c = v * matern_correlation(10.0, 1.0, phi)
    k = v * matern_correlation(np.array([5.0, math.hypot(7, 4)]), 1.0, phi)
    det = (v + nug) ** 2 - c ** 2
    inv = np.array([[v + nug, -c], [-c, v + nug]]) / det
    beta = z.mean()
    expect = beta + k @ inv @ (z[1] - beta)
    assert mean[0] == pytest.approx(expect, abs=1e-12)


def test_holdout_single_point():
    data = lattice_data(n_sites=8, n_years=5, seed=5)
    rep = validate_holdout(data, fraction=0.01, seed=3, trend="none")
    assert rep.n_holdout == 1 and len(rep.rows) == 1
    assert rep.reference_outside_share == 0.35


def test_holdout_fraction_validated():
    with pytest.raises(ConfigError):
        validate_holdout(lattice_data(), fraction=0.6)


def test_holdout_drops_emptied_year(caplog):
    data = lattice_data(n_sites=6, n_years=5, seed=1)
    # year 2002 has a single observation in this subset
    keep = (data.obs_years() != 2002) | (data.site_idx == 0)
    sub = data.subset(keep)
    for seed in range(200):
        rng = np.random.default_rng(seed)
        held = rng.choice(sub.n, size=math.ceil(0.2 * sub.n), replace=False)
        if np.any(sub.obs_years()[held] == 2002):
            break
    rep = validate_holdout(sub, fraction=0.2, seed=seed, trend="none")
    assert rep.dropped_years == [2002]
    assert all(r["year"] != 2002 for r in rep.by_year)
    assert "2002" in caplog.text


def test_trend_regression_exact_line():
    years = np.arange(1986, 2020)
    r = fit_trend_regression(years, 0.5 - 0.027 * (years - 1986), order=2)
    assert r.r2 == pytest.approx(1.0)
    assert abs(r.coefficients[2]) < 1e-10
    lin = fit_trend_regression(years, 0.5 - 0.027 * (years - 1986), order=1)
    assert lin.coefficients[1] == pytest.approx(-0.027, abs=1e-12)


def test_trend_regression_against_scipy():
    rng = np.random.default_rng(0)
    years = np.arange(1990, 2010)
    y = 0.1 - 0.02 * (years - 1990) + rng.normal(0, 0.05, len(years))
    r = fit_trend_regression(years, y, order=1)
    ref = stats.linregress(years, y)
    assert r.coefficients[1] == pytest.approx(ref.slope, rel=1e-10)
    assert r.r2 == pytest.approx(ref.rvalue ** 2, rel=1e-10)
    n = len(y)
    assert r.adj_r2 == pytest.approx(1 - (1 - ref.rvalue ** 2) * (n - 1) / (n - 2), rel=1e-10)


def test_trend_regression_curvature_detected():
    rng = np.random.default_rng(1)
    years = np.arange(1986, 2020)
    t = years - 2003
    y = 0.002 * t ** 2 - 0.02 * t + rng.normal(0, 0.03, len(t))
    assert fit_trend_regression(years, y, order=2).f_pvalue < 0.01


def test_trend_regression_f_statistic_oracle():
    rng = np.random.default_rng(2)
    years = np.arange(2000, 2012).astype(float)
    y = rng.standard_normal(12)
    r = fit_trend_regression(years, y, order=2)
    r1 = np.polyfit(years - 2005, y, 1, full=True)[1][0]
    r2 = np.polyfit(years - 2005, y, 2, full=True)[1][0]
    assert r.f_stat == pytest.approx((r1 - r2) / (r2 / 9), rel=1e-8)


def test_trend_regression_needs_years():
    with pytest.raises(DataError):
        fit_trend_regression([2000, 2001, 2002], [1, 2, 3])
    with pytest.raises(DataError):
        fit_trend_regression([2000, 2000, 2001, 2001], [1, 2, 3, 4])


def test_compare_duplicates_identical():
    data = lattice_data(n_sites=8, n_years=5, seed=9)
    rows = compare_structures(data, [Structure("none", "ar1"), Structure("none", "ar1"),
                                     Structure("linear", "iid")])
    assert rows[0]["aic"] == rows[1]["aic"]
    assert sorted(r["rank"] for r in rows) == [1, 2, 3]


def test_compare_reports_row_errors():
    data = lattice_data(n_sites=8, n_years=5, seed=9)
    rows = compare_structures(data, [{"trend": "none"}, {"trend": "none", "retention_effects": True}])
    assert rows[0]["error"] is None and rows[1]["error"].startswith("DataError")
    assert rows[1]["rank"] is None


def test_compare_needs_two():
    with pytest.raises(ValueError):
        compare_structures(lattice_data(), [Structure()])


def test_compare_ranks_true_structure():
    wins = 0
    for seed in range(10):
        data = lattice_data(n_sites=12, n_years=8, seed=100 + seed, side=60.0, range_km=25.0,
                            sigma_w=0.3, a=0.8, tau_eps=75.0)
        rows = compare_structures(data, [Structure("none", t) for t in ("ar1", "iid", "static")])
        wins += rows[0]["rank"] == 1
    assert wins >= 8


def test_retention_effects_fit():
    data = lattice_data(n_sites=12, n_years=6, seed=11)
    cats = [Retention.CONTINUOUS, Retention.ADDED, Retention.REMOVED, Retention.ADDED_THEN_REMOVED]
    data.retention = {sid: cats[i % 4] for i, sid in enumerate(data.site_ids)}
    m = fit_map(data, trend="linear", retention_effects=True)
    assert set(m.fixed_effects) >= {"retention_Continuous", "retention_Removed", "retention_AddedThenRemoved"}
    assert "retention_Added" not in m.fixed_effects


def test_optimizer_config_validation():
    with pytest.raises(ConfigError):
        OptimizerConfig(method="BFGS")
    with pytest.raises(ConfigError):
        OptimizerConfig(n_starts=0)


def test_nelder_mead_agrees(fitted):
    nm = fit_map(fitted.data, trend="rw1", optimizer=OptimizerConfig(method="Nelder-Mead"))
    assert nm.objective == pytest.approx(fitted.objective, abs=1e-3)
