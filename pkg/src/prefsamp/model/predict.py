"""Universal kriging from a fitted space-time model."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from ..covariance import matern_correlation, pairwise_distances, range_to_phi
from ..errors import ConfigError, NotPositiveDefiniteError
from .design import Temporal, build_design, trend_columns
from .fit import SpaceTimeModel
from .likelihood import dense_covariance
from .priors import difference_matrix

CHUNK = 2048


@dataclass
class PredictionSurface:
    year: int
    points: np.ndarray      # (G, 2) km
    mean: np.ndarray
    sd: np.ndarray
    spacing_km: float | None = None

    def __len__(self):
        return len(self.mean)

    def write_csv(self, path):
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["x_km", "y_km", "year", "mean", "sd"])
            for (x, y), m, s in zip(self.points, self.mean, self.sd):
                w.writerow([repr(float(x)), repr(float(y)), self.year, repr(float(m)), repr(float(s))])

    @classmethod
    def read_csv(cls, path, spacing_km=None) -> "PredictionSurface":
        with open(path, encoding="utf-8", newline="") as fh:
            rows = list(csv.DictReader(fh))
        if not rows:
            raise ValueError(f"{path}: empty surface")
        years = {int(r["year"]) for r in rows}
        if len(years) != 1:
            raise ValueError(f"{path}: surface must hold a single year")
        pts = np.array([[float(r["x_km"]), float(r["y_km"])] for r in rows])
        return cls(year=years.pop(), points=pts,
                   mean=np.array([float(r["mean"]) for r in rows]),
                   sd=np.array([float(r["sd"]) for r in rows]), spacing_km=spacing_km)


class _Kriger:
    """Shared factorisation of the observation covariance."""

    def __init__(self, model: SpaceTimeModel):
        if model.data is None:
            raise ConfigError("model has no attached observations; load it with the data it was fitted on")
        self.model = model
        design = build_design(model.data, model.structure, model.kappa)
        self.design = design
        cov = dense_covariance(model.hyper, design)
        try:
            self.factor = linalg.cho_factor(cov, lower=True)
        except linalg.LinAlgError:
            # noiseless fits can be numerically singular; add a tiny jitter
            jitter = 1e-10 * float(np.mean(np.diag(cov)))
            try:
                self.factor = linalg.cho_factor(cov + jitter * np.eye(len(cov)), lower=True)
            except linalg.LinAlgError:
                raise NotPositiveDefiniteError("observation covariance is not positive definite") from None
        X = design.X
        self.si_x = linalg.cho_solve(self.factor, X)
        xsx = X.T @ self.si_x
        self.xsx_inv = np.linalg.inv(xsx)
        z = model.data.z
        self.beta = self.xsx_inv @ (self.si_x.T @ z)
        self.alpha = linalg.cho_solve(self.factor, z - X @ self.beta)
        if design.structure.trend.rw_order:
            D = difference_matrix(model.data.n_years, design.structure.trend.rw_order)
            self.qplus = np.linalg.pinv(D.T @ D) / model.hyper.tau_rw
        else:
            self.qplus = None

    def cross_cov(self, points, years):
        """Covariance between latent values at (points, years) and the observations."""
        m = self.model
        h = m.hyper
        data = m.data
        d = pairwise_distances(points, data.obs_coords())
        rho = matern_correlation(d, m.kappa, range_to_phi(h.range_km, m.kappa))
        temporal = m.structure.temporal
        if temporal is Temporal.STATIC:
            tpart = np.full((len(points), data.n), h.sigma_w ** 2)
        else:
            lag = np.abs(np.asarray(years, dtype=float)[:, None] - data.obs_years()[None, :])
            tpart = (h.sigma_w ** 2 / (1 - h.a ** 2)) * (h.a ** lag if h.a != 0 else (lag == 0).astype(float))
        c = tpart * rho
        if self.qplus is not None:
            ti = np.asarray(years, dtype=int) - int(data.years[0])
            c = c + self.qplus[np.ix_(ti, data.year_idx)]
        return c

    def prior_var(self, years):
        h = self.model.hyper
        base = h.sigma_w ** 2 if self.model.structure.temporal is Temporal.STATIC else h.marginal_sd ** 2
        v = np.full(len(years), base)
        if self.qplus is not None:
            ti = np.asarray(years, dtype=int) - int(self.model.data.years[0])
            v = v + np.diag(self.qplus)[ti]
        return v

    def fixed_rows(self, years, retention_rows=None):
        m = self.model
        tcols, _ = trend_columns(m.structure.trend, years, m.year_centre, m.year_width)
        X0 = np.zeros((len(years), self.design.p))
        X0[:, 0] = 1.0
        k = tcols.shape[1]
        X0[:, 1:1 + k] = tcols
        if retention_rows is not None:
            X0[:, 1 + k:] = retention_rows
        return X0

    def predict(self, points, years, retention_rows=None):
        points = np.asarray(points, dtype=float)
        years = np.asarray(years, dtype=int)
        mean = np.empty(len(points))
        var = np.empty(len(points))
        for lo in range(0, len(points), CHUNK):
            sl = slice(lo, lo + CHUNK)
            c = self.cross_cov(points[sl], years[sl])
            X0 = self.fixed_rows(years[sl], None if retention_rows is None else retention_rows[sl])
            mean[sl] = X0 @ self.beta + c @ self.alpha
            sic = linalg.cho_solve(self.factor, c.T)
            u = X0 - sic.T @ self.design.X
            var[sl] = (self.prior_var(years[sl]) - np.einsum("ij,ji->i", c, sic)
                       + np.einsum("ij,jk,ik->i", u, self.xsx_inv, u))
        return mean, np.sqrt(np.maximum(var, 0.0))


def _kriger(model: SpaceTimeModel) -> _Kriger:
    k = model._cache.get("kriger")
    if k is None:
        k = _Kriger(model)
        model._cache["kriger"] = k
    return k


def predict_points(model: SpaceTimeModel, points, years, include_noise: bool = False,
                   retention_rows=None):
    """Predictive mean and SD of ``z`` at arbitrary (point, year) pairs.

    The latent value is predicted by default; ``include_noise`` adds the
    measurement-error variance for comparisons against new observations.
    Dummy retention effects default to the baseline category.
    """
    years = np.asarray(years, dtype=int)
    if years.size and (years.min() < model.years[0] or years.max() > model.years[-1]):
        raise ConfigError(f"prediction years must lie in {int(model.years[0])}..{int(model.years[-1])}")
    mean, sd = _kriger(model).predict(points, years, retention_rows)
    if include_noise:
        sd = np.sqrt(sd ** 2 + 1.0 / model.hyper.tau_eps)
    return mean, sd


def predict(model: SpaceTimeModel, grid, year: int, spacing_km: float | None = None) -> PredictionSurface:
    """Kriged surface of ``z`` over ``grid`` for one modelled ``year``."""
    year = int(year)
    if not model.years[0] <= year <= model.years[-1]:
        raise ConfigError(f"year {year} outside modelled span {int(model.years[0])}..{int(model.years[-1])}")
    grid = np.asarray(grid, dtype=float).reshape(-1, 2)
    mean, sd = predict_points(model, grid, np.full(len(grid), year))
    return PredictionSurface(year=year, points=grid, mean=mean, sd=sd, spacing_km=spacing_km)


def retention_design_rows(model: SpaceTimeModel, site_ids):
    """Dummy rows for known sites, used when predicting at observed locations."""
    names = model.x_names
    ret_names = [nm for nm in names if nm.startswith("retention_")]
    if not ret_names:
        return None
    rows = np.zeros((len(site_ids), len(ret_names)))
    for i, s in enumerate(site_ids):
        cat = model.data.retention.get(s) if model.data.retention else None
        if cat is None:
            continue
        key = f"retention_{getattr(cat, 'value', cat)}"
        if key in ret_names:
            rows[i, ret_names.index(key)] = 1.0
    return rows

