"""Empirical-Bayes (MAP) fitting of the space-time model."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy import optimize

from ..covariance import MaternParams
from ..errors import ConfigError, DataError, FitError, NumericalError
from .design import SpaceTimeData, Structure, Temporal, TrendKind, build_design, trend_columns
from .likelihood import Hyper, evaluate, log_prior, pack, unpack
from .priors import PcPriorSpec

log = logging.getLogger(__name__)

PENALTY = 1e10
# start lattice: (range as a fraction of the site-cloud diameter, AR(1) coefficient)
START_LATTICE = ((0.05, 0.5), (0.2, 0.8), (0.6, 0.95))


@dataclass(frozen=True)
class OptimizerConfig:
    method: str = "L-BFGS-B"   # or "Nelder-Mead"
    max_iter: int = 400
    fd_step: float = 1e-5
    gtol: float = 1e-6
    n_starts: int = 3

    def __post_init__(self):
        if self.method not in ("L-BFGS-B", "Nelder-Mead"):
            raise ConfigError(f"optimizer.method must be L-BFGS-B or Nelder-Mead, got {self.method!r}")
        if not 1 <= self.n_starts <= len(START_LATTICE):
            raise ConfigError(f"optimizer.n_starts must be in 1..{len(START_LATTICE)}")
        if self.max_iter < 1:
            raise ConfigError("optimizer.max_iter must be positive")
        if not self.fd_step > 0:
            raise ConfigError("optimizer.fd_step must be positive")


@dataclass
class SpaceTimeModel:
    """Fitted hyperparameters, fixed effects and latent posterior means.

    Uncertainty attached to predictions is Gaussian-conditional given the
    MAP hyperparameters; hyperparameter uncertainty is not propagated.
    """

    structure: Structure
    kappa: float
    priors: PcPriorSpec
    theta: np.ndarray
    hyper: Hyper
    x_names: list
    beta: np.ndarray
    beta_cov: np.ndarray
    years: np.ndarray
    year_centre: float
    year_width: float
    trend: np.ndarray          # RW effect per modelled year (zeros for fixed trends)
    objective: float
    loglik_restricted: float
    loglik_ml: float
    aic: float
    n_params: int
    starts: list
    data_digest: str
    data: SpaceTimeData | None = field(default=None, repr=False)
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def beta0(self) -> float:
        return float(self.beta[0])

    @property
    def a(self) -> float:
        return self.hyper.a

    @property
    def sigma_w(self) -> float:
        return self.hyper.sigma_w

    @property
    def tau_eps(self) -> float:
        return self.hyper.tau_eps

    @property
    def spatial(self) -> MaternParams:
        return MaternParams(kappa=self.kappa, range_km=self.hyper.range_km,
                            sigma=self.hyper.marginal_sd, nugget_var=1.0 / self.hyper.tau_eps)

    @property
    def fixed_effects(self) -> dict:
        return {nm: float(b) for nm, b in zip(self.x_names, self.beta)}

    def year_effect(self, year: int) -> float:
        """Mean of ``z`` in ``year`` at the baseline of all dummy effects."""
        yrs = np.array([year])
        cols, _ = trend_columns(self.structure.trend, yrs, self.year_centre, self.year_width)
        k = cols.shape[1]
        out = self.beta[0] + (cols[0] @ self.beta[1:1 + k] if k else 0.0)
        i = int(year - self.years[0])
        if 0 <= i < len(self.trend):
            out += self.trend[i]
        return float(out)

    def to_dict(self) -> dict:
        return {
            "structure": self.structure.to_dict(),
            "kappa": self.kappa,
            "priors": self.priors.to_dict(),
            "theta": {nm: float(v) for nm, v in zip(self.structure.theta_names, self.theta)},
            "hyperparameters": self.hyper.to_dict(),
            "fixed_effects": self.fixed_effects,
            "fixed_effect_cov": self.beta_cov.tolist(),
            "years": [int(y) for y in self.years],
            "year_centre": self.year_centre,
            "year_width": self.year_width,
            "trend": [float(v) for v in self.trend],
            "objective": self.objective,
            "loglik_restricted": self.loglik_restricted,
            "loglik_ml": self.loglik_ml,
            "aic": self.aic,
            "n_params": self.n_params,
            "starts": self.starts,
            "data_digest": self.data_digest,
            "estimation": "MAP hyperparameters; Gaussian-conditional uncertainty given them",
        }

    def save(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def from_dict(cls, d: dict, data: SpaceTimeData | None = None) -> "SpaceTimeModel":
        structure = Structure(**d["structure"])
        if data is not None and data.digest() != d["data_digest"]:
            raise DataError("observations do not match the data the model was fitted on "
                            "(digest mismatch); rerun the fit command")
        theta = np.array([d["theta"][nm] for nm in structure.theta_names])
        h = d["hyperparameters"]
        hyper = Hyper(range_km=h["range_km"], sigma_w=h["sigma_w"], a=h["a"],
                      tau_eps=h["tau_eps"], tau_rw=h["tau_rw"], kappa=h["kappa"])
        fe = d["fixed_effects"]
        return cls(
            structure=structure, kappa=d["kappa"], priors=PcPriorSpec(**d["priors"]),
            theta=theta, hyper=hyper, x_names=list(fe), beta=np.array(list(fe.values())),
            beta_cov=np.array(d["fixed_effect_cov"], dtype=float),
            years=np.array(d["years"], dtype=int), year_centre=d["year_centre"],
            year_width=d["year_width"], trend=np.array(d["trend"], dtype=float),
            objective=d["objective"], loglik_restricted=d["loglik_restricted"],
            loglik_ml=d["loglik_ml"], aic=d["aic"], n_params=d["n_params"],
            starts=d["starts"], data_digest=d["data_digest"], data=data,
        )

    @classmethod
    def load(cls, path, data: SpaceTimeData | None = None) -> "SpaceTimeModel":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh), data)


def _as_data(observations, retention=None) -> SpaceTimeData:
    if isinstance(observations, SpaceTimeData):
        if retention is not None:
            observations.retention = dict(retention)
        return observations
    return SpaceTimeData.from_observations(observations, retention)


def _diameter(coords: np.ndarray) -> float:
    if len(coords) < 2:
        return 1.0
    span = np.ptp(coords, axis=0)
    return max(float(np.hypot(*span)), 1.0)


def _bounds(structure: Structure, data: SpaceTimeData):
    diam = _diameter(data.coords)
    var = max(float(np.var(data.z)), 1e-8)
    b = {
        "log_range": (math.log(diam / 1000.0), math.log(diam * 50.0)),
        "log_sigma_w": (0.5 * math.log(var) - 9.0, 0.5 * math.log(var) + 4.0),
        "atanh_a": (-3.8, 3.8),
        "log_tau_eps": (-math.log(var) - 6.0, -math.log(var) + 16.0),
        "log_tau_rw": (-math.log(var) - 8.0, -math.log(var) + 16.0),
    }
    return [b[nm] for nm in structure.theta_names]


def default_starts(structure: Structure, data: SpaceTimeData, n_starts: int = 3):
    diam = _diameter(data.coords)
    var = max(float(np.var(data.z)), 1e-8)
    out = []
    for frac, a in START_LATTICE[:n_starts]:
        if structure.temporal is not Temporal.AR1:
            a = 0.0
        h = Hyper(range_km=frac * diam, sigma_w=math.sqrt(0.6 * var * (1 - a * a)), a=a,
                  tau_eps=1.0 / (0.3 * var),
                  tau_rw=1.0 / (0.1 * var) if structure.trend.rw_order else None, kappa=1.0)
        out.append(h)
    return out


def _fd_grad(f, x, h, lo, hi):
    g = np.empty_like(x)
    for i in range(len(x)):
        step = h * max(1.0, abs(x[i]))
        up, dn = x.copy(), x.copy()
        up[i] = min(x[i] + step, hi[i])
        dn[i] = max(x[i] - step, lo[i])
        g[i] = (f(up) - f(dn)) / (up[i] - dn[i])
    return g


def objective_function(design, priors):
    def obj(theta):
        try:
            return -(evaluate(theta, design).loglik_restricted + log_prior(theta, design, priors))
        except (NumericalError, FloatingPointError, OverflowError, ValueError):
            return PENALTY
    return obj


def fit_map(observations, trend="rw1", priors: PcPriorSpec | None = None, kappa: float = 1.0,
            init: Hyper | dict | None = None, optimizer: OptimizerConfig | None = None,
            temporal="ar1", retention=None, retention_effects: bool = False) -> SpaceTimeModel:
    """Maximise restricted log-likelihood plus log prior over the hyperparameters.

    Parameters
    ----------
    observations : sequence of Observation or SpaceTimeData
        Log-normalised observations.
    trend : TrendKind or str
    priors : PcPriorSpec, optional
        ``rw_sd=None`` is replaced by the empirical SD of ``z``.
    kappa : float
        Matérn smoothness.
    init : Hyper or dict, optional
        Extra start added in front of the fixed lattice.
    temporal : {"ar1", "iid", "static"}
    retention : mapping site_id -> Retention, optional
    retention_effects : bool
        Add dummy coefficients for retention categories.

    Raises
    ------
    FitError
        If no start converges.
    """
    data = _as_data(observations, retention)
    if data.n_sites < 2 or data.n_years < 2:
        raise DataError("fit needs at least 2 sites and 2 years")
    if not 0.5 <= kappa <= 2.0:
        raise ConfigError(f"kappa must lie in [0.5, 2], got {kappa}")
    structure = Structure(TrendKind(trend), Temporal(temporal), retention_effects)
    optimizer = optimizer or OptimizerConfig()
    priors = priors or PcPriorSpec()
    if priors.rw_sd is None:
        priors = priors.with_rw_sd(float(np.std(data.z, ddof=1)) or 1.0)
    design = build_design(data, structure, kappa)
    obj = objective_function(design, priors)
    bounds = _bounds(structure, data)
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])

    starts = default_starts(structure, data, optimizer.n_starts)
    if init is not None:
        if isinstance(init, dict):
            base = starts[0].to_dict()
            base.update(init)
            base.pop("marginal_sd", None)
            base["kappa"] = kappa
            init = Hyper(**base)
        starts.insert(0, init)

    trace = []
    best = None
    for k, h0 in enumerate(starts):
        x0 = np.clip(pack(h0, design), lo, hi)
        if optimizer.method == "L-BFGS-B":
            res = optimize.minimize(
                obj, x0, jac=lambda x: _fd_grad(obj, x, optimizer.fd_step, lo, hi),
                method="L-BFGS-B", bounds=bounds,
                options={"maxiter": optimizer.max_iter, "gtol": optimizer.gtol},
            )
        else:
            res = optimize.minimize(
                obj, x0, method="Nelder-Mead", bounds=bounds,
                options={"maxiter": optimizer.max_iter * 10, "xatol": 1e-6, "fatol": 1e-8},
            )
        ok = bool(res.success) and res.fun < PENALTY
        trace.append({"start": k, "x0": [float(v) for v in x0], "x": [float(v) for v in res.x],
                      "objective": float(res.fun), "converged": ok, "n_eval": int(res.nfev),
                      "message": str(res.message)})
        log.debug("start %d: objective %.6f converged=%s", k, res.fun, ok)
        if ok and (best is None or res.fun < best.fun):
            best = res
    if best is None:
        raise FitError("hyperparameter optimisation did not converge from any start", trace)

    theta = np.asarray(best.x, dtype=float)
    ev = evaluate(theta, design, want_latent=True)
    n_theta = len(theta)
    return SpaceTimeModel(
        structure=structure, kappa=kappa, priors=priors, theta=theta, hyper=ev.hyper,
        x_names=list(design.x_names), beta=ev.beta, beta_cov=ev.beta_cov, years=data.years.copy(),
        year_centre=design.year_centre, year_width=design.year_width,
        trend=ev.latent["trend"], objective=float(-best.fun),
        loglik_restricted=ev.loglik_restricted, loglik_ml=ev.loglik_ml,
        aic=float(-2.0 * ev.loglik_ml + 2.0 * (design.p + n_theta)),
        n_params=design.p + n_theta, starts=trace, data_digest=data.digest(), data=data,
    )


def objective_gradient(model: SpaceTimeModel, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of the objective at the fitted ``theta``."""
    design = build_design(model.data, model.structure, model.kappa)
    obj = objective_function(design, model.priors)
    n = len(model.theta)
    return _fd_grad(obj, model.theta, step, np.full(n, -np.inf), np.full(n, np.inf))
