"""Marginal likelihood of the space-time model with the latent block integrated out.

Model, for observation i at site s and year t::

    z_i = x_i' beta + f_t + y(s, t) + eps_i

``beta`` has a flat prior, ``f`` is a constrained intrinsic random walk and
``y`` is a separable Matérn x AR(1) field. Writing each yearly field as
``L_C u_t`` (``C = L_C L_C'`` the site correlation) makes the prior
precision of ``u`` equal to ``M kron I / sigma_w^2`` with ``M`` the
tridiagonal AR(1) precision, so the posterior precision of ``u`` is block
tridiagonal in time. The random-walk coefficients are appended through a
Schur complement and ``beta`` is integrated analytically (restricted
likelihood).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from ..covariance import MaternParams, TemporalParams, build_covariance, matern_correlation, range_to_phi
from ..errors import NotPositiveDefiniteError
from .design import Design, Temporal
from .priors import PcPriorSpec, difference_matrix, pc_prec_logdensity, pc_prior_logdensity_matern

LOG2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class Hyper:
    range_km: float
    sigma_w: float
    a: float
    tau_eps: float
    tau_rw: float | None
    kappa: float

    @property
    def marginal_sd(self) -> float:
        return self.sigma_w / math.sqrt(1.0 - self.a ** 2)

    @property
    def nugget_var(self) -> float:
        return 1.0 / self.tau_eps

    def to_dict(self):
        return {"range_km": self.range_km, "sigma_w": self.sigma_w, "a": self.a,
                "tau_eps": self.tau_eps, "tau_rw": self.tau_rw, "kappa": self.kappa,
                "marginal_sd": self.marginal_sd}


def unpack(theta, design: Design) -> Hyper:
    vals = dict(zip(design.structure.theta_names, np.asarray(theta, dtype=float)))
    return Hyper(
        range_km=math.exp(vals["log_range"]),
        sigma_w=math.exp(vals["log_sigma_w"]),
        a=math.tanh(vals["atanh_a"]) if "atanh_a" in vals else 0.0,
        tau_eps=math.exp(vals["log_tau_eps"]),
        tau_rw=math.exp(vals["log_tau_rw"]) if "log_tau_rw" in vals else None,
        kappa=design.kappa,
    )


def pack(h: Hyper, design: Design) -> np.ndarray:
    out = []
    for name in design.structure.theta_names:
        out.append({
            "log_range": lambda: math.log(h.range_km),
            "log_sigma_w": lambda: math.log(h.sigma_w),
            "atanh_a": lambda: math.atanh(h.a),
            "log_tau_eps": lambda: math.log(h.tau_eps),
            "log_tau_rw": lambda: math.log(h.tau_rw),
        }[name]())
    return np.array(out)


def site_correlation(design: Design, range_km: float) -> np.ndarray:
    return matern_correlation(design.site_dist, design.kappa, range_to_phi(range_km, design.kappa))


def _chol(a, what):
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        raise NotPositiveDefiniteError(f"{what} is not positive definite") from None


class BlockTridiagonal:
    """Cholesky factor of a symmetric block-tridiagonal matrix whose
    off-diagonal blocks are ``c * I``."""

    def __init__(self, diag_blocks: np.ndarray, c: float):
        self.c = c
        self.L = []
        prev = None
        for b, d in enumerate(diag_blocks):
            if prev is not None and c != 0.0:
                pinv = linalg.solve_triangular(prev, np.eye(len(d)), lower=True)
                d = d - (c * c) * (pinv.T @ pinv)
            prev = _chol(d, "latent posterior precision")
            self.L.append(prev)

    def logdet(self) -> float:
        return float(sum(2.0 * np.sum(np.log(np.diag(L))) for L in self.L))

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        """Solve for ``rhs`` of shape (B, S, k)."""
        B = len(self.L)
        c = self.c
        y = np.empty_like(rhs)
        for b in range(B):
            r = rhs[b]
            if b and c != 0.0:
                r = r - c * linalg.solve_triangular(self.L[b - 1], y[b - 1], lower=True, trans="T")
            y[b] = linalg.solve_triangular(self.L[b], r, lower=True)
        x = np.empty_like(rhs)
        for b in range(B - 1, -1, -1):
            r = y[b]
            if b < B - 1 and c != 0.0:
                r = r - c * linalg.solve_triangular(self.L[b], x[b + 1], lower=True)
            x[b] = linalg.solve_triangular(self.L[b], r, lower=True, trans="T")
        return x


@dataclass
class LikResult:
    loglik_restricted: float
    loglik_ml: float
    beta: np.ndarray
    beta_cov: np.ndarray
    logdet_sigma: float
    quad: float
    hyper: Hyper
    latent: dict = field(default_factory=dict)


def _ar1_structure(h: Hyper, design: Design):
    """Diagonal of M, off-diagonal constant and log|M|."""
    B = design.n_blocks
    if design.structure.temporal is Temporal.AR1:
        a = h.a
        if B == 1:
            diag = np.array([1.0 - a * a])
        else:
            diag = np.full(B, 1.0 + a * a)
            diag[0] = diag[-1] = 1.0
        return diag, -a, math.log(1.0 - a * a)
    return np.ones(B), 0.0, 0.0


def evaluate(theta, design: Design, want_latent: bool = False) -> LikResult:
    """Restricted and profile log-likelihood at ``theta``."""
    h = unpack(theta, design)
    data = design.data
    S, B, n, p = data.n_sites, design.n_blocks, data.n, design.p
    m = design.m
    tau = h.tau_eps
    sw2 = h.sigma_w ** 2

    C = site_correlation(design, h.range_km)
    Lc = _chol(C, "site correlation matrix")

    mdiag, moff, logdet_m = _ar1_structure(h, design)
    # posterior precision blocks of u: M_bb/sw2 I + tau Lc' diag(N_b) Lc
    diag_blocks = tau * np.einsum("si,bs,sj->bij", Lc, design.counts, Lc)
    idx = np.arange(S)
    diag_blocks[:, idx, idx] += (mdiag / sw2)[:, None]
    quu = BlockTridiagonal(diag_blocks, moff / sw2)
    logdet_qu = S * logdet_m - B * S * math.log(sw2)

    ru = np.einsum("si,bsk->bik", Lc, design.Wsum)          # A' W
    kw = ru.shape[2]
    if m:
        s_rw = 1.0 / math.sqrt(h.tau_rw)
        qug = tau * s_rw * np.einsum("si,bsk->bik", Lc, design.F)  # tau A' G
        rg = s_rw * (design.E.T @ design.Wyear)               # G' W
        qgg = np.eye(m) + (tau / h.tau_rw) * design.EtNE
        sol = quu.solve(np.concatenate([qug, ru], axis=2))
        Y, Zu = sol[:, :, :m], sol[:, :, m:]
        schur = qgg - np.einsum("bsi,bsj->ij", qug, Y)
        Ls = _chol(schur, "trend posterior precision")
        t = rg - np.einsum("bsi,bsk->ik", qug, Zu)
        st = linalg.cho_solve((Ls, True), t)
        rqr = np.einsum("bsk,bsl->kl", ru, Zu) + t.T @ st
        logdet_post = quu.logdet() + 2.0 * np.sum(np.log(np.diag(Ls)))
    else:
        Zu = quu.solve(ru)
        rqr = np.einsum("bsk,bsl->kl", ru, Zu)
        logdet_post = quu.logdet()

    K = tau * design.WtW - tau * tau * rqr       # W' Sigma^-1 W
    K = 0.5 * (K + K.T)
    logdet_sigma = -n * math.log(tau) + logdet_post - logdet_qu
    kxx, kxz, kzz = K[:p, :p], K[:p, p], K[p, p]
    Lx = _chol(kxx, "fixed-effect information matrix")
    beta = linalg.cho_solve((Lx, True), kxz)
    quad = float(kzz - kxz @ beta)
    logdet_kxx = 2.0 * np.sum(np.log(np.diag(Lx)))
    ll_r = -0.5 * ((n - p) * LOG2PI + logdet_sigma + logdet_kxx + quad)
    ll_ml = -0.5 * (n * LOG2PI + logdet_sigma + quad)
    res = LikResult(
        loglik_restricted=float(ll_r), loglik_ml=float(ll_ml), beta=beta,
        beta_cov=linalg.cho_solve((Lx, True), np.eye(p)), logdet_sigma=float(logdet_sigma),
        quad=quad, hyper=h,
    )
    if want_latent:
        coef = np.append(-beta, 1.0)   # picks z - X beta from the W columns
        if m:
            vg = st @ coef
            vu = (Zu @ coef) - np.einsum("bsi,i->bs", Y, vg)
            trend = design.E @ (tau * vg) * s_rw
        else:
            vu = Zu @ coef
            trend = np.zeros(data.n_years)
        field_sites = tau * (vu @ Lc.T)   # (B, S): L_C u_b
        res.latent = {"trend": trend, "field": field_sites}
    return res


def log_prior(theta, design: Design, priors: PcPriorSpec) -> float:
    """Log prior density of the working parameters ``theta``.

    PC prior on (range, marginal SD) with log-scale Jacobians, PC prior on
    the RW precision in log scale, and flat priors on ``atanh(a)`` and
    ``log tau_eps``.
    """
    h = unpack(theta, design)
    sd = h.marginal_sd
    lp = pc_prior_logdensity_matern(h.range_km, sd, priors) + math.log(h.range_km) + math.log(sd)
    if h.tau_rw is not None:
        if priors.rw_sd is None:
            raise ValueError("rw_sd must be resolved before evaluating the prior")
        lp += pc_prec_logdensity(h.tau_rw, priors.rw_sd, priors.rw_prob) + math.log(h.tau_rw)
    return float(lp)


def log_posterior(theta, design: Design, priors: PcPriorSpec) -> float:
    return evaluate(theta, design).loglik_restricted + log_prior(theta, design, priors)


# ----------------------------------------------------------------------
# dense reference evaluation


def dense_covariance(h: Hyper, design: Design) -> np.ndarray:
    """Marginal covariance of ``z`` assembled element by element."""
    data = design.data
    pts = data.obs_coords()
    sp = MaternParams(kappa=h.kappa, range_km=h.range_km, sigma=1.0, nugget_var=1.0 / h.tau_eps)
    temporal = design.structure.temporal
    if temporal is Temporal.STATIC:
        years = np.zeros(data.n)
    else:
        years = data.obs_years().astype(float)
    # iid fields: only same-year pairs survive when a = 0 (0**0 = 1)
    cov = build_covariance(pts, years, sp, TemporalParams(a=h.a, sigma_w=h.sigma_w), check=False)
    order = design.structure.trend.rw_order
    if order:
        D = difference_matrix(data.n_years, order)
        qplus = np.linalg.pinv(D.T @ D)
        yi = data.year_idx
        cov = cov + qplus[np.ix_(yi, yi)] / h.tau_rw
    return cov


def dense_loglik(theta, design: Design) -> tuple[float, float]:
    """Restricted and profile log-likelihood from the dense joint Gaussian."""
    h = unpack(theta, design)
    cov = dense_covariance(h, design)
    X, z = design.X, design.data.z
    n, p = X.shape
    _, logdet = np.linalg.slogdet(cov)
    si_x = np.linalg.solve(cov, X)
    si_z = np.linalg.solve(cov, z)
    xsx = X.T @ si_x
    beta = np.linalg.solve(xsx, X.T @ si_z)
    r = z - X @ beta
    quad = float(r @ np.linalg.solve(cov, r))
    _, logdet_x = np.linalg.slogdet(xsx)
    ll_r = -0.5 * ((n - p) * LOG2PI + logdet + logdet_x + quad)
    ll_ml = -0.5 * (n * LOG2PI + logdet + quad)
    return float(ll_r), float(ll_ml)
