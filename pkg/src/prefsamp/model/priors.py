"""Penalised-complexity priors and the intrinsic random-walk density."""
from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np


@dataclass(frozen=True)
class PcPriorSpec:
    """Tail statements for the PC priors.

    ``P(range < range_km) = range_prob``, ``P(sigma > sigma) = sigma_prob``
    and ``P(sd of RW increments > rw_sd) = rw_prob``. ``rw_sd=None`` means
    the empirical SD of the response is used.
    """

    range_km: float = 6.0
    range_prob: float = 0.01
    sigma: float = 35.0
    sigma_prob: float = 0.01
    rw_sd: float | None = None
    rw_prob: float = 0.01

    def __post_init__(self):
        for name in ("range_prob", "sigma_prob", "rw_prob"):
            p = getattr(self, name)
            if not 0 < p < 1:
                raise ValueError(f"{name} must lie in (0, 1), got {p}")
        for name in ("range_km", "sigma"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.rw_sd is not None and not self.rw_sd > 0:
            raise ValueError("rw_sd must be positive")

    def with_rw_sd(self, sd: float) -> "PcPriorSpec":
        return PcPriorSpec(**{**asdict(self), "rw_sd": float(sd)})

    def to_dict(self):
        return asdict(self)


def matern_rates(spec: PcPriorSpec, d: int = 2):
    lam_r = -math.log(spec.range_prob) * spec.range_km ** (d / 2.0)
    lam_s = -math.log(spec.sigma_prob) / spec.sigma
    return lam_r, lam_s


def pc_prior_logdensity_matern(r, sigma, spec: PcPriorSpec, d: int = 2):
    """Log joint PC density of Matérn range ``r`` and marginal SD ``sigma``.

    ``pi(r, sigma) = (d/2) R r^(-1-d/2) exp(-R r^(-d/2)) * S exp(-S sigma)``
    with ``R = -ln(p_r) r0^(d/2)`` and ``S = -ln(p_sigma) / sigma0``.
    """
    r = np.asarray(r, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    lam_r, lam_s = matern_rates(spec, d)
    out = (math.log(d / 2.0) + math.log(lam_r) - (1.0 + d / 2.0) * np.log(r)
           - lam_r * r ** (-d / 2.0) + math.log(lam_s) - lam_s * sigma)
    return out if out.ndim else float(out)


def pc_prec_logdensity(tau, u: float, alpha: float):
    """Log PC density of a precision: exponential prior on ``tau^(-1/2)``.

    ``P(tau^(-1/2) > u) = alpha``.
    """
    tau = np.asarray(tau, dtype=float)
    lam = -math.log(alpha) / u
    out = math.log(lam / 2.0) - 1.5 * np.log(tau) - lam / np.sqrt(tau)
    return out if out.ndim else float(out)


def difference_matrix(n: int, order: int) -> np.ndarray:
    d = np.eye(n)
    for _ in range(order):
        d = np.diff(d, axis=0)
    return d


def rw_penalty(trend, order: int, tau: float) -> float:
    """Intrinsic Gaussian log-density of a random walk of order 1 or 2.

    ``(n - order)/2 log(tau / 2pi) - tau/2 * sum(diff^order(trend)^2)``; the
    rank deficiency ``order`` is excluded from the normalising exponent.
    """
    if order not in (1, 2):
        raise ValueError("order must be 1 or 2")
    trend = np.asarray(trend, dtype=float)
    n = len(trend)
    if n < order + 1:
        raise ValueError(f"need at least {order + 1} values for RW{order}")
    inc = np.diff(trend, n=order)
    rank = n - order
    return float(0.5 * rank * math.log(tau / (2.0 * math.pi)) - 0.5 * tau * np.dot(inc, inc))
