"""Matérn covariance, empirical variograms and separable space-time covariance.

Conventions
-----------
Correlation uses the unit-variance Matérn form

    rho(u) = 2**(1 - kappa) / Gamma(kappa) * (u/phi)**kappa * K_kappa(u/phi)

with ``phi = range_km / sqrt(8 * kappa)``, so that ``rho(range_km)`` is
close to 0.1. Distances are in km.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from .errors import NotPositiveDefiniteError, VariogramFitError

KAPPA_MIN, KAPPA_MAX = 0.5, 2.0

# Series for 1/Gamma(z) = sum c_k z**k (Abramowitz & Stegun 6.1.34), k = 1..26
_RGAMMA_C = np.array([
    1.0,
    0.5772156649015329,
    -0.6558780715202538,
    -0.0420026350340952,
    0.1665386113822915,
    -0.0421977345555443,
    -0.0096219715278770,
    0.0072189432466630,
    -0.0011651675918591,
    -0.0002152416741149,
    0.0001280502823882,
    -0.0000201348547807,
    -0.0000012504934821,
    0.0000011330272320,
    -0.0000002056338417,
    0.0000000061160950,
    0.0000000050020075,
    -0.0000000011812746,
    0.0000000001043427,
    0.0000000000077823,
    -0.0000000000036968,
    0.0000000000005100,
    -0.0000000000000206,
    -0.0000000000000054,
    0.0000000000000014,
    0.0000000000000001,
])

_EPS = 1e-16
_XMIN = 2.0


def _temme_gammas(mu):
    """Return gam1, gam2, 1/Gamma(1+mu), 1/Gamma(1-mu) for |mu| <= 1/2."""
    mu2 = mu * mu
    even = _RGAMMA_C[1::2]  # c2, c4, ...
    odd = _RGAMMA_C[0::2]   # c1, c3, ...
    gam1 = -np.polynomial.polynomial.polyval(mu2, even)
    gam2 = np.polynomial.polynomial.polyval(mu2, odd)
    gampl = gam2 - mu * gam1
    gammi = gam2 + mu * gam1
    return gam1, gam2, gampl, gammi


def _k_pair_small(x, mu):
    """Temme series: exp-scaled K_mu(x), K_{mu+1}(x) for x < 2."""
    x2 = 0.5 * x
    pimu = np.pi * mu
    with np.errstate(invalid="ignore", divide="ignore"):
        fact = np.where(np.abs(pimu) < _EPS, 1.0, pimu / np.sin(pimu))
        d = -np.log(x2)
        e = mu * d
        fact2 = np.where(np.abs(e) < _EPS, 1.0, np.sinh(e) / e)
    gam1, gam2, gampl, gammi = _temme_gammas(mu)
    ff = fact * (gam1 * np.cosh(e) + gam2 * fact2 * d)
    total = ff.copy()
    ee = np.exp(e)
    p = 0.5 * ee / gampl
    q = 0.5 / (ee * gammi)
    c = np.ones_like(x)
    dd = x2 * x2
    total1 = p.copy()
    mu2 = mu * mu
    active = np.ones(x.shape, dtype=bool)
    for i in range(1, 500):
        ff = (i * ff + p + q) / (i * i - mu2)
        c = c * dd / i
        p = p / (i - mu)
        q = q / (i + mu)
        delta = c * ff
        total = np.where(active, total + delta, total)
        total1 = np.where(active, total1 + c * (p - i * ff), total1)
        active &= np.abs(delta) >= np.abs(total) * _EPS
        if not active.any():
            break
    scale = np.exp(x)
    return total * scale, total1 * (2.0 / x) * scale


def _k_pair_large(x, mu):
    """Steed's continued fraction: exp-scaled K_mu(x), K_{mu+1}(x) for x >= 2."""
    mu2 = mu * mu
    b = 2.0 * (1.0 + x)
    d = 1.0 / b
    h = d.copy()
    delh = d.copy()
    q1 = np.zeros_like(x)
    q2 = np.ones_like(x)
    a1 = 0.25 - mu2
    q = a1.copy()
    c = a1.copy()
    a = -a1
    s = 1.0 + q * delh
    active = np.ones(x.shape, dtype=bool)
    for i in range(2, 20000):
        a = a - 2.0 * (i - 1)
        c = -a * c / i
        with np.errstate(divide="ignore", invalid="ignore"):
            qnew = np.where(active, (q1 - b * q2) / a, q2)
        q1 = np.where(active, q2, q1)
        q2 = qnew
        q = np.where(active, q + c * qnew, q)
        b = b + 2.0
        d = np.where(active, 1.0 / (b + a * d), d)
        delh = np.where(active, (b * d - 1.0) * delh, delh)
        h = np.where(active, h + delh, h)
        dels = q * delh
        s = np.where(active, s + dels, s)
        active &= np.abs(dels / s) >= _EPS
        if not active.any():
            break
    h = a1 * h
    kmu = np.sqrt(np.pi / (2.0 * x)) / s
    k1 = kmu * (mu + x + 0.5 - h) / x
    return kmu, k1


def bessel_k_scaled(nu, x):
    """Exponentially scaled modified Bessel function ``exp(x) * K_nu(x)``."""
    nu = np.abs(np.asarray(nu, dtype=float))
    x = np.asarray(x, dtype=float)
    if np.any(~(x > 0)):
        raise ValueError("bessel_k requires x > 0")
    if np.any(~np.isfinite(nu)):
        raise ValueError("order must be finite")
    nu, x = np.broadcast_arrays(nu, x)
    shape = x.shape
    nu = nu.ravel().copy()
    x = x.ravel().copy()
    nl = np.floor(nu + 0.5).astype(int)
    mu = nu - nl
    kmu = np.empty_like(x)
    k1 = np.empty_like(x)
    small = x < _XMIN
    if small.any():
        kmu[small], k1[small] = _k_pair_small(x[small], mu[small])
    if (~small).any():
        kmu[~small], k1[~small] = _k_pair_large(x[~small], mu[~small])
    # upward recurrence K_{m+1} = K_{m-1} + (2m/x) K_m, stable for K
    for i in range(1, int(nl.max(initial=0)) + 1):
        go = nl >= i
        nxt = (mu + i) * (2.0 / x) * k1 + kmu
        kmu = np.where(go, k1, kmu)
        k1 = np.where(go, nxt, k1)
    return kmu.reshape(shape)


def bessel_k(nu, x):
    """Modified Bessel function of the second kind, ``K_nu(x)`` for ``x > 0``.

    Uses Temme's series for ``x < 2`` and Steed's continued fraction above,
    followed by forward recurrence in the order. Relative accuracy is near
    machine precision for moderate orders. Values underflow to 0 for very
    large ``x``; use :func:`bessel_k_scaled` there.
    """
    x_arr = np.asarray(x, dtype=float)
    out = bessel_k_scaled(nu, x_arr) * np.exp(-x_arr)
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class MaternParams:
    kappa: float = 1.0
    range_km: float = 25.0
    sigma: float = 1.0
    nugget_var: float = 0.0

    def __post_init__(self):
        if not (KAPPA_MIN <= self.kappa <= KAPPA_MAX):
            raise ValueError(f"kappa must lie in [{KAPPA_MIN}, {KAPPA_MAX}], got {self.kappa}")
        if not self.range_km > 0:
            raise ValueError("range_km must be positive")
        if self.sigma < 0 or self.nugget_var < 0:
            raise ValueError("sigma and nugget_var must be non-negative")

    @property
    def phi(self) -> float:
        return range_to_phi(self.range_km, self.kappa)

    @property
    def psill(self) -> float:
        return self.sigma ** 2


@dataclass(frozen=True)
class TemporalParams:
    a: float
    sigma_w: float

    def __post_init__(self):
        if not abs(self.a) < 1:
            raise ValueError("AR(1) coefficient must satisfy |a| < 1")
        if not self.sigma_w > 0:
            raise ValueError("sigma_w must be positive")

    @property
    def marginal_var(self) -> float:
        return self.sigma_w ** 2 / (1.0 - self.a ** 2)


def range_to_phi(range_km, kappa):
    if np.any(np.asarray(range_km) <= 0):
        raise ValueError("range must be positive")
    return range_km / math.sqrt(8.0 * kappa)


def matern_correlation(u, kappa: float, phi: float):
    """Unit-variance Matérn correlation at distances ``u`` (array or scalar)."""
    u = np.asarray(u, dtype=float)
    if np.any(u < 0):
        raise ValueError("distances must be non-negative")
    t = u / phi
    out = np.ones_like(t)
    pos = t > 0
    if pos.any():
        tp = t[pos]
        if kappa == 0.5:
            vals = np.exp(-tp)
        else:
            logc = (1.0 - kappa) * math.log(2.0) - math.lgamma(kappa)
            # scaled Bessel keeps the tail finite: K(t) = Ks(t) e^-t
            vals = np.exp(logc + kappa * np.log(tp) - tp) * bessel_k_scaled(kappa, tp)
        out[pos] = np.minimum(vals, 1.0)
    return out if out.ndim else float(out)


def matern_corr(u, p: MaternParams):
    return matern_correlation(u, p.kappa, p.phi)


# ----------------------------------------------------------------------
# variograms


@dataclass
class EmpiricalVariogram:
    distance: np.ndarray
    semivariance: np.ndarray
    n_pairs: np.ndarray
    max_dist_km: float

    def __len__(self):
        return len(self.distance)

    def rows(self):
        return list(zip(self.distance.tolist(), self.semivariance.tolist(), self.n_pairs.tolist()))


def pairwise_distances(a, b=None):
    a = np.asarray(a, dtype=float)
    b = a if b is None else np.asarray(b, dtype=float)
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


def empirical_variogram(points, values, n_bins: int = 12, max_dist_km: float = 80.0) -> EmpiricalVariogram:
    """Binned semivariance ``sum (z_i - z_j)^2 / (2 N_h)`` over pairs within ``max_dist_km``.

    Bins are equal width on ``[0, max_dist_km]``; empty bins are dropped and
    each bin reports the mean pair distance.
    """
    points = np.asarray(points, dtype=float)
    values = np.asarray(values, dtype=float)
    if len(points) < 2:
        raise ValueError("need at least two observations for a variogram")
    if n_bins < 1 or not max_dist_km > 0:
        raise ValueError("n_bins must be >= 1 and max_dist_km positive")
    iu, ju = np.triu_indices(len(points), k=1)
    d = pairwise_distances(points)[iu, ju]
    sq = (values[iu] - values[ju]) ** 2
    keep = d <= max_dist_km
    d, sq = d[keep], sq[keep]
    width = max_dist_km / n_bins
    idx = np.minimum((d / width).astype(int), n_bins - 1)
    counts = np.bincount(idx, minlength=n_bins)
    dsum = np.bincount(idx, weights=d, minlength=n_bins)
    ssum = np.bincount(idx, weights=sq, minlength=n_bins)
    used = counts > 0
    return EmpiricalVariogram(
        distance=dsum[used] / counts[used],
        semivariance=ssum[used] / (2.0 * counts[used]),
        n_pairs=counts[used],
        max_dist_km=float(max_dist_km),
    )


def variogram_model(h, nugget, psill, range_km, kappa):
    return nugget + psill * (1.0 - matern_correlation(h, kappa, range_to_phi(range_km, kappa)))


@dataclass
class VariogramFit:
    params: MaternParams
    residual: float
    # profile objective on the start lattice, kept for diagnostics
    trace: list = field(default_factory=list, repr=False)

    @property
    def nugget(self):
        return self.params.nugget_var

    @property
    def psill(self):
        return self.params.psill


def _nnls_at_range(ev, w, range_km, kappa):
    rho = matern_correlation(ev.distance, kappa, range_to_phi(range_km, kappa))
    design = np.column_stack([np.ones_like(rho), 1.0 - rho])
    sw = np.sqrt(w)
    coef, rnorm = optimize.nnls(design * sw[:, None], ev.semivariance * sw)
    return coef, rnorm ** 2


def fit_variogram(ev: EmpiricalVariogram, kappa: float = 1.0, n_starts: int = 48) -> VariogramFit:
    """Weighted least-squares Matérn fit with Cressie weights ``N_h / h^2``.

    For fixed range the model is linear in (nugget, partial sill), solved by
    non-negative least squares; the range is profiled over a fixed log-spaced
    lattice and the best few lattice points are polished with bounded Brent
    searches. The result is deterministic.
    """
    if len(ev) < 4:
        raise ValueError("need at least 4 non-empty bins to fit a variogram")
    h = np.maximum(ev.distance, 1e-6 * ev.max_dist_km)
    w = ev.n_pairs / h ** 2
    w = w / w.max()
    lo, hi = ev.max_dist_km / 1000.0, ev.max_dist_km * 100.0
    grid = np.geomspace(lo, hi, n_starts)
    prof = np.array([_nnls_at_range(ev, w, r, kappa)[1] for r in grid])
    trace = list(zip(grid.tolist(), prof.tolist()))
    if not np.isfinite(prof).any():
        raise VariogramFitError("variogram objective not finite at any start", float("nan"))
    best_r, best_val = grid[int(np.nanargmin(prof))], float(np.nanmin(prof))
    for i in np.argsort(prof)[:3]:
        a = grid[max(i - 1, 0)]
        b = grid[min(i + 1, len(grid) - 1)]
        res = optimize.minimize_scalar(
            lambda lr: _nnls_at_range(ev, w, math.exp(lr), kappa)[1],
            bounds=(math.log(a), math.log(b)), method="bounded",
            options={"xatol": 1e-10},
        )
        if np.isfinite(res.fun) and res.fun < best_val:
            best_r, best_val = math.exp(res.x), float(res.fun)
    coef, resid = _nnls_at_range(ev, w, best_r, kappa)
    if not np.isfinite(resid):
        raise VariogramFitError("variogram fit failed on every start", best_val)
    nugget, psill = (float(c) for c in coef)
    params = MaternParams(kappa=kappa, range_km=float(best_r), sigma=math.sqrt(psill), nugget_var=nugget)
    return VariogramFit(params=params, residual=float(resid), trace=trace)


QUANTILE_PROBS = (0.0, 0.01, 0.05, 0.10, 0.15, 0.25, 0.50, 0.75, 0.90, 0.95, 0.99, 1.0)


def variogram_quantiles(params, probs=QUANTILE_PROBS):
    """Linear-interpolation quantiles of range and partial sill across fits.

    ``params`` is a sequence of :class:`MaternParams` (or objects with
    ``range_km`` and ``psill``). Returns rows ``(prob, range_q, psill_q)``.
    """
    params = list(params)
    if not params:
        raise ValueError("no variogram parameters given")
    ranges = np.array([p.range_km for p in params], dtype=float)
    psills = np.array([p.psill for p in params], dtype=float)
    probs = np.asarray(probs, dtype=float)
    rq = np.quantile(ranges, probs)
    sq = np.quantile(psills, probs)
    return [(float(p), float(r), float(s)) for p, r, s in zip(probs, rq, sq)]


# ----------------------------------------------------------------------
# separable space-time covariance


def ar1_correlation(years, a: float):
    years = np.asarray(years, dtype=float)
    lag = np.abs(years[:, None] - years[None, :])
    return a ** lag


def build_covariance(points, years, sp: MaternParams, tp: TemporalParams, check: bool = True):
    """Covariance over observation pairs of the separable AR(1) x Matérn field.

    ``Cov = sigma_w^2 / (1 - a^2) * a^|t - t'| * rho(|s - s'|)`` with
    ``sp.nugget_var`` added on the diagonal. ``sp.sigma`` is not used: the
    variance comes from the temporal innovation scale. Raises
    :class:`NotPositiveDefiniteError` when ``check`` is set and the matrix
    does not admit a Cholesky factor.
    """
    points = np.asarray(points, dtype=float)
    years = np.asarray(years, dtype=float)
    if len(points) != len(years):
        raise ValueError("points and years must have equal length")
    corr_s = matern_corr(pairwise_distances(points), sp)
    cov = tp.marginal_var * ar1_correlation(years, tp.a) * corr_s
    cov[np.diag_indices_from(cov)] += sp.nugget_var
    if check:
        try:
            np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as exc:
            raise NotPositiveDefiniteError(
                "covariance is not positive definite; add a nugget or diagonal jitter"
            ) from exc
    return cov
