"""Monte-Carlo rank-correlation test for preferential placement of monitoring sites.

The statistic is the Spearman correlation between each site's mean
distance to its ``k`` nearest neighbours and the response at the site. Null
networks of the same size are drawn uniformly over the region and their
responses read from a kriged surface, so the null holds site placement
independent of the field.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats
from scipy.spatial import cKDTree

from .errors import ConfigError, DataError
from .geo import Polygon, sample_uniform

DEPENDENCE_CAVEAT = ("yearly tests share most sites and the same underlying field, so "
                     "the series is serially dependent; p-values are per-year and uncorrected")


def knn_mean_distance(points, k: int) -> np.ndarray:
    """Mean Euclidean distance from each point to its ``k`` nearest others."""
    pts = np.asarray(points, dtype=float)
    n = len(pts)
    if k < 1:
        raise ValueError("k must be at least 1")
    if n <= k:
        raise DataError(f"need more than k={k} points, got {n}")
    d = np.sqrt(((pts[:, None, :] - pts[None, :, :]) ** 2).sum(axis=-1))
    np.fill_diagonal(d, np.inf)
    near = np.partition(d, k - 1, axis=1)[:, :k]
    return near.mean(axis=1)


def spearman_rho(x, y) -> float:
    """Pearson correlation of mid-ranks."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("x and y must be 1-d arrays of equal length")
    if len(x) < 3:
        raise ValueError("spearman_rho needs at least 3 pairs")
    rx = stats.rankdata(x) - (len(x) + 1) / 2.0
    ry = stats.rankdata(y) - (len(y) + 1) / 2.0
    sx, sy = rx @ rx, ry @ ry
    if sx == 0 or sy == 0:
        raise ValueError("zero rank variance: one input is constant")
    return float(np.clip((rx @ ry) / math.sqrt(sx * sy), -1.0, 1.0))


@dataclass
class PsTestResult:
    year: int | None
    n_sites: int
    k: int
    m: int
    rho_obs: float
    null_rhos: np.ndarray
    p_lower: float
    p_two_sided: float
    seed: int

    def to_dict(self, include_null: bool = True) -> dict:
        d = {"year": self.year, "n_sites": self.n_sites, "k": self.k, "m": self.m,
             "rho_obs": self.rho_obs, "p_lower": self.p_lower,
             "p_two_sided": self.p_two_sided, "seed": self.seed}
        if include_null:
            d["null_rhos"] = [float(v) for v in self.null_rhos]
        return d


def replicate_rng(seed: int, year, r: int) -> np.random.Generator:
    """Independent stream for replicate ``r`` of ``year``."""
    key = (0 if year is None else int(year), int(r))
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=key))


def _grid_spacing(points) -> float:
    d, _ = cKDTree(points).query(points, k=2)
    return float(np.median(d[:, 1]))


class SurfaceLookup:
    """Nearest-pixel reader for a prediction surface."""

    def __init__(self, surface, tol: float | None = None):
        self.values = np.asarray(surface.mean, dtype=float)
        pts = np.asarray(surface.points, dtype=float)
        if len(pts) == 0:
            raise DataError("prediction surface is empty")
        self.tree = cKDTree(pts)
        spacing = getattr(surface, "spacing_km", None)
        if spacing is None:
            spacing = _grid_spacing(pts) if len(pts) > 1 else np.inf
        # a pixel centre lies within half a diagonal of any point of its own
        # cell; cells clipped at the boundary can push this to a full diagonal
        self.tol = float(tol) if tol is not None else spacing * math.sqrt(2.0)

    def __call__(self, points) -> np.ndarray:
        d, idx = self.tree.query(points)
        if np.any(d > self.tol):
            raise DataError(f"grid too coarse: a sampled point lies {float(d.max()):.3g} km from "
                            f"the nearest pixel (tolerance {self.tol:.3g} km)")
        return self.values[idx]


def ps_test(sites, responses, surface, poly: Polygon, k: int = 3, m: int = 1000, seed: int = 0,
            year: int | None = None, n_min: int | None = None, tol: float | None = None) -> PsTestResult:
    """Preferential-sampling test for one year.

    Parameters
    ----------
    sites : (n, 2) array
        Site locations (km).
    responses : (n,) array
        Observed responses at the sites.
    surface : PredictionSurface
        Kriged surface covering ``poly``; null responses are read at the
        nearest pixel.
    k, m, seed : int
        Neighbour count, number of null networks and master seed.

    Notes
    -----
    ``p_lower = (1 + #{null <= rho_obs}) / (m + 1)``; the two-sided value uses
    absolute correlations.
    """
    sites = np.asarray(sites, dtype=float)
    responses = np.asarray(responses, dtype=float)
    n = len(sites)
    if m < 1:
        raise ConfigError("m must be at least 1")
    need = max(k + 2, n_min or 0)
    if n < need:
        raise DataError(f"ps_test needs at least {need} sites, got {n}")
    if len(responses) != n:
        raise ValueError("sites and responses differ in length")
    rho_obs = spearman_rho(knn_mean_distance(sites, k), responses)
    lookup = SurfaceLookup(surface, tol)
    null = np.empty(m)
    for r in range(m):
        pts = sample_uniform(poly, n, replicate_rng(seed, year, r))
        null[r] = spearman_rho(knn_mean_distance(pts, k), lookup(pts))
    p_lower = (1 + np.count_nonzero(null <= rho_obs)) / (m + 1)
    p_two = (1 + np.count_nonzero(np.abs(null) >= abs(rho_obs))) / (m + 1)
    return PsTestResult(year=year, n_sites=n, k=k, m=m, rho_obs=rho_obs, null_rhos=null,
                        p_lower=float(p_lower), p_two_sided=float(p_two), seed=seed)


@dataclass
class SeriesEntry:
    year: int
    result: PsTestResult | None = None
    n_sites: int | None = None
    skipped: str | None = None
    rho: float | None = None
    interpolated: bool = False
    provenance: str = ""

    def to_dict(self) -> dict:
        r = self.result
        return {"year": self.year, "n_sites": self.n_sites, "rho": self.rho,
                "p_lower": r.p_lower if r else None, "p_two_sided": r.p_two_sided if r else None,
                "skipped": self.skipped, "interpolated": self.interpolated,
                "provenance": self.provenance}


@dataclass
class PsSeries:
    k: int
    m: int
    seed: int
    n_min: int
    entries: list = field(default_factory=list)
    caveat: str = DEPENDENCE_CAVEAT

    def rho_by_year(self, use_interpolated: bool = True) -> dict:
        return {e.year: e.rho for e in self.entries
                if e.rho is not None and (use_interpolated or not e.interpolated)}

    def to_dict(self, include_null: bool = False) -> dict:
        return {"k": self.k, "m": self.m, "seed": self.seed, "n_min": self.n_min,
                "caveat": self.caveat,
                "entries": [{**e.to_dict(), **({"null_rhos": [float(v) for v in e.result.null_rhos]}
                                               if include_null and e.result else {})}
                            for e in self.entries]}


def ps_test_series(yearly_sites: dict, surfaces: dict, poly: Polygon, k: int = 3, m: int = 1000,
                   seed: int = 0, n_min: int = 10, tol: float | None = None) -> PsSeries:
    """Run :func:`ps_test` for every year with enough sites.

    ``yearly_sites`` maps year to ``(points, responses)``; ``surfaces`` maps
    year to a prediction surface. Years below the site threshold or without
    a surface are kept as skipped entries.
    """
    if n_min < k + 2:
        raise ConfigError(f"n_min must be at least k + 2 = {k + 2}")
    series = PsSeries(k=k, m=m, seed=seed, n_min=n_min)
    for year in sorted(yearly_sites):
        pts, resp = yearly_sites[year]
        n = len(pts)
        if n < n_min:
            series.entries.append(SeriesEntry(int(year), n_sites=n,
                                               skipped=f"only {n} sites (< {n_min})"))
            continue
        if year not in surfaces:
            series.entries.append(SeriesEntry(int(year), n_sites=n, skipped="no prediction surface"))
            continue
        res = ps_test(pts, resp, surfaces[year], poly, k=k, m=m, seed=seed, year=int(year), tol=tol)
        series.entries.append(SeriesEntry(int(year), result=res, n_sites=n, rho=res.rho_obs))
    return series


def interpolate_missing(series):
    """Fill interior gaps with the mean of the nearest present neighbours.

    Accepts a :class:`PsSeries` (entries updated in place and returned) or a
    mapping ``year -> rho or None`` (a list of dicts is returned). Gaps at
    either end stay empty and are flagged.
    """
    if isinstance(series, PsSeries):
        entries = series.entries
    else:
        entries = [SeriesEntry(int(y), rho=None if v is None else float(v))
                   for y, v in sorted(series.items())]
    present = [i for i, e in enumerate(entries) if e.rho is not None and not e.interpolated]
    for i, e in enumerate(entries):
        if e.rho is not None:
            continue
        left = [j for j in present if j < i]
        right = [j for j in present if j > i]
        if left and right:
            a, b = entries[left[-1]], entries[right[0]]
            e.rho = 0.5 * (a.rho + b.rho)
            e.interpolated = True
            e.provenance = f"mean of {a.year} and {b.year}"
        else:
            e.provenance = "edge gap, not filled"
    if isinstance(series, PsSeries):
        return series
    return [{"year": e.year, "rho": e.rho, "interpolated": e.interpolated,
             "provenance": e.provenance} for e in entries]


@dataclass
class AcfResult:
    acf: np.ndarray     # lags 0..max_lag
    pacf: np.ndarray    # lags 1..max_lag
    band: float
    n: int


def acf_pacf(series, max_lag: int = 10, ci: float = 0.95) -> AcfResult:
    """Sample ACF, Durbin-Levinson PACF and the ``qnorm((1+ci)/2)/sqrt(N)`` band."""
    x = np.asarray(series, dtype=float)
    n = len(x)
    if n < max_lag + 2:
        raise DataError(f"series of length {n} too short for max_lag={max_lag}")
    xc = x - x.mean()
    denom = xc @ xc
    if denom == 0:
        raise DataError("constant series has no autocorrelation")
    acf = np.array([(xc[:n - h] @ xc[h:]) / denom for h in range(max_lag + 1)])
    pacf = np.empty(max_lag)
    phi = np.zeros(0)
    for h in range(1, max_lag + 1):
        if h == 1:
            ph = acf[1]
            phi = np.array([ph])
        else:
            num = acf[h] - phi @ acf[h - 1:0:-1]
            den = 1.0 - phi @ acf[1:h]
            ph = num / den
            phi = np.append(phi - ph * phi[::-1], ph)
        pacf[h - 1] = ph
    band = float(stats.norm.ppf((1.0 + ci) / 2.0) / math.sqrt(n))
    return AcfResult(acf=acf, pacf=pacf, band=band, n=n)


def _safe_spearman(x, y):
    try:
        return spearman_rho(x, y), None
    except ValueError as exc:
        return None, str(exc)


def correlate_site_changes(rho_by_year: dict, additions: dict, removals: dict,
                           use_interpolated: bool = True, interpolated_years=()) -> dict:
    """Spearman correlation of the yearly statistic with site additions and removals.

    Failures (for example a constant series) are reported in the result
    instead of raised.
    """
    skip = set() if use_interpolated else set(interpolated_years)
    years = sorted(y for y in rho_by_year
                   if rho_by_year[y] is not None and y not in skip and y in additions and y in removals)
    rho = [rho_by_year[y] for y in years]
    add = [additions[y] for y in years]
    rem = [removals[y] for y in years]
    ra, ea = _safe_spearman(rho, add)
    rr, er = _safe_spearman(rho, rem)
    return {"years": years, "use_interpolated": use_interpolated,
            "additions": ra, "additions_error": ea, "removals": rr, "removals_error": er}


def scan_k(sites, responses, surface, poly: Polygon, ks=(1, 2, 3, 4, 5), m: int = 1000,
           seed: int = 0, year: int | None = None, tol: float | None = None) -> list[dict]:
    """Run the test over several ``k`` with a Bonferroni-adjusted column."""
    rows = []
    for k in ks:
        r = ps_test(sites, responses, surface, poly, k=k, m=m, seed=seed, year=year, tol=tol)
        rows.append({"k": k, "rho_obs": r.rho_obs, "p_lower": r.p_lower,
                     "p_two_sided": r.p_two_sided,
                     "p_lower_bonferroni": min(1.0, r.p_lower * len(ks))})
    return rows


def null_histogram(result: PsTestResult, n_bins: int = 20) -> list[dict]:
    """Histogram of null correlations on [-1, 1] with the observed value marked."""
    counts, edges = np.histogram(result.null_rhos, bins=n_bins, range=(-1.0, 1.0))
    return [{"lo": float(lo), "hi": float(hi), "count": int(c),
             "contains_obs": bool(lo <= result.rho_obs < hi or (hi == 1.0 and result.rho_obs == 1.0))}
            for lo, hi, c in zip(edges[:-1], edges[1:], counts)]
