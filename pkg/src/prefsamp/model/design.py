"""Model structure and the prepared data layout used by the likelihood."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from enum import Enum
from typing import Mapping, Sequence

import numpy as np

from ..errors import DataError
from ..ingest import Retention
from .priors import difference_matrix


class TrendKind(str, Enum):
    NONE = "none"
    LINEAR = "linear"
    QUADRATIC = "quadratic"
    RW1 = "rw1"
    RW2 = "rw2"

    @property
    def rw_order(self) -> int:
        return {TrendKind.RW1: 1, TrendKind.RW2: 2}.get(self, 0)


class Temporal(str, Enum):
    AR1 = "ar1"        # AR(1)-linked yearly fields
    IID = "iid"        # independent field each year
    STATIC = "static"  # one field shared by all years


# retention dummies against the Added baseline
RETENTION_EFFECTS = (Retention.CONTINUOUS, Retention.REMOVED, Retention.ADDED_THEN_REMOVED)


@dataclass(frozen=True)
class Structure:
    trend: TrendKind = TrendKind.RW1
    temporal: Temporal = Temporal.AR1
    retention_effects: bool = False

    def __post_init__(self):
        object.__setattr__(self, "trend", TrendKind(self.trend))
        object.__setattr__(self, "temporal", Temporal(self.temporal))

    @property
    def label(self) -> str:
        parts = ["matern", self.temporal.value]
        if self.trend is not TrendKind.NONE:
            parts.append(self.trend.value)
        if self.retention_effects:
            parts.append("retention")
        return "+".join(parts)

    @property
    def theta_names(self) -> list[str]:
        names = ["log_range", "log_sigma_w"]
        if self.temporal is Temporal.AR1:
            names.append("atanh_a")
        names.append("log_tau_eps")
        if self.trend.rw_order:
            names.append("log_tau_rw")
        return names

    def to_dict(self):
        return {"trend": self.trend.value, "temporal": self.temporal.value,
                "retention_effects": self.retention_effects}


@dataclass
class SpaceTimeData:
    """Observations indexed by site and calendar year.

    ``years`` spans every calendar year from the first to the last
    observation, so gaps keep their true AR(1) lag and RW position.
    """

    site_ids: list
    coords: np.ndarray      # (S, 2) km
    years: np.ndarray       # (T,) consecutive ints
    site_idx: np.ndarray    # (n,)
    year_idx: np.ndarray    # (n,)
    z: np.ndarray           # (n,)
    retention: dict | None = None

    @classmethod
    def from_observations(cls, observations, retention: Mapping[str, Retention] | None = None,
                          years: Sequence[int] | None = None) -> "SpaceTimeData":
        obs = list(observations)
        if not obs:
            raise DataError("no observations")
        z = np.array([o.z for o in obs], dtype=float)
        if not np.all(np.isfinite(z)):
            raise DataError("observations must be log-normalised (finite z)")
        coords_by_site = {}
        for o in obs:
            prev = coords_by_site.setdefault(o.site_id, (o.x_km, o.y_km))
            if np.hypot(prev[0] - o.x_km, prev[1] - o.y_km) > 1e-9:
                raise DataError(f"site {o.site_id} has inconsistent coordinates")
        site_ids = sorted(coords_by_site)
        pos = {s: i for i, s in enumerate(site_ids)}
        obs_years = np.array([o.year for o in obs], dtype=int)
        lo, hi = int(obs_years.min()), int(obs_years.max())
        if years is not None:
            lo, hi = min(lo, min(years)), max(hi, max(years))
        all_years = np.arange(lo, hi + 1)
        keys = set()
        for o in obs:
            k = (o.site_id, o.year)
            if k in keys:
                raise DataError(f"duplicate observation for site {o.site_id} in {o.year}")
            keys.add(k)
        return cls(
            site_ids=site_ids,
            coords=np.array([coords_by_site[s] for s in site_ids], dtype=float),
            years=all_years,
            site_idx=np.array([pos[o.site_id] for o in obs], dtype=int),
            year_idx=obs_years - lo,
            z=z,
            retention=dict(retention) if retention is not None else None,
        )

    @property
    def n(self) -> int:
        return len(self.z)

    @property
    def n_sites(self) -> int:
        return len(self.site_ids)

    @property
    def n_years(self) -> int:
        return len(self.years)

    def obs_coords(self) -> np.ndarray:
        return self.coords[self.site_idx]

    def obs_years(self) -> np.ndarray:
        return self.years[self.year_idx]

    def digest(self) -> str:
        h = hashlib.sha256()
        order = np.lexsort((self.year_idx, self.site_idx))
        for i in order:
            s = self.site_idx[i]
            h.update(f"{self.site_ids[s]},{self.coords[s, 0]!r},{self.coords[s, 1]!r},"
                     f"{int(self.years[self.year_idx[i]])},{self.z[i]!r}\n".encode())
        return h.hexdigest()

    def subset(self, mask, keep_years: bool = False) -> "SpaceTimeData":
        """Observations selected by ``mask``; site and year indexing are rebuilt.

        ``keep_years`` retains the full calendar span even when the subset
        leaves edge years empty.
        """
        mask = np.asarray(mask)
        idx = np.flatnonzero(mask) if mask.dtype == bool else mask
        keep_sites = sorted(set(self.site_idx[idx].tolist()))
        remap = {old: new for new, old in enumerate(keep_sites)}
        years_kept = self.years[self.year_idx[idx]]
        lo, hi = int(years_kept.min()), int(years_kept.max())
        if keep_years:
            lo, hi = int(self.years[0]), int(self.years[-1])
        return SpaceTimeData(
            site_ids=[self.site_ids[s] for s in keep_sites],
            coords=self.coords[keep_sites],
            years=np.arange(lo, hi + 1),
            site_idx=np.array([remap[s] for s in self.site_idx[idx]], dtype=int),
            year_idx=years_kept - lo,
            z=self.z[idx].copy(),
            retention=self.retention,
        )


def year_scale(years: np.ndarray):
    """Centre and scale calendar years for polynomial columns."""
    centre = float(np.mean(years))
    return centre, 10.0


def rw_basis(n_years: int, order: int) -> np.ndarray:
    """Columns spanning the constrained RW space with ``E E^T = pinv(D^T D)``."""
    if n_years < order + 1:
        raise DataError(f"RW{order} trend needs at least {order + 1} years")
    d = difference_matrix(n_years, order)
    vals, vecs = np.linalg.eigh(d.T @ d)
    keep = np.argsort(vals)[order:]
    return vecs[:, keep] / np.sqrt(vals[keep])


@dataclass
class Design:
    """Structure-specific arrays that do not depend on hyperparameters."""

    data: SpaceTimeData
    structure: Structure
    kappa: float
    X: np.ndarray           # (n, p) fixed effects
    x_names: list
    year_centre: float
    year_width: float
    E: np.ndarray           # (T, m) RW basis, m may be 0
    block_idx: np.ndarray   # (n,)
    n_blocks: int
    counts: np.ndarray      # (B, S) observations per block and site
    F: np.ndarray           # (B, S, m) sum of E rows per block and site
    W: np.ndarray           # (n, p + 1) = [X, z]
    Wsum: np.ndarray        # (B, S, p + 1)
    Wyear: np.ndarray       # (T, p + 1)
    WtW: np.ndarray
    EtNE: np.ndarray        # (m, m)
    site_dist: np.ndarray   # (S, S)

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def m(self) -> int:
        return self.E.shape[1]


def trend_columns(kind: TrendKind, years, centre: float, width: float):
    """Fixed-effect trend columns (excluding the intercept) at calendar ``years``."""
    tc = (np.asarray(years, dtype=float) - centre) / width
    if kind is TrendKind.LINEAR or kind is TrendKind.RW2:
        return np.column_stack([tc]), ["year"]
    if kind is TrendKind.QUADRATIC:
        return np.column_stack([tc, tc ** 2]), ["year", "year2"]
    return np.zeros((len(tc), 0)), []


def retention_columns(data: SpaceTimeData, site_idx) -> tuple[np.ndarray, list]:
    if not data.retention:
        raise DataError("retention effects requested but no retention categories supplied")
    cats = []
    for s in site_idx:
        sid = data.site_ids[s]
        if sid not in data.retention:
            raise DataError(f"no retention category for site {sid}")
        cats.append(Retention(data.retention[sid]))
    cols, names = [], []
    for cat in RETENTION_EFFECTS:
        col = np.array([c is cat for c in cats], dtype=float)
        cols.append(col)
        names.append(f"retention_{cat.value}")
    return np.column_stack(cols), names


def build_design(data: SpaceTimeData, structure: Structure, kappa: float = 1.0) -> Design:
    from ..covariance import pairwise_distances

    T, S, n = data.n_years, data.n_sites, data.n
    centre, width = year_scale(data.years)
    tcols, tnames = trend_columns(structure.trend, data.obs_years(), centre, width)
    cols = [np.ones((n, 1)), tcols]
    names = ["intercept"] + tnames
    if structure.retention_effects:
        rcols, rnames = retention_columns(data, data.site_idx)
        present = rcols.any(axis=0)
        cols.append(rcols[:, present])
        names += [nm for nm, ok in zip(rnames, present) if ok]
    X = np.hstack(cols)
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise DataError(f"fixed-effect design is rank deficient: {names}")
    order = structure.trend.rw_order
    E = rw_basis(T, order) if order else np.zeros((T, 0))
    if structure.temporal is Temporal.STATIC:
        block_idx = np.zeros(n, dtype=int)
        B = 1
    else:
        block_idx = data.year_idx.copy()
        B = T
    m = E.shape[1]
    counts = np.zeros((B, S))
    np.add.at(counts, (block_idx, data.site_idx), 1.0)
    F = np.zeros((B, S, m))
    np.add.at(F, (block_idx, data.site_idx), E[data.year_idx])
    W = np.column_stack([X, data.z])
    Wsum = np.zeros((B, S, W.shape[1]))
    np.add.at(Wsum, (block_idx, data.site_idx), W)
    Wyear = np.zeros((T, W.shape[1]))
    np.add.at(Wyear, data.year_idx, W)
    n_per_year = np.bincount(data.year_idx, minlength=T).astype(float)
    return Design(
        data=data, structure=structure, kappa=kappa, X=X, x_names=names,
        year_centre=centre, year_width=width, E=E, block_idx=block_idx, n_blocks=B,
        counts=counts, F=F, W=W, Wsum=Wsum, Wyear=Wyear, WtW=W.T @ W,
        EtNE=E.T @ (n_per_year[:, None] * E), site_dist=pairwise_distances(data.coords),
    )
