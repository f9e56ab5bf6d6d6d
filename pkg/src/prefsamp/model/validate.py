"""Random holdout validation of predictive intervals."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from ..errors import ConfigError
from .fit import _as_data, fit_map
from .predict import predict_points, retention_design_rows

log = logging.getLogger(__name__)

# share of held-out points outside the 95% interval on the original SOCAB analysis
REFERENCE_OUTSIDE_SHARE = 0.35


@dataclass
class HoldoutReport:
    fraction: float
    seed: int
    level: float
    rows: list                  # per held-out point
    by_site: list
    by_year: list
    outside_share: float
    dropped_years: list = field(default_factory=list)
    reference_outside_share: float = REFERENCE_OUTSIDE_SHARE

    @property
    def n_holdout(self) -> int:
        return len(self.rows)

    def to_dict(self):
        return {
            "fraction": self.fraction, "seed": self.seed, "level": self.level,
            "n_holdout": self.n_holdout, "outside_share": self.outside_share,
            "reference_outside_share": self.reference_outside_share,
            "dropped_years": self.dropped_years, "by_site": self.by_site,
            "by_year": self.by_year, "rows": self.rows,
        }


def _breakdown(rows, key):
    groups = {}
    for r in rows:
        groups.setdefault(r[key], []).append(r)
    out = []
    for k in sorted(groups):
        g = groups[k]
        out.append({key: k, "n": len(g), "n_outside": sum(r["outside"] for r in g),
                    "share_outside": sum(r["outside"] for r in g) / len(g),
                    "mean_std_resid": float(np.mean([r["std_resid"] for r in g]))})
    return out


def validate_holdout(observations, fraction: float = 0.1, seed: int = 0, level: float = 0.95,
                     retention=None, **fit_kwargs) -> HoldoutReport:
    """Withhold ``ceil(fraction * n)`` observations, refit and score the predictions.

    Predictive intervals include the measurement-error variance. Years whose
    observations are all withheld are reported in ``dropped_years`` and left
    out of the per-year breakdown.
    """
    if not 0 < fraction <= 0.5:
        raise ConfigError(f"validate.fraction must lie in (0, 0.5], got {fraction}")
    data = _as_data(observations, retention)
    n = data.n
    n_hold = math.ceil(fraction * n)
    rng = np.random.default_rng(seed)
    held = np.sort(rng.choice(n, size=n_hold, replace=False))
    mask = np.ones(n, dtype=bool)
    mask[held] = False
    train = data.subset(mask, keep_years=True)
    model = fit_map(train, **fit_kwargs)

    years = data.obs_years()[held]
    pts = data.obs_coords()[held]
    site_ids = [data.site_ids[s] for s in data.site_idx[held]]
    mean, sd = predict_points(model, pts, years, include_noise=True,
                              retention_rows=retention_design_rows(model, site_ids))
    zq = stats.norm.ppf(0.5 + level / 2.0)
    rows = []
    for i, j in enumerate(held):
        std = float((data.z[j] - mean[i]) / sd[i])
        rows.append({"site_id": site_ids[i], "year": int(years[i]), "z": float(data.z[j]),
                     "mean": float(mean[i]), "sd": float(sd[i]), "std_resid": std,
                     "outside": bool(abs(std) > zq)})
    train_years = set(int(y) for y in train.obs_years())
    dropped = sorted(set(int(y) for y in years) - train_years)
    for y in dropped:
        log.warning("holdout removed every observation of %d; year left out of the breakdown", y)
    by_year = [r for r in _breakdown(rows, "year") if r["year"] not in dropped]
    return HoldoutReport(
        fraction=fraction, seed=seed, level=level, rows=rows,
        by_site=_breakdown(rows, "site_id"), by_year=by_year,
        outside_share=sum(r["outside"] for r in rows) / len(rows), dropped_years=dropped,
    )
