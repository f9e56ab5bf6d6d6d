"""Polynomial time-trend regressions and their nested F-test."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from ..errors import DataError


@dataclass
class TrendRegression:
    order: int
    coefficients: np.ndarray    # raw-year polynomial, constant first
    r2: float
    adj_r2: float
    residuals: np.ndarray
    rss: float
    f_stat: float               # order 2 vs order 1
    f_pvalue: float

    def to_dict(self):
        return {"order": self.order, "coefficients": [float(c) for c in self.coefficients],
                "r2": self.r2, "adj_r2": self.adj_r2, "rss": self.rss,
                "f_stat": self.f_stat, "f_pvalue": self.f_pvalue}


def _ols(t, y, order):
    X = np.vander(t, order + 1, increasing=True)
    if np.linalg.matrix_rank(X) < order + 1:
        raise DataError(f"order-{order} trend design is rank deficient")
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ coef
    return coef, resid, float(resid @ resid)


def _uncentre(coef, c):
    """Polynomial in (year - c) to a polynomial in year."""
    p = np.polynomial.polynomial
    out = np.zeros(len(coef))
    shift = np.array([-c, 1.0])
    for k, b in enumerate(coef):
        term = p.polypow(shift, k) * b
        out[:len(term)] += term
    return out


def fit_trend_regression(years, values, order: int = 1) -> TrendRegression:
    """Least-squares polynomial trend of ``values`` on calendar ``years``.

    Years are centred internally for conditioning; coefficients are
    returned on the raw-year scale. The F-test compares the quadratic with
    the linear fit, ``F = (RSS1 - RSS2) / (RSS2 / (n - 3))``.
    """
    if order not in (1, 2):
        raise ValueError("order must be 1 or 2")
    years = np.asarray(years, dtype=float)
    y = np.asarray(values, dtype=float)
    n = len(y)
    if n < 4 or len(np.unique(years)) < 3:
        raise DataError("trend regression needs at least 4 observations over 3 distinct years")
    c = float(np.mean(years))
    t = years - c
    fits = {k: _ols(t, y, k) for k in (1, 2)}
    coef, resid, rss = fits[order]
    tss = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - rss / tss if tss > 0 else 1.0
    adj = 1.0 - (1.0 - r2) * (n - 1) / (n - order - 1)
    rss1, rss2 = fits[1][2], fits[2][2]
    if rss2 > 0:
        f = (rss1 - rss2) / (rss2 / (n - 3))
        pval = float(stats.f.sf(f, 1, n - 3))
    else:
        f, pval = (np.inf, 0.0) if rss1 > 0 else (np.nan, np.nan)
    return TrendRegression(order=order, coefficients=_uncentre(coef, c), r2=float(r2),
                           adj_r2=float(adj), residuals=resid, rss=rss, f_stat=float(f),
                           f_pvalue=float(pval))
