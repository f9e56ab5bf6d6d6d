"""Side-by-side fits of alternative model structures."""
from __future__ import annotations

from ..errors import PrefsampError
from .design import Structure
from .fit import _as_data, fit_map


def compare_structures(observations, structures, retention=None, **fit_kwargs) -> list[dict]:
    """Fit every structure on the same data and rank by AIC.

    Each entry of ``structures`` is a :class:`Structure` or a mapping of its
    fields. A failing fit yields a row with ``error`` set and no score.
    """
    structures = [s if isinstance(s, Structure) else Structure(**s) for s in structures]
    if len(structures) < 2:
        raise ValueError("compare_structures needs at least two structures")
    data = _as_data(observations, retention)
    rows = []
    for i, st in enumerate(structures):
        row = {"index": i, "label": st.label, **st.to_dict(), "objective": None,
               "loglik_ml": None, "aic": None, "n_params": None, "error": None}
        try:
            m = fit_map(data, trend=st.trend, temporal=st.temporal,
                        retention_effects=st.retention_effects, **fit_kwargs)
            row.update(objective=m.objective, loglik_ml=m.loglik_ml, aic=m.aic, n_params=m.n_params)
        except PrefsampError as exc:
            row["error"] = f"{type(exc).__name__}: {exc}"
        rows.append(row)
    scored = sorted((r for r in rows if r["aic"] is not None), key=lambda r: (r["aic"], r["index"]))
    for rank, r in enumerate(scored, 1):
        r["rank"] = rank
        r["delta_aic"] = r["aic"] - scored[0]["aic"]
    for r in rows:
        r.setdefault("rank", None)
        r.setdefault("delta_aic", None)
    return rows
