"""Simulation from the space-time model and a bundled synthetic EPA-style dataset."""
from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from .covariance import matern_correlation, pairwise_distances, range_to_phi
from .geo import AlbersSpec, Polygon, sample_uniform

# synthetic sites are drawn in lon/lat and projected like real data
REGION_LONLAT = [
    (-118.95, 33.70), (-117.90, 33.45), (-116.95, 33.55), (-116.70, 34.05),
    (-117.05, 34.35), (-117.75, 34.45), (-118.60, 34.35), (-118.95, 34.05), (-118.95, 33.70),
]


def simulate_field(coords, n_years: int, range_km: float, sigma_w: float, a: float,
                   rng: np.random.Generator, kappa: float = 1.0) -> np.ndarray:
    """Stationary AR(1)-in-time Matérn field, shape (n_years, n_sites)."""
    coords = np.asarray(coords, dtype=float)
    corr = matern_correlation(pairwise_distances(coords), kappa, range_to_phi(range_km, kappa))
    L = np.linalg.cholesky(corr + 1e-12 * np.eye(len(coords)))
    out = np.empty((n_years, len(coords)))
    out[0] = (sigma_w / math.sqrt(1 - a * a)) * (L @ rng.standard_normal(len(coords)))
    for t in range(1, n_years):
        out[t] = a * out[t - 1] + sigma_w * (L @ rng.standard_normal(len(coords)))
    return out


def simulate_spacetime(coords, years, range_km=25.0, sigma_w=0.27, a=0.95, tau_eps=75.0,
                       beta0=0.0, trend=None, rng=None, kappa=1.0, keep=None):
    """Draw ``z`` on a site-by-year lattice.

    Returns a list of ``(site_index, year, z)`` triples; ``keep`` is an
    optional boolean (n_years, n_sites) mask of observed cells.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    years = np.asarray(years, dtype=int)
    field = simulate_field(coords, len(years), range_km, sigma_w, a, rng, kappa)
    trend = np.zeros(len(years)) if trend is None else np.asarray(trend, dtype=float)
    z = beta0 + trend[:, None] + field + rng.standard_normal(field.shape) / math.sqrt(tau_eps)
    out = []
    for t, yr in enumerate(years):
        for s in range(len(coords)):
            if keep is None or keep[t, s]:
                out.append((s, int(yr), float(z[t, s])))
    return out, field


def triples_to_data(coords, triples, retention=None):
    from .model.design import SpaceTimeData

    site_ids = [f"S{i:03d}" for i in range(len(coords))]
    used = sorted({s for s, _, _ in triples})
    remap = {s: i for i, s in enumerate(used)}
    years = np.array([y for _, y, _ in triples])
    lo = int(years.min())
    return SpaceTimeData(
        site_ids=[site_ids[s] for s in used],
        coords=np.asarray(coords, dtype=float)[used],
        years=np.arange(lo, int(years.max()) + 1),
        site_idx=np.array([remap[s] for s, _, _ in triples]),
        year_idx=years - lo,
        z=np.array([v for _, _, v in triples]),
        retention=retention,
    )


# ----------------------------------------------------------------------
# bundled EPA-style dataset

ANNUAL_HEADER = [
    "State Code", "County Code", "Site Num", "Parameter Code", "POC", "Latitude", "Longitude",
    "Datum", "Parameter Name", "Sample Duration", "Pollutant Standard", "Metric Used",
    "Method Name", "Year", "Units of Measure", "Event Type", "Observation Count",
    "Observation Percent", "Completeness Indicator", "Arithmetic Mean", "Arithmetic Standard Dev",
    "Local Site Name", "Address", "State Name", "County Name", "City Name",
]
SITE_HEADER = ["State Code", "County Code", "Site Number", "Latitude", "Longitude", "Datum",
               "Land Use", "Location Setting", "Local Site Name"]
COUNTIES = ("037", "059", "065", "071")


def region_geojson() -> dict:
    return {"type": "FeatureCollection", "features": [{
        "type": "Feature", "properties": {"name": "synthetic basin"},
        "geometry": {"type": "Polygon", "coordinates": [[list(p) for p in REGION_LONLAT]]},
    }]}


def _sample_lonlat(n, rng):
    lon = np.array([p[0] for p in REGION_LONLAT])
    lat = np.array([p[1] for p in REGION_LONLAT])
    ring = np.column_stack([lon, lat])
    poly = Polygon([[tuple(p) for p in ring]])
    return sample_uniform(poly, n, rng)


def write_synthetic_dataset(out_dir, seed: int = 20240611, start_year: int = 2000,
                            end_year: int = 2014, n_sites: int = 36, baseline: float = 60.0,
                            spec: AlbersSpec | None = None) -> dict:
    """Write yearly EPA-layout CSVs, a site-metadata CSV, a GeoJSON region and a config.

    Sites follow all four retention histories, some carry two POCs, and a
    few site-years carry an events-included duplicate row. One mid-span year
    has fewer than ten reporting sites. Returns the paths.
    """
    from .geo import project_lonlat

    spec = spec or AlbersSpec()
    rng = np.random.default_rng(seed)
    out = Path(out_dir)
    raw = out / "raw"
    raw.mkdir(parents=True, exist_ok=True)
    years = np.arange(start_year, end_year + 1)
    T = len(years)
    lonlat = _sample_lonlat(n_sites, rng)
    x, y = project_lonlat(lonlat[:, 0], lonlat[:, 1], spec)
    coords = np.column_stack([x, y])
    field = simulate_field(coords, T, 25.0, 0.27, 0.9, rng)
    trend = -0.025 * (years - start_year)
    z = trend[:, None] + field + rng.standard_normal(field.shape) / math.sqrt(75.0)
    pm = baseline * np.exp(z)

    # retention: first half continuous, then removed / added / added-then-removed
    active = np.ones((T, n_sites), dtype=bool)
    mid = T // 2
    for s in range(n_sites):
        kind = s % 6
        if kind == 3:
            active[mid + rng.integers(-2, 3):, s] = False
        elif kind == 4:
            active[:mid + rng.integers(-3, 2), s] = False
        elif kind == 5:
            lo = 2 + int(rng.integers(0, 3))
            active[:lo, s] = False
            active[T - 2 - int(rng.integers(0, 3)):, s] = False
    # one sparse year, too few sites for the preferential-sampling test
    sparse = np.arange(n_sites) % 4 != 0
    active[mid + 1, sparse] = False
    ids = []
    for s in range(n_sites):
        ids.append((COUNTIES[s % len(COUNTIES)], f"{1000 + 7 * s:04d}"))

    paths = {"raw_dir": str(raw)}
    for t, yr in enumerate(years):
        path = raw / f"annual_conc_by_monitor_{yr}.csv"
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(ANNUAL_HEADER)
            for s in range(n_sites):
                if not active[t, s]:
                    continue
                county, site = ids[s]
                n_poc = 2 if s % 5 == 0 else 1
                for poc in range(1, n_poc + 1):
                    val = pm[t, s] * (1.0 + 0.04 * (poc - 1.5)) if n_poc == 2 else pm[t, s]
                    variants = [("No Events", val)]
                    if (s + t) % 9 == 0:
                        variants = [("Events Included", val * 1.15), ("Events Excluded", val)]
                    for event, v in variants:
                        w.writerow(["06", county, site, "81102", poc,
                                    f"{lonlat[s, 1]:.6f}", f"{lonlat[s, 0]:.6f}", "NAD83",
                                    "PM10 Total 0-10um STP", "24 HOUR", "PM10 24-hour 2006",
                                    "Observed Values", "SYNTHETIC", yr, "Micrograms/cubic meter (25 C)",
                                    event, 60 + (s % 3), 100, "Y", f"{v:.4f}", f"{0.3 * v:.4f}",
                                    f"Synthetic {s}", "", "California", "", ""])
                # an unrelated pollutant row that must be filtered out
                if s == 1:
                    w.writerow(["06", county, site, "88101", 1, f"{lonlat[s, 1]:.6f}",
                                f"{lonlat[s, 0]:.6f}", "NAD83", "PM2.5", "24 HOUR", "", "Observed Values",
                                "SYNTHETIC", yr, "Micrograms/cubic meter (LC)", "No Events", 100, 100,
                                "Y", "12.0000", "3.0000", f"Synthetic {s}", "", "California", "", ""])
    meta_path = out / "sites.csv"
    with open(meta_path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SITE_HEADER)
        for s in range(n_sites):
            county, site = ids[s]
            w.writerow(["06", county, site, f"{lonlat[s, 1]:.6f}", f"{lonlat[s, 0]:.6f}", "NAD83",
                        ("RESIDENTIAL", "COMMERCIAL", "INDUSTRIAL")[s % 3],
                        ("URBAN AND CENTER CITY", "SUBURBAN")[s % 2], f"Synthetic {s}"])
    poly_path = out / "region.geojson"
    with open(poly_path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(region_geojson(), fh, indent=1)
        fh.write("\n")
    config = {
        "paths": {"data_dir": "raw", "metadata": "sites.csv", "polygon": "region.geojson",
                  "output_dir": "out"},
        "years": {"start": int(start_year), "end": int(end_year)},
        "model": {"trend": "rw1", "kappa": 1.0},
        "grid": {"spacing_km": 4.0},
        "pstest": {"k": 3, "m": 99, "seed": 7, "n_min": 10},
        "validate": {"fraction": 0.1, "seed": 11},
    }
    cfg_path = out / "config.json"
    with open(cfg_path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(config, fh, indent=2)
        fh.write("\n")
    paths.update(metadata=str(meta_path), polygon=str(poly_path), config=str(cfg_path))
    return paths


__all__ = ["simulate_field", "simulate_spacetime", "triples_to_data", "write_synthetic_dataset",
           "region_geojson"]
