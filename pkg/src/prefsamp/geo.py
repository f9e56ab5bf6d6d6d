"""Planar geometry for the monitoring region.

Sites arrive as longitude/latitude and are mapped to kilometres with an
Albers equal-area conic projection. Polygons, containment, uniform
sampling and prediction grids all work in that projected plane.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .errors import DataError

# GRS80 ellipsoid, metres
GRS80_A = 6378137.0
GRS80_F = 1.0 / 298.257222101
# authalic radius of GRS80, used by the spherical variant
AUTHALIC_RADIUS = 6371007.181


class GeoError(DataError, ValueError):
    """Raised for invalid geometry or projection parameters."""


class GeoPoint(NamedTuple):
    lon: float
    lat: float


class PointKm(NamedTuple):
    x: float
    y: float


@dataclass(frozen=True)
class AlbersSpec:
    """Albers equal-area conic parameters; angles in degrees, offsets in km.

    Defaults are the California Teale Albers definition (EPSG:3310).
    """

    lon0: float = -120.0
    lat0: float = 0.0
    lat1: float = 34.0
    lat2: float = 40.5
    false_easting: float = 0.0
    false_northing: float = -4000.0
    ellipsoid: bool = True

    def __post_init__(self):
        for name in ("lon0", "lat0", "lat1", "lat2"):
            v = getattr(self, name)
            if not math.isfinite(v):
                raise GeoError(f"{name} must be finite")
        if self.lat1 > self.lat2:
            raise GeoError("lat1 must not exceed lat2")
        if math.isclose(self.lat1, -self.lat2, abs_tol=1e-12):
            raise GeoError("standard parallels symmetric about the equator give a degenerate cone")
        if not (-90 <= self.lat1 <= 90 and -90 <= self.lat2 <= 90 and -90 <= self.lat0 <= 90):
            raise GeoError("latitudes must lie in [-90, 90]")

    @classmethod
    def from_dict(cls, d: dict) -> "AlbersSpec":
        known = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        return cls(**known)


def _authalic_q(sinphi, e):
    if e == 0.0:
        return 2.0 * sinphi
    es = e * sinphi
    return (1.0 - e * e) * (
        sinphi / (1.0 - es * es) - (0.5 / e) * np.log((1.0 - es) / (1.0 + es))
    )


def _m(phi, e):
    s = np.sin(phi)
    return np.cos(phi) / np.sqrt(1.0 - (e * s) ** 2)


def _constants(spec: AlbersSpec):
    if spec.ellipsoid:
        a = GRS80_A
        e = math.sqrt(GRS80_F * (2.0 - GRS80_F))
    else:
        a = AUTHALIC_RADIUS
        e = 0.0
    p0, p1, p2 = (math.radians(v) for v in (spec.lat0, spec.lat1, spec.lat2))
    q0, q1, q2 = (_authalic_q(math.sin(p), e) for p in (p0, p1, p2))
    m1, m2 = _m(p1, e), _m(p2, e)
    if math.isclose(p1, p2):
        n = math.sin(p1)
    else:
        n = (m1 * m1 - m2 * m2) / (q2 - q1)
    if abs(n) < 1e-12:
        raise GeoError("degenerate cone constant")
    c = m1 * m1 + n * q1
    rho0 = a * math.sqrt(c - n * q0) / n
    return a, e, n, c, rho0


def project_lonlat(lon, lat, spec: AlbersSpec = AlbersSpec()):
    """Vectorised forward Albers projection; returns (x_km, y_km) arrays."""
    lon = np.asarray(lon, dtype=float)
    lat = np.asarray(lat, dtype=float)
    if np.any(~np.isfinite(lon)) or np.any(~np.isfinite(lat)):
        raise GeoError("coordinates must be finite")
    if np.any(np.abs(lat) > 90) or np.any(np.abs(lon) > 180):
        raise GeoError("longitude must be in [-180, 180] and latitude in [-90, 90]")
    a, e, n, c, rho0 = _constants(spec)
    q = _authalic_q(np.sin(np.radians(lat)), e)
    arg = c - n * q
    if np.any(arg < -1e-12):
        raise GeoError("point lies outside the domain of this projection")
    rho = a * np.sqrt(np.maximum(arg, 0.0)) / n
    dlon = np.radians(lon - spec.lon0)
    dlon = (dlon + np.pi) % (2 * np.pi) - np.pi
    theta = n * dlon
    x = rho * np.sin(theta) / 1000.0 + spec.false_easting
    y = (rho0 - rho * np.cos(theta)) / 1000.0 + spec.false_northing
    return x, y


def project(p: GeoPoint, spec: AlbersSpec = AlbersSpec()) -> PointKm:
    x, y = project_lonlat(p.lon, p.lat, spec)
    return PointKm(float(x), float(y))


def _ring_area(ring: np.ndarray) -> float:
    x, y = ring[:, 0], ring[:, 1]
    return 0.5 * float(np.dot(x[:-1], y[1:]) - np.dot(x[1:], y[:-1]))


@dataclass
class Polygon:
    """Polygon in projected km; rings are closed (first vertex == last).

    Containment uses the even-odd rule over all rings, so holes and
    disjoint parts of a multipolygon are handled alike.
    """

    rings: list = field(default_factory=list)

    def __post_init__(self):
        checked = []
        for ring in self.rings:
            r = np.asarray(ring, dtype=float)
            if r.ndim != 2 or r.shape[1] != 2:
                raise GeoError("ring must be an (n, 2) array")
            if len(r) < 4:
                raise GeoError("ring needs at least 4 vertices including closure")
            if not np.allclose(r[0], r[-1]):
                raise GeoError("ring is not closed")
            if not np.all(np.isfinite(r)):
                raise GeoError("ring vertices must be finite")
            checked.append(r)
        if not checked:
            raise GeoError("polygon has no rings")
        self.rings = checked

    @property
    def bounds(self):
        allv = np.vstack(self.rings)
        return (*allv.min(axis=0), *allv.max(axis=0))

    @property
    def area(self) -> float:
        total = 0.0
        for i, ring in enumerate(self.rings):
            depth = 0
            for j, other in enumerate(self.rings):
                if i != j and _even_odd(other, ring[:1])[0]:
                    depth += 1
            total += (-1) ** depth * abs(_ring_area(ring))
        return total

    @classmethod
    def box(cls, xmin, ymin, xmax, ymax) -> "Polygon":
        return cls([[(xmin, ymin), (xmax, ymin), (xmax, ymax), (xmin, ymax), (xmin, ymin)]])


def _even_odd(ring: np.ndarray, pts: np.ndarray) -> np.ndarray:
    x, y = pts[:, 0][:, None], pts[:, 1][:, None]
    x1, y1 = ring[:-1, 0][None, :], ring[:-1, 1][None, :]
    x2, y2 = ring[1:, 0][None, :], ring[1:, 1][None, :]
    straddles = (y1 > y) != (y2 > y)
    with np.errstate(divide="ignore", invalid="ignore"):
        xcross = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
    crossings = np.sum(straddles & (x < xcross), axis=1)
    return crossings % 2 == 1


def _on_boundary(ring: np.ndarray, pts: np.ndarray, tol: float) -> np.ndarray:
    p = pts[:, None, :]
    a = ring[:-1][None, :, :]
    b = ring[1:][None, :, :]
    ab = b - a
    denom = np.sum(ab * ab, axis=2)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(denom > 0, np.sum((p - a) * ab, axis=2) / denom, 0.0)
    t = np.clip(t, 0.0, 1.0)
    closest = a + t[..., None] * ab
    d2 = np.sum((p - closest) ** 2, axis=2)
    return np.any(d2 <= tol * tol, axis=1)


def contains_many(poly: Polygon, pts, tol: float = 1e-9) -> np.ndarray:
    """Vectorised containment; boundary points count as inside."""
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    inside = np.zeros(len(pts), dtype=bool)
    boundary = np.zeros(len(pts), dtype=bool)
    # chunk to bound memory on large grids
    step = max(1, 200_000 // max(1, sum(len(r) for r in poly.rings)))
    for lo in range(0, len(pts), step):
        chunk = pts[lo:lo + step]
        ins = np.zeros(len(chunk), dtype=bool)
        bnd = np.zeros(len(chunk), dtype=bool)
        for ring in poly.rings:
            ins ^= _even_odd(ring, chunk)
            bnd |= _on_boundary(ring, chunk, tol)
        inside[lo:lo + step] = ins
        boundary[lo:lo + step] = bnd
    return inside | boundary


def contains(poly: Polygon, p) -> bool:
    return bool(contains_many(poly, np.asarray(p, dtype=float).reshape(1, 2))[0])


def sample_uniform(poly: Polygon, n: int, rng: np.random.Generator,
                   batch: int | None = None) -> np.ndarray:
    """Draw ``n`` points uniformly over the polygon by bounding-box rejection.

    Returns an ``(n, 2)`` array. Raises ``GeoError`` if the acceptance rate
    drops below 1e-6, which signals a degenerate polygon.
    """
    if n < 1:
        raise GeoError("n must be >= 1")
    xmin, ymin, xmax, ymax = poly.bounds
    if not (xmax > xmin and ymax > ymin):
        raise GeoError("polygon has zero-area bounding box")
    out = []
    have = 0
    drawn = 0
    batch = batch or max(64, 2 * n)
    while have < n:
        cand = np.column_stack([
            rng.uniform(xmin, xmax, batch),
            rng.uniform(ymin, ymax, batch),
        ])
        drawn += batch
        keep = cand[contains_many(poly, cand)]
        out.append(keep)
        have += len(keep)
        if drawn >= 10_000_000 and have / drawn < 1e-6:
            raise GeoError("rejection acceptance rate below 1e-6; polygon is degenerate")
        if have == 0 and drawn >= 1_000_000 and poly.area <= 0:
            raise GeoError("polygon has zero area")
    return np.vstack(out)[:n]


def make_grid(poly: Polygon, spacing_km: float = 2.0) -> np.ndarray:
    """Cell centres at ``(i + 0.5) * spacing`` from the lower-left bbox corner, clipped to the polygon."""
    if not spacing_km > 0:
        raise GeoError("spacing must be positive")
    xmin, ymin, xmax, ymax = poly.bounds
    nx = int(math.ceil((xmax - xmin) / spacing_km - 1e-9))
    ny = int(math.ceil((ymax - ymin) / spacing_km - 1e-9))
    xs = xmin + (np.arange(max(nx, 1)) + 0.5) * spacing_km
    ys = ymin + (np.arange(max(ny, 1)) + 0.5) * spacing_km
    gx, gy = np.meshgrid(xs, ys)
    pts = np.column_stack([gx.ravel(), gy.ravel()])
    pts = pts[contains_many(poly, pts)]
    if len(pts) == 0:
        raise GeoError(f"grid at spacing {spacing_km} km has no cells inside the polygon")
    return pts


def polygon_from_geojson(obj, spec: AlbersSpec = AlbersSpec()) -> Polygon:
    """Build a projected polygon from a GeoJSON Polygon/MultiPolygon (lon/lat).

    Accepts a geometry, a Feature, or a FeatureCollection (all polygonal
    features are merged).
    """
    if isinstance(obj, (str, Path)):
        obj = json.loads(Path(obj).read_text(encoding="utf-8"))
    kind = obj.get("type")
    if kind == "FeatureCollection":
        rings = []
        for feat in obj["features"]:
            rings.extend(polygon_from_geojson(feat, spec).rings)
        return Polygon(rings)
    if kind == "Feature":
        return polygon_from_geojson(obj["geometry"], spec)
    if kind == "Polygon":
        parts = [obj["coordinates"]]
    elif kind == "MultiPolygon":
        parts = obj["coordinates"]
    else:
        raise GeoError(f"unsupported GeoJSON type {kind!r}")
    rings = []
    for part in parts:
        for ring in part:
            ll = np.asarray(ring, dtype=float)[:, :2]
            x, y = project_lonlat(ll[:, 0], ll[:, 1], spec)
            r = np.column_stack([x, y])
            if not np.allclose(r[0], r[-1]):
                r = np.vstack([r, r[:1]])
            rings.append(r)
    return Polygon(rings)


def polygon_to_geojson(lonlat_rings: Sequence) -> dict:
    return {"type": "Polygon", "coordinates": [[list(map(float, p)) for p in r] for r in lonlat_rings]}
