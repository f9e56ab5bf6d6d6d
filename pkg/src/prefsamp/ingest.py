"""Read EPA annual-summary files and reduce them to one value per site-year.

Pipeline: :func:`parse_annual_csv` -> :func:`filter_rows` ->
:func:`aggregate_pocs` -> :func:`log_normalize`. Site timelines and the
retention categories are derived from the aggregated observations.
"""
from __future__ import annotations

import csv
import io
import math
from collections import defaultdict
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError, SchemaError
from .geo import AlbersSpec, Polygon, contains_many, project_lonlat

PM10_PARAMETER_CODE = "81102"
MAX_LOCATION_DRIFT_KM = 1.0

# canonical field -> accepted header spellings
_ANNUAL_COLUMNS = {
    "state_code": ("State Code",),
    "county_code": ("County Code",),
    "site_number": ("Site Num", "Site Number"),
    "parameter_code": ("Parameter Code",),
    "poc": ("POC",),
    "latitude": ("Latitude",),
    "longitude": ("Longitude",),
    "datum": ("Datum",),
    "year": ("Year",),
    "arithmetic_mean": ("Arithmetic Mean",),
    "event_type": ("Event Type",),
}
_OPTIONAL_COLUMNS = {
    "sample_duration": ("Sample Duration",),
    "metric_used": ("Metric Used",),
    "observation_count": ("Observation Count",),
    "pollutant_standard": ("Pollutant Standard",),
    "local_site_name": ("Local Site Name",),
}
_SITE_COLUMNS = {
    "state_code": ("State Code",),
    "county_code": ("County Code",),
    "site_number": ("Site Number", "Site Num"),
    "latitude": ("Latitude",),
    "longitude": ("Longitude",),
}
_SITE_OPTIONAL = {
    "land_use": ("Land Use",),
    "location_setting": ("Location Setting",),
    "monitoring_objective": ("Monitoring Objective",),
    "local_site_name": ("Local Site Name",),
}

# most preferred first; the EPA exclusion row wins over local-authority variants
EVENT_PREFERENCE = (
    "Events Excluded",
    "Concurred Events Excluded",
    "No Events",
    "Concurred Events Included",
    "Events Included",
)


def make_site_id(state, county, site) -> str:
    return f"{int(state):02d}-{int(county):03d}-{int(site):04d}"


@dataclass(frozen=True)
class RawRow:
    state_code: str
    county_code: str
    site_number: str
    parameter_code: str
    poc: int
    year: int
    latitude: float
    longitude: float
    datum: str
    arithmetic_mean: float
    event_type: str
    sample_duration: str = ""
    metric_used: str = ""
    observation_count: int = 0
    pollutant_standard: str = ""
    local_site_name: str = ""
    line: int = 0
    source: str = ""

    @property
    def site_id(self) -> str:
        return make_site_id(self.state_code, self.county_code, self.site_number)


@dataclass(frozen=True)
class Observation:
    site_id: str
    x_km: float
    y_km: float
    year: int
    pm_mean: float
    z: float = float("nan")
    n_poc: int = 1

    @property
    def location(self):
        return (self.x_km, self.y_km)


class BaselineSource(str, Enum):
    COMPUTED = "ComputedFromStartYear"
    SUPPLIED = "Supplied"


class Retention(str, Enum):
    CONTINUOUS = "Continuous"
    ADDED = "Added"
    REMOVED = "Removed"
    ADDED_THEN_REMOVED = "AddedThenRemoved"


@dataclass
class SiteTimeline:
    site_id: str
    years_active: tuple
    retention: Retention | None = None
    land_use: str = ""
    location_setting: str = ""
    monitoring_objective: str = ""


@dataclass(frozen=True)
class SiteMeta:
    site_id: str
    latitude: float
    longitude: float
    land_use: str = ""
    location_setting: str = ""
    monitoring_objective: str = ""
    local_site_name: str = ""


@dataclass(frozen=True)
class Baseline:
    value: float
    source: BaselineSource = BaselineSource.SUPPLIED

    def __post_init__(self):
        if not self.value > 0:
            raise DataError("baseline must be positive")


def _resolve_header(header, required, optional, source):
    lookup = {h.strip(): i for i, h in enumerate(header)}
    cols = {}
    missing = []
    for key, names in required.items():
        for n in names:
            if n in lookup:
                cols[key] = lookup[n]
                break
        else:
            missing.append(names[0])
    if missing:
        raise SchemaError(f"{source}: missing required column(s): {', '.join(missing)}")
    for key, names in optional.items():
        for n in names:
            if n in lookup:
                cols[key] = lookup[n]
                break
    return cols


def _open_text(stream):
    if isinstance(stream, (str, Path)):
        return open(stream, newline="", encoding="utf-8-sig"), str(stream)
    return stream, getattr(stream, "name", "<stream>")


def parse_annual_csv(stream, source: str | None = None) -> list[RawRow]:
    """Parse an EPA ``annual_conc_by_monitor`` CSV into :class:`RawRow` records.

    Unknown columns are ignored. All malformed numeric fields are collected
    and reported together with their line numbers.
    """
    fh, name = _open_text(stream)
    name = source or name
    try:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{name}: file is empty") from None
        cols = _resolve_header(header, _ANNUAL_COLUMNS, _OPTIONAL_COLUMNS, name)
        rows, problems = [], []
        for lineno, rec in enumerate(reader, start=2):
            if not rec or all(not c.strip() for c in rec):
                continue

            def get(key, default=""):
                i = cols.get(key)
                return rec[i].strip() if i is not None and i < len(rec) else default

            try:
                year = int(get("year"))
                lat = float(get("latitude"))
                lon = float(get("longitude"))
                mean = float(get("arithmetic_mean"))
                poc = int(get("poc"))
                count_s = get("observation_count", "0")
                count = int(float(count_s)) if count_s else 0
                for key in ("state_code", "county_code", "site_number"):
                    int(get(key))
            except ValueError as exc:
                problems.append(f"line {lineno}: {exc}")
                continue
            if not (1900 <= year <= 2100):
                problems.append(f"line {lineno}: year {year} out of range")
                continue
            if mean < 0 or not math.isfinite(mean):
                problems.append(f"line {lineno}: negative or non-finite arithmetic mean {mean}")
                continue
            rows.append(RawRow(
                state_code=get("state_code"), county_code=get("county_code"),
                site_number=get("site_number"), parameter_code=get("parameter_code"),
                poc=poc, year=year, latitude=lat, longitude=lon, datum=get("datum"),
                arithmetic_mean=mean, event_type=get("event_type"),
                sample_duration=get("sample_duration"), metric_used=get("metric_used"),
                observation_count=count, pollutant_standard=get("pollutant_standard"),
                local_site_name=get("local_site_name"), line=lineno, source=name,
            ))
        if problems:
            raise DataError(f"{name}: malformed rows\n  " + "\n  ".join(problems))
        if not rows:
            raise DataError(f"{name}: no data rows")
        return rows
    finally:
        if fh is not stream:
            fh.close()


def parse_site_metadata(stream, source: str | None = None) -> dict[str, SiteMeta]:
    """Parse an EPA site-description CSV keyed by site id."""
    fh, name = _open_text(stream)
    name = source or name
    try:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{name}: file is empty") from None
        cols = _resolve_header(header, _SITE_COLUMNS, _SITE_OPTIONAL, name)
        out = {}
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue

            def get(key):
                i = cols.get(key)
                return rec[i].strip() if i is not None and i < len(rec) else ""

            try:
                sid = make_site_id(get("state_code"), get("county_code"), get("site_number"))
                out[sid] = SiteMeta(
                    site_id=sid, latitude=float(get("latitude")), longitude=float(get("longitude")),
                    land_use=get("land_use"), location_setting=get("location_setting"),
                    monitoring_objective=get("monitoring_objective"),
                    local_site_name=get("local_site_name"),
                )
            except ValueError as exc:
                raise DataError(f"{name}: line {lineno}: {exc}") from None
        return out
    finally:
        if fh is not stream:
            fh.close()


@dataclass
class FilterParams:
    parameter_code: str = PM10_PARAMETER_CODE
    start_year: int | None = None
    end_year: int | None = None
    polygon: Polygon | None = None
    projection: AlbersSpec = field(default_factory=AlbersSpec)


def _pick_event_variant(group):
    present = {r.event_type for r in group}
    for pref in EVENT_PREFERENCE:
        if pref in present:
            return [r for r in group if r.event_type == pref]
    # unknown labels: keep everything and let the duplicate rule decide
    return list(group)


def filter_rows(rows: Sequence[RawRow], params: FilterParams = FilterParams()) -> list[RawRow]:
    """Select one row per (site, year, POC) for the configured pollutant.

    Keeps the pollutant code, the year window and sites inside the polygon.
    Among event variants the EPA events-excluded row is preferred; any
    remaining duplicates keep the row with the larger observation count
    (file order breaks ties).
    """
    code = str(params.parameter_code)
    kept = [r for r in rows if r.parameter_code == code]
    if params.start_year is not None:
        kept = [r for r in kept if r.year >= params.start_year]
    if params.end_year is not None:
        kept = [r for r in kept if r.year <= params.end_year]
    if params.polygon is not None and kept:
        x, y = project_lonlat([r.longitude for r in kept], [r.latitude for r in kept], params.projection)
        inside = contains_many(params.polygon, np.column_stack([x, y]))
        kept = [r for r, ok in zip(kept, inside) if ok]
    groups = defaultdict(list)
    for r in kept:
        groups[(r.site_id, r.year, r.poc)].append(r)
    out = []
    for key in sorted(groups):
        variants = _pick_event_variant(groups[key])
        best = variants[0]
        for r in variants[1:]:
            if r.observation_count > best.observation_count:
                best = r
        out.append(best)
    if not out:
        raise DataError("no rows remain after filtering")
    return out


def site_locations(rows: Sequence[RawRow], metadata: dict[str, SiteMeta] | None = None,
                   projection: AlbersSpec = AlbersSpec(),
                   max_drift_km: float = MAX_LOCATION_DRIFT_KM) -> dict[str, tuple[float, float]]:
    """Projected location per site: metadata if given, else the most recent row.

    Raises ``DataError`` if any row sits more than ``max_drift_km`` from it.
    """
    by_site = defaultdict(list)
    for r in rows:
        by_site[r.site_id].append(r)
    out = {}
    for sid, rs in sorted(by_site.items()):
        if metadata and sid in metadata:
            lon, lat = metadata[sid].longitude, metadata[sid].latitude
        else:
            latest = max(rs, key=lambda r: (r.year, r.line))
            lon, lat = latest.longitude, latest.latitude
        x0, y0 = project_lonlat(lon, lat, projection)
        xs, ys = project_lonlat([r.longitude for r in rs], [r.latitude for r in rs], projection)
        drift = np.hypot(xs - x0, ys - y0)
        if np.any(drift > max_drift_km):
            worst = rs[int(np.argmax(drift))]
            raise DataError(
                f"site {sid}: coordinates drift {drift.max():.2f} km "
                f"(year {worst.year}, POC {worst.poc}); limit {max_drift_km} km"
            )
        out[sid] = (float(x0), float(y0))
    return out


def aggregate_pocs(rows: Sequence[RawRow], metadata: dict[str, SiteMeta] | None = None,
                   projection: AlbersSpec = AlbersSpec()) -> list[Observation]:
    """Average the distinct POC means of each site-year into one observation."""
    locs = site_locations(rows, metadata, projection)
    groups = defaultdict(dict)
    for r in rows:
        groups[(r.site_id, r.year)].setdefault(r.poc, []).append(r.arithmetic_mean)
    out = []
    for (sid, year) in sorted(groups):
        pocs = groups[(sid, year)]
        means = [sum(v) / len(v) for _, v in sorted(pocs.items())]
        x, y = locs[sid]
        out.append(Observation(site_id=sid, x_km=x, y_km=y, year=year,
                               pm_mean=float(sum(means) / len(means)), n_poc=len(means)))
    return out


def compute_baseline(observations: Sequence[Observation], start_year: int | None = None) -> Baseline:
    """Mean concentration over the first year (``start_year`` or the earliest present)."""
    if not observations:
        raise DataError("no observations")
    year = start_year if start_year is not None else min(o.year for o in observations)
    vals = [o.pm_mean for o in observations if o.year == year]
    if not vals:
        raise DataError(f"no observations in baseline year {year}")
    return Baseline(value=float(np.mean(vals)), source=BaselineSource.COMPUTED)


def log_normalize(observations: Sequence[Observation], baseline: Baseline | None = None,
                  start_year: int | None = None) -> list[Observation]:
    """Set ``z = ln(pm_mean / baseline)``; the baseline defaults to the first-year mean."""
    bad = [o for o in observations if not o.pm_mean > 0]
    if bad:
        o = bad[0]
        raise DataError(f"non-positive concentration {o.pm_mean} at {o.site_id} in {o.year}")
    if baseline is None:
        baseline = compute_baseline(observations, start_year)
    return [replace(o, z=math.log(o.pm_mean / baseline.value)) for o in observations]


def build_timelines(observations: Sequence[Observation],
                    metadata: dict[str, SiteMeta] | None = None) -> list[SiteTimeline]:
    years = defaultdict(set)
    for o in observations:
        years[o.site_id].add(o.year)
    out = []
    for sid in sorted(years):
        meta = (metadata or {}).get(sid)
        out.append(SiteTimeline(
            site_id=sid, years_active=tuple(sorted(years[sid])),
            land_use=meta.land_use if meta else "",
            location_setting=meta.location_setting if meta else "",
            monitoring_objective=meta.monitoring_objective if meta else "",
        ))
    return out


def classify_retention(timelines: Iterable[SiteTimeline], start_year: int, end_year: int) -> list[SiteTimeline]:
    """Label each site by presence in the first and last network years."""
    out = []
    for tl in timelines:
        if not tl.years_active:
            raise DataError(f"site {tl.site_id} has no active years")
        first = start_year in tl.years_active
        last = end_year in tl.years_active
        if first and last:
            cat = Retention.CONTINUOUS
        elif first:
            cat = Retention.REMOVED
        elif last:
            cat = Retention.ADDED
        else:
            cat = Retention.ADDED_THEN_REMOVED
        out.append(replace(tl, retention=cat))
    return out


def yearly_summary(observations: Sequence[Observation]) -> list[dict]:
    """Per-year count, mean and quartiles of ``z`` (linear interpolation)."""
    by_year = defaultdict(list)
    for o in observations:
        by_year[o.year].append(o.z)
    rows = []
    for year in sorted(by_year):
        z = np.asarray(by_year[year], dtype=float)
        q = np.quantile(z, [0.0, 0.25, 0.5, 0.75, 1.0])
        rows.append({
            "year": year, "count": int(len(z)), "mean": float(z.mean()),
            "min": float(q[0]), "q25": float(q[1]), "median": float(q[2]),
            "q75": float(q[3]), "max": float(q[4]),
        })
    return rows


def site_changes(timelines: Sequence[SiteTimeline], years: Sequence[int]) -> list[dict]:
    """Sites added and removed relative to the previous year, for each year."""
    active = {y: set() for y in years}
    for tl in timelines:
        for y in tl.years_active:
            if y in active:
                active[y].add(tl.site_id)
    out = []
    years = sorted(years)
    for i, y in enumerate(years):
        prev = active[years[i - 1]] if i else set()
        cur = active[y]
        out.append({"year": y, "n_sites": len(cur),
                    "added": len(cur - prev) if i else 0,
                    "removed": len(prev - cur) if i else 0})
    return out


# ----------------------------------------------------------------------
# canonical files

OBS_HEADER = ["site_id", "x_km", "y_km", "year", "pm_mean", "z"]


def _fmt(v: float) -> str:
    return repr(float(v))


def write_observations(path, observations: Sequence[Observation]):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(OBS_HEADER)
        for o in observations:
            w.writerow([o.site_id, _fmt(o.x_km), _fmt(o.y_km), o.year, _fmt(o.pm_mean), _fmt(o.z)])


def read_observations(path) -> list[Observation]:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = set(OBS_HEADER) - set(reader.fieldnames or [])
        if missing:
            raise SchemaError(f"{path}: missing columns {sorted(missing)}")
        for i, rec in enumerate(reader, start=2):
            try:
                out.append(Observation(
                    site_id=rec["site_id"], x_km=float(rec["x_km"]), y_km=float(rec["y_km"]),
                    year=int(rec["year"]), pm_mean=float(rec["pm_mean"]), z=float(rec["z"]),
                ))
            except ValueError as exc:
                raise DataError(f"{path}: line {i}: {exc}") from None
    return out


TIMELINE_HEADER = ["site_id", "first_year", "last_year", "n_years", "years", "retention",
                   "land_use", "location_setting", "monitoring_objective"]


def write_timelines(path, timelines: Sequence[SiteTimeline]):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TIMELINE_HEADER)
        for t in timelines:
            w.writerow([t.site_id, t.years_active[0], t.years_active[-1], len(t.years_active),
                        ";".join(map(str, t.years_active)),
                        t.retention.value if t.retention else "",
                        t.land_use, t.location_setting, t.monitoring_objective])


def read_timelines(path) -> list[SiteTimeline]:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for rec in csv.DictReader(fh):
            out.append(SiteTimeline(
                site_id=rec["site_id"],
                years_active=tuple(int(y) for y in rec["years"].split(";") if y),
                retention=Retention(rec["retention"]) if rec["retention"] else None,
                land_use=rec.get("land_use", ""), location_setting=rec.get("location_setting", ""),
                monitoring_objective=rec.get("monitoring_objective", ""),
            ))
    return out


def read_text_rows(text: str) -> list[RawRow]:
    """Convenience for tests and small fixtures."""
    return parse_annual_csv(io.StringIO(text), source="<text>")
