"""Run configuration loaded from TOML or JSON.

Every section is optional; unknown keys and out-of-range values raise
:class:`ConfigError` naming the offending field. Relative paths resolve
against the directory holding the config file.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields, asdict
from pathlib import Path

from .errors import ConfigError
from .geo import AlbersSpec
from .ingest import PM10_PARAMETER_CODE
from .model.design import Temporal, TrendKind
from .model.fit import OptimizerConfig
from .model.priors import PcPriorSpec


def _num(name, v, lo=None, hi=None, lo_open=False, hi_open=False, integer=False):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{name} must be a number, got {v!r}")
    if integer and int(v) != v:
        raise ConfigError(f"{name} must be an integer, got {v!r}")
    if not math.isfinite(v):
        raise ConfigError(f"{name} must be finite")
    if lo is not None and (v < lo or (lo_open and v == lo)):
        raise ConfigError(f"{name} must be {'>' if lo_open else '>='} {lo}, got {v}")
    if hi is not None and (v > hi or (hi_open and v == hi)):
        raise ConfigError(f"{name} must be {'<' if hi_open else '<='} {hi}, got {v}")
    return int(v) if integer else float(v)


def _years_list(name, v):
    if v is None:
        return None
    if not isinstance(v, list) or not v:
        raise ConfigError(f"{name} must be a non-empty list of years")
    return [_num(f"{name}[{i}]", y, 1900, 2100, integer=True) for i, y in enumerate(v)]


@dataclass
class Paths:
    data_dir: Path | None = None
    metadata: Path | None = None
    polygon: Path | None = None
    output_dir: Path = Path("out")


@dataclass
class IngestConfig:
    parameter_code: str = PM10_PARAMETER_CODE
    baseline: float | None = None


@dataclass
class ModelConfig:
    trend: str = "rw1"
    temporal: str = "ar1"
    kappa: float = 1.0
    retention_effects: bool = False


@dataclass
class VariogramConfig:
    n_bins: int = 12
    max_dist_km: float = 80.0
    min_sites: int = 4


@dataclass
class PredictConfig:
    years: list | None = None
    svg: bool = False


@dataclass
class PsTestConfig:
    k: int = 3
    m: int = 1000
    seed: int = 0
    n_min: int = 10
    years: list | None = None
    scan_ks: list | None = None
    max_lag: int = 10
    ci: float = 0.95


@dataclass
class ValidateConfig:
    fraction: float = 0.1
    seed: int = 0


@dataclass
class RunConfig:
    paths: Paths = field(default_factory=Paths)
    projection: AlbersSpec = field(default_factory=AlbersSpec)
    ingest: IngestConfig = field(default_factory=IngestConfig)
    start_year: int | None = None
    end_year: int | None = None
    model: ModelConfig = field(default_factory=ModelConfig)
    priors: PcPriorSpec = field(default_factory=PcPriorSpec)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    grid_spacing_km: float = 2.0
    variogram: VariogramConfig = field(default_factory=VariogramConfig)
    predict: PredictConfig = field(default_factory=PredictConfig)
    pstest: PsTestConfig = field(default_factory=PsTestConfig)
    validate: ValidateConfig = field(default_factory=ValidateConfig)
    compare: list | None = None
    base_dir: Path = Path(".")

    @property
    def output_dir(self) -> Path:
        return self.paths.output_dir

    def to_dict(self) -> dict:
        d = {
            "paths": {k: (str(v) if v is not None else None) for k, v in asdict(self.paths).items()},
            "projection": asdict(self.projection), "ingest": asdict(self.ingest),
            "years": {"start": self.start_year, "end": self.end_year},
            "model": asdict(self.model), "priors": self.priors.to_dict(),
            "optimizer": asdict(self.optimizer), "grid": {"spacing_km": self.grid_spacing_km},
            "variogram": asdict(self.variogram), "predict": asdict(self.predict),
            "pstest": asdict(self.pstest), "validate": asdict(self.validate),
            "compare": self.compare,
        }
        return d


SECTIONS = ("paths", "projection", "ingest", "years", "model", "priors", "optimizer", "grid",
            "variogram", "predict", "pstest", "validate", "compare")


def _check_keys(section, d, allowed):
    if not isinstance(d, dict):
        raise ConfigError(f"{section} must be a table/object")
    extra = sorted(set(d) - set(allowed))
    if extra:
        raise ConfigError(f"{section}: unknown key(s) {', '.join(extra)}")


def _section(cls, name, d):
    allowed = [f.name for f in fields(cls)]
    _check_keys(name, d, allowed)
    return d


def parse_config(raw: dict, base_dir: Path | str = ".") -> RunConfig:
    base = Path(base_dir)
    _check_keys("config", raw, SECTIONS)
    cfg = RunConfig(base_dir=base)

    p = _section(Paths, "paths", raw.get("paths", {}))
    paths = Paths()
    for key in ("data_dir", "metadata", "polygon", "output_dir"):
        if key in p and p[key] is not None:
            if not isinstance(p[key], str):
                raise ConfigError(f"paths.{key} must be a string")
            setattr(paths, key, base / p[key])
    if "output_dir" not in p:
        paths.output_dir = base / "out"
    cfg.paths = paths

    pr = raw.get("projection", {})
    _check_keys("projection", pr, [f.name for f in fields(AlbersSpec)])
    for k, v in pr.items():
        if k == "ellipsoid":
            if not isinstance(v, bool):
                raise ConfigError("projection.ellipsoid must be true or false")
        else:
            _num(f"projection.{k}", v)
    try:
        cfg.projection = AlbersSpec(**pr)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"projection: {exc}") from None

    ing = _section(IngestConfig, "ingest", raw.get("ingest", {}))
    cfg.ingest = IngestConfig(parameter_code=str(ing.get("parameter_code", PM10_PARAMETER_CODE)))
    if ing.get("baseline") is not None:
        cfg.ingest.baseline = _num("ingest.baseline", ing["baseline"], 0, lo_open=True)

    yrs = raw.get("years", {})
    _check_keys("years", yrs, ["start", "end"])
    if "start" in yrs:
        cfg.start_year = _num("years.start", yrs["start"], 1900, 2100, integer=True)
    if "end" in yrs:
        cfg.end_year = _num("years.end", yrs["end"], 1900, 2100, integer=True)
    if cfg.start_year is not None and cfg.end_year is not None and cfg.end_year <= cfg.start_year:
        raise ConfigError("years.end must be after years.start")

    mo = _section(ModelConfig, "model", raw.get("model", {}))
    mc = ModelConfig()
    if "trend" in mo:
        try:
            mc.trend = TrendKind(mo["trend"]).value
        except ValueError:
            raise ConfigError(f"model.trend must be one of {[t.value for t in TrendKind]}") from None
    if "temporal" in mo:
        try:
            mc.temporal = Temporal(mo["temporal"]).value
        except ValueError:
            raise ConfigError(f"model.temporal must be one of {[t.value for t in Temporal]}") from None
    if "kappa" in mo:
        mc.kappa = _num("model.kappa", mo["kappa"], 0.5, 2.0)
    if "retention_effects" in mo:
        if not isinstance(mo["retention_effects"], bool):
            raise ConfigError("model.retention_effects must be true or false")
        mc.retention_effects = mo["retention_effects"]
    cfg.model = mc

    pri = raw.get("priors", {})
    _check_keys("priors", pri, [f.name for f in fields(PcPriorSpec)])
    vals = {}
    for k, v in pri.items():
        if k == "rw_sd" and v is None:
            continue
        if k.endswith("_prob"):
            vals[k] = _num(f"priors.{k}", v, 0, 1, lo_open=True, hi_open=True)
        else:
            vals[k] = _num(f"priors.{k}", v, 0, lo_open=True)
    cfg.priors = PcPriorSpec(**vals)

    op = raw.get("optimizer", {})
    _check_keys("optimizer", op, [f.name for f in fields(OptimizerConfig)])
    ov = {}
    for k, v in op.items():
        if k == "method":
            ov[k] = v
        elif k in ("max_iter", "n_starts"):
            ov[k] = _num(f"optimizer.{k}", v, 1, integer=True)
        else:
            ov[k] = _num(f"optimizer.{k}", v, 0, lo_open=True)
    cfg.optimizer = OptimizerConfig(**ov)

    gr = raw.get("grid", {})
    _check_keys("grid", gr, ["spacing_km"])
    if "spacing_km" in gr:
        cfg.grid_spacing_km = _num("grid.spacing_km", gr["spacing_km"], 0, lo_open=True)

    vg = _section(VariogramConfig, "variogram", raw.get("variogram", {}))
    cfg.variogram = VariogramConfig(
        n_bins=_num("variogram.n_bins", vg.get("n_bins", 12), 4, integer=True),
        max_dist_km=_num("variogram.max_dist_km", vg.get("max_dist_km", 80.0), 0, lo_open=True),
        min_sites=_num("variogram.min_sites", vg.get("min_sites", 4), 2, integer=True),
    )

    pdc = _section(PredictConfig, "predict", raw.get("predict", {}))
    svg = pdc.get("svg", False)
    if not isinstance(svg, bool):
        raise ConfigError("predict.svg must be true or false")
    cfg.predict = PredictConfig(years=_years_list("predict.years", pdc.get("years")), svg=svg)

    ps = _section(PsTestConfig, "pstest", raw.get("pstest", {}))
    k = _num("pstest.k", ps.get("k", 3), 1, integer=True)
    n_min = _num("pstest.n_min", ps.get("n_min", 10), 3, integer=True)
    if n_min < k + 2:
        raise ConfigError(f"pstest.n_min must be at least k + 2 = {k + 2}")
    scan = ps.get("scan_ks")
    if scan is not None:
        if not isinstance(scan, list) or not scan:
            raise ConfigError("pstest.scan_ks must be a non-empty list")
        scan = [_num(f"pstest.scan_ks[{i}]", v, 1, integer=True) for i, v in enumerate(scan)]
    cfg.pstest = PsTestConfig(
        k=k, m=_num("pstest.m", ps.get("m", 1000), 1, integer=True),
        seed=_num("pstest.seed", ps.get("seed", 0), 0, integer=True), n_min=n_min,
        years=_years_list("pstest.years", ps.get("years")), scan_ks=scan,
        max_lag=_num("pstest.max_lag", ps.get("max_lag", 10), 1, integer=True),
        ci=_num("pstest.ci", ps.get("ci", 0.95), 0, 1, lo_open=True, hi_open=True),
    )

    va = _section(ValidateConfig, "validate", raw.get("validate", {}))
    cfg.validate = ValidateConfig(
        fraction=_num("validate.fraction", va.get("fraction", 0.1), 0, 0.5, lo_open=True),
        seed=_num("validate.seed", va.get("seed", 0), 0, integer=True),
    )

    comp = raw.get("compare")
    if comp is not None:
        if not isinstance(comp, list) or len(comp) < 2:
            raise ConfigError("compare must list at least two structures")
        out = []
        for i, c in enumerate(comp):
            _check_keys(f"compare[{i}]", c, ["trend", "temporal", "retention_effects"])
            try:
                out.append({"trend": TrendKind(c.get("trend", "rw1")).value,
                            "temporal": Temporal(c.get("temporal", "ar1")).value,
                            "retention_effects": bool(c.get("retention_effects", False))})
            except ValueError as exc:
                raise ConfigError(f"compare[{i}]: {exc}") from None
        cfg.compare = out
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text(encoding="utf-8")
    try:
        if path.suffix.lower() == ".toml":
            try:
                import tomllib
            except ModuleNotFoundError:
                import tomli as tomllib
            raw = tomllib.loads(text)
        else:
            raw = json.loads(text)
    except ValueError as exc:
        raise ConfigError(f"{path}: cannot parse config: {exc}") from None
    return parse_config(raw, path.parent)


def require_path(cfg: RunConfig, key: str, must_exist: bool = True) -> Path:
    p = getattr(cfg.paths, key)
    if p is None:
        raise ConfigError(f"paths.{key} is required for this command")
    if must_exist and not p.exists():
        raise ConfigError(f"paths.{key} does not exist: {p}")
    return p
