"""Command-line pipeline: ingest -> variogram -> fit -> predict -> validate -> pstest -> report.

Each stage reads the files written by earlier stages under the configured
output directory. Exit codes: 0 ok, 2 configuration error, 3 data error,
4 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from collections import Counter
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, load_config, require_path
from .covariance import QUANTILE_PROBS, empirical_variogram, fit_variogram, variogram_quantiles
from .errors import DataError, PrefsampError
from .geo import make_grid, polygon_from_geojson
from .ingest import (
    Baseline, BaselineSource, FilterParams, Retention, aggregate_pocs, build_timelines,
    classify_retention, compute_baseline, filter_rows, log_normalize, parse_annual_csv, parse_site_metadata,
    read_observations, read_timelines, site_changes, write_observations, write_timelines,
    yearly_summary,
)
from .model import (
    PredictionSurface, SpaceTimeData, SpaceTimeModel, compare_structures, fit_map,
    fit_trend_regression, predict, validate_holdout,
)
from .pstest import (
    acf_pacf, correlate_site_changes, interpolate_missing, null_histogram, ps_test_series, scan_k,
)

log = logging.getLogger("prefsamp")


# ----------------------------------------------------------------------
# file helpers


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path: Path, header, rows):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            vals = [r.get(h) for h in header] if isinstance(r, dict) else r
            w.writerow([_fmt(v) for v in vals])


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, Path):
        return str(o)
    if hasattr(o, "value"):
        return o.value
    raise TypeError(f"not serialisable: {type(o).__name__}")


def write_json(path: Path, obj):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default, allow_nan=True)
        fh.write("\n")


def read_json(path: Path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _need(path: Path, command: str) -> Path:
    if not path.exists():
        raise DataError(f"missing {path}; run `prefsamp {command}` first")
    return path


class Outputs:
    """File layout under the output directory."""

    def __init__(self, cfg: RunConfig):
        self.root = cfg.output_dir

    observations = property(lambda s: s.root / "observations.csv")
    timelines = property(lambda s: s.root / "timelines.csv")
    ingest_summary = property(lambda s: s.root / "ingest_summary.json")
    variogram_dir = property(lambda s: s.root / "variogram")
    model = property(lambda s: s.root / "model.json")
    surface_dir = property(lambda s: s.root / "surfaces")
    validation = property(lambda s: s.root / "validation.json")
    validation_csv = property(lambda s: s.root / "validation_points.csv")
    pstest_dir = property(lambda s: s.root / "pstest")
    compare = property(lambda s: s.root / "compare.csv")
    report = property(lambda s: s.root / "report.md")
    report_json = property(lambda s: s.root / "report.json")

    def surface(self, year: int) -> Path:
        return self.surface_dir / f"surface_{year}.csv"


# ----------------------------------------------------------------------
# shared loaders


def _polygon(cfg: RunConfig):
    return polygon_from_geojson(require_path(cfg, "polygon"), cfg.projection)


def _load_data(cfg: RunConfig) -> tuple[SpaceTimeData, list, list]:
    out = Outputs(cfg)
    obs = read_observations(_need(out.observations, "ingest"))
    tls = read_timelines(_need(out.timelines, "ingest"))
    retention = {t.site_id: t.retention for t in tls}
    return SpaceTimeData.from_observations(obs, retention), obs, tls


def _load_model(cfg: RunConfig) -> tuple[SpaceTimeModel, SpaceTimeData, list, list]:
    data, obs, tls = _load_data(cfg)
    model = SpaceTimeModel.load(_need(Outputs(cfg).model, "fit"), data)
    return model, data, obs, tls


def _fit_kwargs(cfg: RunConfig) -> dict:
    return dict(priors=cfg.priors, kappa=cfg.model.kappa, optimizer=cfg.optimizer)


# ----------------------------------------------------------------------
# commands


def cmd_ingest(cfg: RunConfig) -> dict:
    data_dir = require_path(cfg, "data_dir")
    files = sorted(p for p in data_dir.iterdir() if p.suffix.lower() == ".csv") if data_dir.is_dir() else []
    if not files:
        raise DataError(f"no input files (*.csv) in {data_dir}")
    rows = []
    for f in files:
        rows.extend(parse_annual_csv(f))
    metadata = parse_site_metadata(cfg.paths.metadata) if cfg.paths.metadata else None
    polygon = _polygon(cfg) if cfg.paths.polygon else None
    params = FilterParams(parameter_code=cfg.ingest.parameter_code, start_year=cfg.start_year,
                          end_year=cfg.end_year, polygon=polygon, projection=cfg.projection)
    kept = filter_rows(rows, params)
    obs = aggregate_pocs(kept, metadata, cfg.projection)
    years = sorted({o.year for o in obs})
    start = cfg.start_year if cfg.start_year is not None else years[0]
    end = cfg.end_year if cfg.end_year is not None else years[-1]
    baseline = Baseline(cfg.ingest.baseline, BaselineSource.SUPPLIED) if cfg.ingest.baseline else None
    obs = log_normalize(obs, baseline, start_year=start if baseline is None else None)
    if baseline is None:
        baseline = compute_baseline(obs, start)
    tls = classify_retention(build_timelines(obs, metadata), start, end)
    out = Outputs(cfg)
    out.root.mkdir(parents=True, exist_ok=True)
    write_observations(out.observations, obs)
    write_timelines(out.timelines, tls)
    per_year = Counter(o.year for o in obs)
    summary = {
        "files": [f.name for f in files], "rows_read": len(rows), "rows_kept": len(kept),
        "n_observations": len(obs), "n_sites": len(tls),
        "multi_poc_site_years": sum(1 for o in obs if o.n_poc > 1),
        "baseline": {"value": baseline.value, "source": baseline.source.value},
        "start_year": start, "end_year": end,
        "per_year": {str(y): per_year[y] for y in sorted(per_year)},
        "retention": {c.value: sum(1 for t in tls if t.retention is c) for c in Retention},
    }
    write_json(out.ingest_summary, summary)
    for y in sorted(per_year):
        print(f"{y}: {per_year[y]} sites")
    return summary


def cmd_variogram(cfg: RunConfig) -> dict:
    out = Outputs(cfg)
    obs = read_observations(_need(out.observations, "ingest"))
    by_year = {}
    for o in obs:
        by_year.setdefault(o.year, []).append(o)
    vc = cfg.variogram
    fits, skipped = [], []
    for year in sorted(by_year):
        group = by_year[year]
        if len(group) < vc.min_sites:
            skipped.append({"year": year, "reason": f"{len(group)} sites (< {vc.min_sites})"})
            print(f"{year}: skipped, {len(group)} sites")
            continue
        pts = np.array([o.location for o in group])
        ev = empirical_variogram(pts, [o.z for o in group], vc.n_bins, vc.max_dist_km)
        write_csv(out.variogram_dir / f"variogram_{year}.csv", ["bin_center_km", "semivariance", "n_pairs"],
                  ev.rows())
        try:
            fit = fit_variogram(ev, cfg.model.kappa)
        except (ValueError, PrefsampError) as exc:
            skipped.append({"year": year, "reason": str(exc)})
            print(f"{year}: skipped, {exc}")
            continue
        fits.append({"year": year, "n_sites": len(group), "nugget": fit.nugget, "psill": fit.psill,
                     "range_km": fit.params.range_km, "residual": fit.residual, "_p": fit.params})
    header = ["year", "n_sites", "nugget", "psill", "range_km", "residual"]
    write_csv(out.variogram_dir / "params.csv", header, fits)
    result = {"fitted": len(fits), "skipped": skipped}
    if fits:
        q = variogram_quantiles([f["_p"] for f in fits], QUANTILE_PROBS)
        write_csv(out.variogram_dir / "quantiles.csv", ["prob", "range_km", "psill"], q)
        result["quantiles"] = q
    write_json(out.variogram_dir / "skipped.json", skipped)
    return result


def cmd_fit(cfg: RunConfig) -> SpaceTimeModel:
    data, _, _ = _load_data(cfg)
    model = fit_map(data, trend=cfg.model.trend, temporal=cfg.model.temporal,
                    retention_effects=cfg.model.retention_effects, **_fit_kwargs(cfg))
    model.save(Outputs(cfg).model)
    h = model.hyper
    print(f"range {h.range_km:.4g} km, sigma_w {h.sigma_w:.4g}, a {h.a:.4g}, tau_eps {h.tau_eps:.4g}, "
          f"objective {model.objective:.6g}, AIC {model.aic:.6g}")
    return model


def _surface_svg(surface: PredictionSurface, spacing: float) -> str:
    pts, vals = surface.points, surface.mean
    xmin, ymin = pts.min(axis=0) - spacing / 2
    xmax, ymax = pts.max(axis=0) + spacing / 2
    scale = 600.0 / max(xmax - xmin, ymax - ymin)
    w, hgt = (xmax - xmin) * scale, (ymax - ymin) * scale
    lo, hi = float(vals.min()), float(vals.max())
    span = hi - lo or 1.0
    cells = []
    for (x, y), v in zip(pts, vals):
        t = (v - lo) / span
        r, g, b = int(255 * t), int(64 + 96 * (1 - abs(2 * t - 1))), int(255 * (1 - t))
        cells.append(f'<rect x="{(x - spacing / 2 - xmin) * scale:.2f}" '
                     f'y="{(ymax - y - spacing / 2) * scale:.2f}" width="{spacing * scale:.2f}" '
                     f'height="{spacing * scale:.2f}" fill="#{r:02x}{g:02x}{b:02x}"/>')
    return ("<svg xmlns=\"http://www.w3.org/2000/svg\" "
            f'width="{w:.0f}" height="{hgt + 24:.0f}" viewBox="0 0 {w:.2f} {hgt + 24:.2f}">\n'
            + "\n".join(cells)
            + f'\n<text x="4" y="{hgt + 18:.2f}" font-size="14">{surface.year}: '
              f"mean z {lo:.3f} (blue) to {hi:.3f} (red)</text>\n</svg>\n")


def cmd_predict(cfg: RunConfig) -> list:
    model, data, _, _ = _load_model(cfg)
    grid = make_grid(_polygon(cfg), cfg.grid_spacing_km)
    years = cfg.predict.years or [int(y) for y in data.years]
    out = Outputs(cfg)
    out.surface_dir.mkdir(parents=True, exist_ok=True)
    for year in years:
        surf = predict(model, grid, year, cfg.grid_spacing_km)
        surf.write_csv(out.surface(year))
        if cfg.predict.svg:
            (out.surface_dir / f"surface_{year}.svg").write_text(
                _surface_svg(surf, cfg.grid_spacing_km), encoding="utf-8")
        print(f"{year}: {len(surf)} pixels, mean z {float(np.mean(surf.mean)):.4f}")
    return years


def cmd_validate(cfg: RunConfig) -> dict:
    data, _, _ = _load_data(cfg)
    rep = validate_holdout(data, cfg.validate.fraction, cfg.validate.seed, trend=cfg.model.trend,
                           temporal=cfg.model.temporal,
                           retention_effects=cfg.model.retention_effects, **_fit_kwargs(cfg))
    out = Outputs(cfg)
    d = rep.to_dict()
    write_json(out.validation, d)
    write_csv(out.validation_csv, ["site_id", "year", "z", "mean", "sd", "std_resid", "outside"], rep.rows)
    print(f"held out {rep.n_holdout}; outside 95% interval: {rep.outside_share:.3f} "
          f"(reference on the original data: {rep.reference_outside_share:.2f})")
    return d


def _yearly_sites(obs):
    by_year = {}
    for o in obs:
        by_year.setdefault(o.year, []).append(o)
    return {y: (np.array([o.location for o in g]), np.array([o.z for o in g]))
            for y, g in sorted(by_year.items())}


def cmd_pstest(cfg: RunConfig) -> dict:
    out = Outputs(cfg)
    obs = read_observations(_need(out.observations, "ingest"))
    tls = read_timelines(_need(out.timelines, "ingest"))
    poly = _polygon(cfg)
    pc = cfg.pstest
    yearly = _yearly_sites(obs)
    if pc.years:
        yearly = {y: v for y, v in yearly.items() if y in set(pc.years)}
    surfaces = {}
    for y, (pts, _) in yearly.items():
        if len(pts) >= pc.n_min:
            surfaces[y] = PredictionSurface.read_csv(_need(out.surface(y), "predict"),
                                                     spacing_km=cfg.grid_spacing_km)
    series = ps_test_series(yearly, surfaces, poly, k=pc.k, m=pc.m, seed=pc.seed, n_min=pc.n_min)
    interpolate_missing(series)
    out.pstest_dir.mkdir(parents=True, exist_ok=True)
    write_json(out.pstest_dir / "results.json", series.to_dict(include_null=True))
    write_csv(out.pstest_dir / "summary.csv",
              ["year", "n_sites", "k", "rho", "p_lower", "p_two_sided", "interpolated", "skipped"],
              [{**e.to_dict(), "k": pc.k} for e in series.entries])
    for e in series.entries:
        if e.result is not None:
            write_csv(out.pstest_dir / f"null_hist_{e.year}.csv", ["lo", "hi", "count", "contains_obs"],
                      null_histogram(e.result))
    all_years = sorted({o.year for o in obs})
    changes = {r["year"]: r for r in site_changes(tls, all_years)}
    adds = {y: changes[y]["added"] for y in changes}
    rems = {y: changes[y]["removed"] for y in changes}
    rho_all = series.rho_by_year(True)
    interp_years = [e.year for e in series.entries if e.interpolated]
    corr = {
        "with_interpolated": correlate_site_changes(rho_all, adds, rems, True, interp_years),
        "without_interpolated": correlate_site_changes(rho_all, adds, rems, False, interp_years),
    }
    write_json(out.pstest_dir / "site_changes.json", corr)
    diag = {}
    vals = [rho_all[y] for y in sorted(rho_all)]
    max_lag = min(pc.max_lag, len(vals) - 2)
    if max_lag >= 1:
        try:
            a = acf_pacf(vals, max_lag, pc.ci)
            diag = {"acf": a.acf, "pacf": a.pacf, "band": a.band, "n": a.n, "ci": pc.ci}
        except DataError as exc:
            diag = {"error": str(exc)}
    write_json(out.pstest_dir / "acf.json", diag)
    if pc.scan_ks:
        scans = {}
        for e in series.entries:
            if e.result is None:
                continue
            pts, resp = yearly[e.year]
            scans[str(e.year)] = scan_k(pts, resp, surfaces[e.year], poly, pc.scan_ks, pc.m, pc.seed, e.year)
        write_json(out.pstest_dir / "scan_k.json", scans)
    for e in series.entries:
        if e.result is not None:
            print(f"{e.year}: rho {e.rho:.3f}, p_lower {e.result.p_lower:.4f}")
        elif e.interpolated:
            print(f"{e.year}: rho {e.rho:.3f} (interpolated, {e.provenance})")
        else:
            print(f"{e.year}: skipped ({e.skipped})")
    return series.to_dict()


def cmd_compare(cfg: RunConfig) -> list:
    data, _, _ = _load_data(cfg)
    structures = cfg.compare or [
        {"trend": "none", "temporal": "static"}, {"trend": "none", "temporal": "iid"},
        {"trend": "none", "temporal": "ar1"}, {"trend": "rw1", "temporal": "ar1"},
    ]
    rows = compare_structures(data, structures, **_fit_kwargs(cfg))
    write_csv(Outputs(cfg).compare,
              ["index", "label", "trend", "temporal", "retention_effects", "objective", "loglik_ml",
               "aic", "delta_aic", "rank", "n_params", "error"], rows)
    for r in rows:
        print(f"{r['label']}: AIC {r['aic']}" + (f" error {r['error']}" if r["error"] else ""))
    return rows


def _md_table(header, rows):
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    for r in rows:
        lines.append("| " + " | ".join(r) + " |")
    return "\n".join(lines)


def _g(v, digits=4):
    if v is None:
        return "n/a"
    if isinstance(v, float):
        return f"{v:.{digits}g}"
    return str(v)


def cmd_report(cfg: RunConfig) -> dict:
    out = Outputs(cfg)
    obs = read_observations(_need(out.observations, "ingest"))
    tls = read_timelines(_need(out.timelines, "ingest"))
    report = {}
    counts = {c.value: sum(1 for t in tls if t.retention is c) for c in Retention}
    report["retention"] = counts
    summ = yearly_summary(obs)
    report["yearly"] = summ
    years = [r["year"] for r in summ]
    medians = [r["median"] for r in summ]
    trends = {}
    for order in (1, 2):
        try:
            trends[str(order)] = fit_trend_regression(years, medians, order).to_dict()
        except (DataError, ValueError) as exc:
            trends[str(order)] = {"error": str(exc)}
    report["trend_regression"] = trends
    report["model"] = read_json(out.model) if out.model.exists() else None
    report["validation"] = read_json(out.validation) if out.validation.exists() else None
    ps_path = out.pstest_dir / "results.json"
    report["pstest"] = read_json(ps_path) if ps_path.exists() else None
    sc_path = out.pstest_dir / "site_changes.json"
    report["site_changes"] = read_json(sc_path) if sc_path.exists() else None
    if report["pstest"]:
        for e in report["pstest"]["entries"]:
            e.pop("null_rhos", None)

    md = ["# Monitoring network analysis", "",
          "Estimates are MAP hyperparameters with Gaussian-conditional uncertainty given them.", "",
          "## Site retention", "",
          _md_table(["category", "sites"], [[k, str(v)] for k, v in counts.items()]), "",
          "## Yearly log-normalised values", "",
          _md_table(["year", "sites", "mean", "median"],
                    [[str(r["year"]), str(r["count"]), _g(r["mean"]), _g(r["median"])] for r in summ]),
          "", "## Trend regression on yearly medians", ""]
    for order, t in trends.items():
        if "error" in t:
            md.append(f"- order {order}: {t['error']}")
        else:
            coefs = ", ".join(_g(c) for c in t["coefficients"])
            md.append(f"- order {order}: coefficients [{coefs}], adjusted R2 {_g(t['adj_r2'])}")
    if "error" not in trends.get("2", {"error": ""}):
        md.append(f"- quadratic vs linear: F {_g(trends['2']['f_stat'])}, p {_g(trends['2']['f_pvalue'])}")
    md += ["", "## Fitted model", ""]
    m = report["model"]
    if m:
        hp = m["hyperparameters"]
        st = m["structure"]
        md += [f"- structure: {st['trend']} trend, {st['temporal']} Matérn field"
               + (", retention effects" if st["retention_effects"] else ""),
               f"- range {_g(hp['range_km'])} km, sigma_w {_g(hp['sigma_w'])}, a {_g(hp['a'])}, "
               f"tau_eps {_g(hp['tau_eps'])}, tau_rw {_g(hp['tau_rw'])}",
               f"- objective {_g(m['objective'], 8)}, AIC {_g(m['aic'], 8)}",
               f"- fixed effects: " + ", ".join(f"{k} {_g(v)}" for k, v in m["fixed_effects"].items())]
    else:
        md.append("not fitted (run `prefsamp fit`)")
    md += ["", "## Holdout validation", ""]
    v = report["validation"]
    if v:
        md += [f"- held out {v['n_holdout']} ({v['fraction']:.0%}), outside 95% interval: "
               f"{v['outside_share']:.3f}; reference on the original data: {v['reference_outside_share']:.2f}"]
    else:
        md.append("not run (run `prefsamp validate`)")
    md += ["", "## Preferential-sampling test series", ""]
    ps = report["pstest"]
    if ps:
        md.append(f"k = {ps['k']}, m = {ps['m']}, seed = {ps['seed']}. {ps['caveat']}.")
        md.append("")
        md.append(_md_table(["year", "sites", "rho", "p_lower", "p_two_sided", "note"],
                            [[str(e["year"]), _g(e["n_sites"]), _g(e["rho"]), _g(e["p_lower"]),
                              _g(e["p_two_sided"]),
                              e["provenance"] if e["interpolated"] else (e["skipped"] or "")]
                             for e in ps["entries"]]))
    else:
        md.append("not run (run `prefsamp pstest`)")
    sc = report["site_changes"]
    if sc:
        md += ["", "## Test statistic vs site changes", ""]
        rows = []
        for key, c in sc.items():
            rows.append([key.replace("_", " "),
                         _g(c["additions"]) if c["additions"] is not None else c["additions_error"],
                         _g(c["removals"]) if c["removals"] is not None else c["removals_error"]])
        md.append(_md_table(["series", "additions", "removals"], rows))
    out.report.write_text("\n".join(md) + "\n", encoding="utf-8")
    write_json(out.report_json, report)
    print(f"wrote {out.report}")
    return report


def cmd_run(cfg: RunConfig):
    cmd_ingest(cfg)
    cmd_variogram(cfg)
    cmd_fit(cfg)
    cmd_predict(cfg)
    cmd_validate(cfg)
    cmd_pstest(cfg)
    cmd_report(cfg)


COMMANDS = {
    "ingest": cmd_ingest, "variogram": cmd_variogram, "fit": cmd_fit, "predict": cmd_predict,
    "validate": cmd_validate, "pstest": cmd_pstest, "compare": cmd_compare, "report": cmd_report,
    "run": cmd_run,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="prefsamp", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name, help=f"run the {name} stage" if name != "run" else "run every stage")
        s.add_argument("-c", "--config", required=True, help="TOML or JSON run configuration")
    s = sub.add_parser("synth", help="write the bundled synthetic dataset and config")
    s.add_argument("out_dir")
    s.add_argument("--seed", type=int, default=20240611)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "synth":
            from .synthetic import write_synthetic_dataset
            paths = write_synthetic_dataset(args.out_dir, seed=args.seed)
            print(f"wrote synthetic dataset; config at {paths['config']}")
            return 0
        cfg = load_config(args.config)
        COMMANDS[args.command](cfg)
    except PrefsampError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
