import csv
import json
import shutil

import pytest

from prefsamp import cli
from prefsamp.config import load_config
from prefsamp.errors import ConfigError, NumericalError
from prefsamp.ingest import Retention


def _config(root):
    return json.loads((root / "config.json").read_text())


def _write_config(root, cfg, name="config.json"):
    path = root / name
    path.write_text(json.dumps(cfg, indent=1))
    return path


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert cli.main(["synth", str(root), "--seed", "5"]) == 0
    cfg = _config(root)
    cfg["pstest"]["m"] = 10
    cfg["pstest"]["scan_ks"] = [2, 3]
    path = _write_config(root, cfg)
    assert cli.main(["run", "-c", str(path)]) == 0
    assert cli.main(["compare", "-c", str(path)]) == 0
    return root, path


def _rows(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def test_outputs_exist(pipeline):
    root, _ = pipeline
    out = root / "out"
    for name in ("observations.csv", "timelines.csv", "ingest_summary.json", "model.json",
                 "validation.json", "validation_points.csv", "compare.csv", "report.md", "report.json",
                 "variogram/params.csv", "variogram/quantiles.csv", "pstest/results.json",
                 "pstest/summary.csv", "pstest/site_changes.json", "pstest/acf.json", "pstest/scan_k.json"):
        assert (out / name).is_file(), name
    assert len(list((out / "surfaces").glob("surface_*.csv"))) == 15


def test_ingest_counts_match_script(pipeline):
    root, _ = pipeline
    summary = json.loads((root / "out" / "ingest_summary.json").read_text())
    site_years, pocs = set(), {}
    for path in sorted((root / "raw").glob("*.csv")):
        for rec in _rows(path):
            if rec["Parameter Code"] != "81102":
                continue
            key = (rec["County Code"], rec["Site Num"], rec["Year"])
            site_years.add(key)
            pocs.setdefault(key, set()).add(rec["POC"])
    assert summary["n_observations"] == len(site_years)
    assert summary["multi_poc_site_years"] == sum(len(v) > 1 for v in pocs.values())
    assert summary["baseline"]["source"] == "ComputedFromStartYear"


def test_variogram_quantile_rows(pipeline):
    root, _ = pipeline
    q = _rows(root / "out" / "variogram" / "quantiles.csv")
    assert [float(r["prob"]) for r in q] == [0, .01, .05, .1, .15, .25, .5, .75, .9, .95, .99, 1]
    for path in (root / "out" / "variogram").glob("variogram_*.csv"):
        rows = _rows(path)
        assert list(rows[0]) == ["bin_center_km", "semivariance", "n_pairs"]
        assert all(int(r["n_pairs"]) >= 1 and float(r["semivariance"]) >= 0 for r in rows)


def test_pstest_schema(pipeline):
    root, _ = pipeline
    res = json.loads((root / "out" / "pstest" / "results.json").read_text())
    assert set(res) == {"k", "m", "seed", "n_min", "caveat", "entries"}
    assert res["m"] == 10
    keys = {"year", "n_sites", "rho", "p_lower", "p_two_sided", "skipped", "interpolated", "provenance"}
    tested = skipped = 0
    for e in res["entries"]:
        assert keys <= set(e)
        if e["p_lower"] is not None:
            tested += 1
            assert len(e["null_rhos"]) == 10
            assert 0 < e["p_lower"] <= 1 and -1 <= e["rho"] <= 1
        else:
            skipped += 1
            assert e["skipped"]
    assert tested >= 10 and skipped == 1
    filled = [e for e in res["entries"] if e["interpolated"]]
    assert len(filled) == 1 and filled[0]["provenance"].startswith("mean of")


def test_report_retention(pipeline):
    root, _ = pipeline
    report = json.loads((root / "out" / "report.json").read_text())
    assert sorted(report["retention"]) == sorted(c.value for c in Retention)
    assert all(v > 0 for v in report["retention"].values())
    md = (root / "out" / "report.md").read_text()
    for c in Retention:
        assert f"| {c.value} |" in md
    assert "reference on the original data: 0.35" in md


def test_rerun_in_place_identical(pipeline):
    root, path = pipeline
    out = root / "out"
    before = {p: p.read_bytes() for p in out.rglob("*") if p.is_file()}
    for cmd in ("ingest", "variogram", "pstest", "report"):
        assert cli.main([cmd, "-c", str(path)]) == 0
    after = {p: p.read_bytes() for p in out.rglob("*") if p.is_file()}
    assert before == after


def test_toml_config(pipeline, tmp_path):
    root, _ = pipeline
    work = tmp_path / "w"
    shutil.copytree(root / "raw", work / "raw")
    for name in ("sites.csv", "region.geojson"):
        shutil.copy(root / name, work / name)
    (work / "config.toml").write_text(
        '[paths]\ndata_dir = "raw"\nmetadata = "sites.csv"\npolygon = "region.geojson"\n'
        'output_dir = "out"\n\n[years]\nstart = 2000\nend = 2014\n')
    assert cli.main(["ingest", "-c", str(work / "config.toml")]) == 0
    assert (work / "out" / "observations.csv").read_bytes() == (root / "out" / "observations.csv").read_bytes()


@pytest.mark.parametrize("section,key,value", [
    ("pstest", "k", 0), ("pstest", "m", 0), ("validate", "fraction", 0.9), ("model", "kappa", 3.0),
    ("grid", "spacing_km", -1), ("priors", "range_prob", 1.5), ("model", "trend", "cubic"),
    ("pstest", "n_min", 3),
])
def test_config_rejects_field(pipeline, tmp_path, section, key, value, capsys):
    root, _ = pipeline
    cfg = _config(root)
    cfg.setdefault(section, {})[key] = value
    cfg["paths"] = {k: str(root / v) for k, v in cfg["paths"].items()}
    path = _write_config(tmp_path, cfg)
    assert cli.main(["ingest", "-c", str(path)]) == 2
    assert f"{section}.{key}" in capsys.readouterr().err


def test_unknown_key_rejected(tmp_path, capsys):
    path = _write_config(tmp_path, {"pstest": {"kk": 3}})
    assert cli.main(["report", "-c", str(path)]) == 2
    assert "kk" in capsys.readouterr().err


def test_missing_artifact_names_command(tmp_path, capsys):
    path = _write_config(tmp_path, {"paths": {"output_dir": "out"}})
    assert cli.main(["fit", "-c", str(path)]) == 3
    assert "prefsamp ingest" in capsys.readouterr().err


def test_empty_data_dir(tmp_path, capsys):
    (tmp_path / "raw").mkdir()
    path = _write_config(tmp_path, {"paths": {"data_dir": "raw"}})
    assert cli.main(["ingest", "-c", str(path)]) == 3
    assert "no input files" in capsys.readouterr().err


def test_missing_config_file(tmp_path):
    assert cli.main(["ingest", "-c", str(tmp_path / "nope.json")]) == 2


def test_numerical_exit_code(tmp_path, monkeypatch):
    path = _write_config(tmp_path, {})

    def boom(cfg):
        raise NumericalError("singular")

    monkeypatch.setitem(cli.COMMANDS, "fit", boom)
    assert cli.main(["fit", "-c", str(path)]) == 4


def test_load_config_paths_relative(tmp_path):
    path = _write_config(tmp_path, {"paths": {"data_dir": "raw"}})
    cfg = load_config(path)
    assert cfg.paths.data_dir == tmp_path / "raw"
    assert cfg.output_dir == tmp_path / "out"
    with pytest.raises(ConfigError):
        load_config(_write_config(tmp_path, {"projection": {"lat1": "x"}}, "bad.json"))
