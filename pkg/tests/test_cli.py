import json

import numpy as np
import pandas as pd
import pytest

from sogmodel.cli import (
    EXIT_CONFIG,
    EXIT_DATA,
    EXIT_NUMERIC,
    ConfigError,
    PipelineConfig,
    derive_seed,
    exit_code_for,
    main,
)
from sogmodel.geostat import KrigingError
from sogmodel.io import file_digest, read_csv
from sogmodel.metrics import CLASSIFICATION_FIELDS

SMALL = """
seed = 3
folds = 3
explain_sample = 200
calibration_bins = 10

[classifier]
n_rounds = 6
cadence = 3
[classifier.tree]
max_depth = 3
min_samples_leaf = 20

[regressor]
n_rounds = 6
cadence = 3
[regressor.tree]
max_depth = 3
min_samples_leaf = 20
"""


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    cfg = root / "config.toml"
    cfg.write_text(SMALL)
    assert run("simulate", "--config", cfg, "--out", root / "sim", "--n", 1500) == 0
    ingest = root / "sim" / "ingest.csv"
    assert run("train-two-stage", "--config", cfg, "--out", root / "train", "--input", ingest) == 0
    assert run("evaluate", "--config", cfg, "--out", root / "eval", "--input", ingest, "--oof", root / "train" / "oof.csv") == 0
    return root


def test_outputs_carry_schema_line_and_manifest(pipeline):
    for sub, names in (
        ("sim", ["ingest.csv", "truth.csv", "synth_config.json"]),
        ("train", ["model.json", "oof.csv", "folds.csv", "training_summary.json"]),
        ("eval", ["report.json", "roc.csv", "pr.csv", "calibration.csv", "calibration_classifier.csv"]),
    ):
        d = pipeline / sub
        man = json.loads((d / "run_manifest.json").read_text())
        assert set(man["outputs"]) == set(names)
        for n in names:
            assert man["outputs"][n] == file_digest(d / n)
            if n.endswith(".csv"):
                assert (d / n).read_text().startswith("# schema_version: 1\n")
        assert not [p for p in d.iterdir() if p.name.startswith(".")]
        assert {"config_hash", "seeds", "versions", "inputs", "timings_seconds"} <= set(man)


def test_report_fields(pipeline):
    rep = json.loads((pipeline / "eval" / "report.json").read_text())
    assert set(CLASSIFICATION_FIELDS) <= set(rep["classification"])
    for scale in ("sqrt_scale", "original_scale"):
        assert set(rep["regression"][scale]) == {"r2", "mae", "rmse"}
    assert list(read_csv(pipeline / "eval" / "roc.csv").columns) == ["fpr", "tpr", "threshold"]
    assert list(read_csv(pipeline / "eval" / "pr.csv").columns) == ["recall", "precision", "threshold"]


def test_training_summary_and_oof(pipeline):
    summ = json.loads((pipeline / "train" / "training_summary.json").read_text())
    assert len(summ["folds"]) == 3 and all("auc" in f and "r2_sqrt" in f for f in summ["folds"])
    oof = read_csv(pipeline / "train" / "oof.csv")
    clf = oof[oof.stage == "classifier"]
    assert sorted(clf.row_id) == list(range(1500))


def test_explain_and_risk_map(pipeline, tmp_path):
    ingest = pipeline / "sim" / "ingest.csv"
    before = file_digest(ingest)
    assert run("explain", "--out", tmp_path / "ex", "--model", pipeline / "train" / "model.json", "--input", ingest, "--sample", 100) == 0
    meta = json.loads((tmp_path / "ex" / "explain_metadata.json").read_text())
    assert meta["classifier"]["scale"] == "probit_latent" and meta["regressor"]["scale"] == "sqrt_sog_latent"
    shap = read_csv(tmp_path / "ex" / "shap_values_classifier.csv")
    assert len(shap) == 100 and "base" in shap.columns
    curve = tmp_path / "curve.csv"
    pd.DataFrame({"icec_tenths": [0, 5, 10], "max_knots": ["inf", 6, 0]}).to_csv(curve, index=False)
    assert run("risk-map", "--out", tmp_path / "risk", "--input", ingest, "--curve", curve, "--top-n", 5) == 0
    grid = read_csv(tmp_path / "risk" / "risk_grid.csv")
    assert grid["n"].sum() == 1500 and grid.proportion.between(0, 1).all()
    assert len(read_csv(tmp_path / "risk" / "risk_top_cells.csv")) == 5
    assert file_digest(ingest) == before


def test_ingest_composition(pipeline, tmp_path):
    assert run("ingest", "--out", tmp_path / "ing", "--input", pipeline / "sim" / "ingest.csv") == 0
    comp = read_csv(tmp_path / "ing" / "composition.csv")
    for _, g in comp.groupby(["variable", "sog_class"]):
        assert g.percent.sum() == pytest.approx(100.0, abs=0.01)
    summ = json.loads((tmp_path / "ing" / "ingest_summary.json").read_text())
    assert summ["n_kept"] == 1500


def test_collocate_from_raster(pipeline, tmp_path):
    df = read_csv(pipeline / "sim" / "ingest.csv", dtype={"mmsi": str})
    small = df.drop(columns=["icec"]).head(50)
    inp = tmp_path / "in.csv"
    small.to_csv(inp, index=False)
    day = pd.to_datetime(small.timestamp, utc=True).dt.strftime("%Y-%m-%d")
    lon_cell = np.floor(df.lon / 0.5) * 0.5
    lat_cell = np.floor(df.lat / 0.5) * 0.5
    rows = []
    for d in sorted(set(day)):
        cells = pd.DataFrame({"lon_cell": lon_cell, "lat_cell": lat_cell}).drop_duplicates().head(60)
        rows.append(cells.assign(date=d, value=np.linspace(0, 1, len(cells))))
    ras = tmp_path / "icec.csv"
    pd.concat(rows)[["date", "lon_cell", "lat_cell", "value"]].to_csv(ras, index=False)
    assert run("collocate", "--out", tmp_path / "col", "--input", inp, "--raster", f"icec={ras}") == 0
    out = read_csv(tmp_path / "col" / "collocated.csv")
    assert out.icec.notna().all() and out.icec.between(0, 1).all()
    methods = read_csv(tmp_path / "col" / "collocation_methods.csv")
    assert methods["count"].sum() == 50


def test_empty_csv_clean_error(tmp_path, capsys):
    empty = tmp_path / "empty.csv"
    empty.write_text("")
    out = tmp_path / "never"
    assert run("ingest", "--out", out, "--input", empty) == EXIT_DATA
    assert not out.exists()
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["status"] == "error" and err["exit_code"] == EXIT_DATA and "empty" in err["message"]


def test_failed_run_leaves_existing_dir_clean(tmp_path):
    out = tmp_path / "o"
    out.mkdir()
    (out / "keep.txt").write_text("x")
    bad = tmp_path / "bad.csv"
    bad.write_text("mmsi,timestamp\n1,2015-07-01\n")
    assert run("ingest", "--out", out, "--input", bad) == EXIT_DATA
    assert [p.name for p in out.iterdir()] == ["keep.txt"]


def test_config_errors(tmp_path, capsys):
    cfg = tmp_path / "c.toml"
    cfg.write_text("folds = 5\nbogus = 1\n")
    assert run("simulate", "--config", cfg, "--out", tmp_path / "x") == EXIT_CONFIG
    assert "bogus" in capsys.readouterr().err
    cfg.write_text("folds = \n")
    assert run("simulate", "--config", cfg, "--out", tmp_path / "x") == EXIT_CONFIG
    assert "line 1" in capsys.readouterr().err
    assert run("simulate", "--out", tmp_path / "x", "--zero-prevalence", 1.5) == EXIT_CONFIG
    assert run("risk-map", "--out", tmp_path / "x", "--input", tmp_path / "c.toml") == EXIT_CONFIG
    assert not (tmp_path / "x").exists()


def test_flags_override_config(tmp_path):
    from argparse import Namespace

    from sogmodel.cli import resolve_config

    cfg = tmp_path / "c.toml"
    cfg.write_text("seed = 1\nfolds = 4\n[classifier]\nn_rounds = 9\n")
    c = resolve_config(Namespace(config=cfg, seed=7, folds=None, n_rounds=3))
    assert (c.seed, c.folds, c.classifier.n_rounds, c.regressor.n_rounds) == (7, 4, 3, 3)


def test_pipeline_config_validation():
    with pytest.raises(ConfigError):
        PipelineConfig(bounds=(-138, -172, 66.6, 72.5))
    with pytest.raises(ConfigError):
        PipelineConfig(months=(13,))
    with pytest.raises(ConfigError):
        PipelineConfig(resolution=0)
    with pytest.raises(ConfigError):
        PipelineConfig.from_mapping({"classifier": {"tree": {"depth": 3}}})
    c = PipelineConfig()
    assert c.bounds == (-172.0, -138.0, 66.6, 72.5) and c.months == (7, 8, 9, 10) and c.resolution == 0.5


def test_seed_derivation_and_exit_codes():
    assert derive_seed(1, "split") == derive_seed(1, "split")
    assert derive_seed(1, "split") != derive_seed(1, "subsample") != derive_seed(2, "split")
    assert PipelineConfig(seed=5).stage_config("classifier").seed == derive_seed(5, "classifier") % 1_000_003
    assert exit_code_for(KrigingError("x")) == EXIT_NUMERIC
    assert exit_code_for(np.linalg.LinAlgError("x")) == EXIT_NUMERIC
    assert exit_code_for(ConfigError("x")) == EXIT_CONFIG
    assert exit_code_for(FileNotFoundError("x")) == EXIT_DATA
    assert exit_code_for(RuntimeError("x")) is None
