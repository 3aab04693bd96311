"""Command-line pipeline: ingest, collocate, train, evaluate, explain,
risk-map and simulate.

Configuration comes from an optional TOML file; command-line flags override
it. Every command writes its outputs to ``--out`` through a staging
directory, so a failed command leaves nothing behind, and finishes by
writing ``run_manifest.json``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure. Errors are also printed to stderr as one JSON record.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import platform
import sys
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from . import FEATURE_NAMES, __version__
from .features import (
    AIS_COLUMNS,
    CONTINUOUS,
    ENV_COLUMNS,
    assign_time_id,
    build_feature_matrix,
    composition_table,
    filter_study_window,
    raw_covariates,
    validate_env,
    validate_records,
)
from .io import StagedOutput, file_digest, read_csv, read_json, write_csv, write_json, write_json_atomic
from .mixed import TrainConfig
from .trees import TreeParams

log = logging.getLogger("sogmodel")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


# ------------------------------------------------------------------ config


def derive_seed(root, tag):
    """Per-purpose seed derived from the root seed and a text tag."""
    ss = np.random.SeedSequence([int(root), zlib.crc32(tag.encode())])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def _train_config(d, where):
    d = dict(d or {})
    tree = d.pop("tree", {}) or {}
    allowed = {f.name for f in dataclasses.fields(TrainConfig)} - {"tree", "seed"}
    bad = set(d) - allowed
    if bad:
        raise ConfigError(f"{where}: unknown key(s) {sorted(bad)}")
    bad = set(tree) - {f.name for f in dataclasses.fields(TreeParams)}
    if bad:
        raise ConfigError(f"{where}.tree: unknown key(s) {sorted(bad)}")
    try:
        if d.get("fixed_variances") is not None:
            d["fixed_variances"] = tuple(d["fixed_variances"])
        return TrainConfig(tree=TreeParams(**tree), **d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


@dataclass
class PipelineConfig:
    seed: int = 0
    folds: int = 5
    resolution: float = 0.5
    bounds: tuple = (-172.0, -138.0, 66.6, 72.5)
    months: tuple = (7, 8, 9, 10)
    threshold: float = 0.5
    calibration_bins: int = 20
    explain_sample: int = 20000
    top_n: int = 10
    curve: str | None = None
    classifier: TrainConfig = field(default_factory=TrainConfig)
    regressor: TrainConfig = field(default_factory=TrainConfig)
    collocation: dict = field(default_factory=dict)

    def __post_init__(self):
        lo_lon, hi_lon, lo_lat, hi_lat = self.bounds
        if not (lo_lon < hi_lon and lo_lat < hi_lat):
            raise ConfigError("bounds must be (lon_min, lon_max, lat_min, lat_max) with min < max")
        if not self.months or not set(self.months) <= set(range(1, 13)):
            raise ConfigError("months must be a non-empty subset of 1..12")
        if self.resolution <= 0:
            raise ConfigError("resolution must be positive")
        if self.folds < 2:
            raise ConfigError("folds must be >= 2")
        if not 0 < self.threshold < 1:
            raise ConfigError("threshold must lie in (0, 1)")

    @classmethod
    def from_mapping(cls, d):
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        bad = set(d) - known
        if bad:
            raise ConfigError(f"unknown configuration key(s) {sorted(bad)}")
        for stage in ("classifier", "regressor"):
            if stage in d:
                d[stage] = _train_config(d[stage], stage)
        for key in ("bounds", "months"):
            if key in d:
                d[key] = tuple(d[key])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def stage_config(self, stage):
        """Stage training config with its seed derived from the root seed."""
        base = getattr(self, stage)
        return dataclasses.replace(base, seed=derive_seed(self.seed, stage) % 1_000_003)

    def to_dict(self):
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}
        d["bounds"], d["months"] = list(self.bounds), list(self.months)
        d["classifier"] = self.classifier.to_dict()
        d["regressor"] = self.regressor.to_dict()
        return d

    def digest(self):
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def load_config(path):
    if path is None:
        return {}
    try:
        import tomllib
    except ModuleNotFoundError:  # Python < 3.11
        import tomli as tomllib
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"{p}: config file not found")
    try:
        with open(p, "rb") as fh:
            return tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{p}: {exc}") from None


def resolve_config(args) -> PipelineConfig:
    d = load_config(getattr(args, "config", None))
    overrides = {
        "seed": "seed",
        "folds": "folds",
        "resolution": "resolution",
        "threshold": "threshold",
        "calibration_bins": "bins",
        "explain_sample": "sample",
        "top_n": "top_n",
        "curve": "curve",
    }
    for key, attr in overrides.items():
        v = getattr(args, attr, None)
        if v is not None:
            d[key] = v
    for stage in ("classifier", "regressor"):
        sub = dict(d.get(stage, {}) or {})
        for key, attr in (("n_rounds", "n_rounds"), ("learning_rate", "learning_rate")):
            v = getattr(args, attr, None)
            if v is not None:
                sub[key] = v
        if sub:
            d[stage] = sub
    return PipelineConfig.from_mapping(d)


# ------------------------------------------------------------------ helpers


def _read_table(path):
    df = read_csv(path, dtype={"mmsi": str, "vessel_group": str})
    if df.empty:
        from .io import DataFileError

        raise DataFileError(f"{path}: no data rows")
    return df


def _split(df):
    missing = [c for c in ENV_COLUMNS if c not in df.columns]
    if missing:
        from .features import FeatureError

        raise FeatureError(f"environmental column(s) {missing} absent; run `collocate` first")
    return validate_records(df[list(AIS_COLUMNS)]), validate_env(df)


def _iso(ts):
    return pd.to_datetime(ts, utc=True).dt.strftime("%Y-%m-%dT%H:%M:%SZ")


def _records_frame(df):
    out = df.copy()
    out["timestamp"] = _iso(out["timestamp"])
    return out


# ----------------------------------------------------------------- commands


def cmd_simulate(args, cfg: PipelineConfig, out: StagedOutput):
    from .synth import SynthConfig, generate, to_ingest_frame

    kw = {"seed": cfg.seed}
    if args.n is not None:
        kw["n"] = args.n
    if args.zero_prevalence is not None:
        kw["zero_prevalence"] = args.zero_prevalence
    try:
        scfg = SynthConfig(**kw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    records, env, truth = generate(scfg)
    write_csv(to_ingest_frame(records, env), out.path("ingest.csv"))
    write_csv(truth.to_frame(), out.path("truth.csv"))
    write_json(dataclasses.asdict(scfg), out.path("synth_config.json"))
    return {"n": scfg.n}


def cmd_ingest(args, cfg: PipelineConfig, out: StagedOutput):
    raw = _read_table(args.input)
    records = validate_records(raw)
    kept = filter_study_window(records, cfg.bounds, cfg.months)
    if kept.empty:
        from .features import FeatureError

        raise FeatureError("no records inside the study bounds and season")
    kept = kept.reset_index(drop=True)
    has_env = all(c in kept.columns for c in ENV_COLUMNS)
    if has_env:
        validate_env(kept)
    write_csv(_records_frame(kept), out.path("records.csv"))
    comp = pd.concat([composition_table(kept, "vessel_group"), composition_table(kept, "nav_status")], ignore_index=True)
    write_csv(comp, out.path("composition.csv"))
    summary = {
        "n_input": len(raw),
        "n_kept": len(kept),
        "n_outside_window": len(raw) - len(kept),
        "positive_sog_fraction": float((kept["sog"] > 0).mean()),
        "environment_present": has_env,
        "bounds": list(cfg.bounds),
        "months": list(cfg.months),
    }
    write_json(summary, out.path("ingest_summary.json"))
    return summary


def cmd_collocate(args, cfg: PipelineConfig, out: StagedOutput):
    from .geostat import CollocationConfig, VariableSpec, collocate, read_raster_csv

    df = _read_table(args.input)
    records = validate_records(df[list(AIS_COLUMNS)])
    fields = {}
    for item in args.raster or []:
        if "=" not in item:
            raise ConfigError(f"--raster expects VAR=PATH, got {item!r}")
        name, path = item.split("=", 1)
        fields[name] = read_raster_csv(path, cfg.resolution)
    if not fields:
        raise ConfigError("collocate needs at least one --raster VAR=PATH")
    cc = dict(cfg.collocation)
    variables = {k: VariableSpec(**v) for k, v in (cc.pop("variables", {}) or {}).items()}
    try:
        ccfg = CollocationConfig(variables=variables, resolution=cfg.resolution, **cc)
    except TypeError as exc:
        raise ConfigError(f"collocation: {exc}") from None
    day = assign_time_id(records["timestamp"])
    values, methods = collocate(records["lon"].to_numpy(), records["lat"].to_numpy(), day, fields, ccfg)
    merged = df.copy()
    for name in values.columns:
        merged[name] = values[name].to_numpy()
    merged["timestamp"] = _iso(records["timestamp"])
    write_csv(merged, out.path("collocated.csv"))
    counts = methods.melt(var_name="variable", value_name="method").value_counts().rename("count").reset_index()
    counts = counts.sort_values(["variable", "method"], kind="mergesort").reset_index(drop=True)
    write_csv(counts, out.path("collocation_methods.csv"))
    return {"variables": sorted(fields)}


def _train(args, cfg: PipelineConfig, out: StagedOutput, stages):
    from .metrics import regression_metrics, roc_auc
    from .two_stage import StageConfigs, derive_binary_label, make_fold_plan, train_two_stage

    df = _read_table(args.input)
    records, env = _split(df)
    fs, encoder = build_feature_matrix(records, env)
    labels = derive_binary_label(fs.sog)
    plan = make_fold_plan(labels, cfg.folds, seed=derive_seed(cfg.seed, "subsample"), split_seed=derive_seed(cfg.seed, "split"))
    configs = StageConfigs(cfg.stage_config("classifier"), cfg.stage_config("regressor"))
    model, oof = train_two_stage(fs.X, fs.groups, fs.sog, plan, configs, stages=stages, encoder=encoder)
    write_json(model.to_dict(), out.path("model.json"))
    write_csv(oof, out.path("oof.csv"))
    write_csv(pd.DataFrame({"row_id": np.arange(len(plan.fold)), "fold": plan.fold}), out.path("folds.csv"))

    per_fold = []
    for k in range(plan.K):
        row = {"fold": k}
        sub = oof[(oof["fold"] == k) & (oof["stage"] == "classifier")]
        if len(sub):
            row["auc"] = roc_auc(sub["response"], labels[sub["row_id"]])
            row["n_balanced_train"] = len(plan.train_balanced[k])
        sub = oof[(oof["fold"] == k) & (oof["stage"] == "regressor")]
        if len(sub):
            obs = np.sqrt(fs.sog[sub["row_id"]])
            row["r2_sqrt"] = regression_metrics(sub["latent"], obs)["sqrt_scale"]["r2"]
        per_fold.append(row)
    summary = {"stages": list(stages), "folds": per_fold, "n": len(labels), "config_hash": cfg.digest()}
    for name, m in (("classifier", model.classifier), ("regressor", model.regressor)):
        if m is not None:
            summary[f"{name}_variances"] = dict(zip(m.spec.names, m.spec.variances))
            if m.spec.resid_variance is not None:
                summary[f"{name}_resid_variance"] = m.spec.resid_variance
    write_json(summary, out.path("training_summary.json"))
    return {"stages": list(stages)}


def cmd_train_two_stage(args, cfg, out):
    return _train(args, cfg, out, ("classifier", "regressor"))


def cmd_train_classifier(args, cfg, out):
    return _train(args, cfg, out, ("classifier",))


def cmd_train_regressor(args, cfg, out):
    return _train(args, cfg, out, ("regressor",))


def cmd_evaluate(args, cfg: PipelineConfig, out: StagedOutput):
    from .metrics import calibration_bins, classification_report, pr_curve, regression_metrics, roc_curve

    df = _read_table(args.input)
    sog = pd.to_numeric(df["sog"], errors="raise").to_numpy(float)
    oof = read_csv(args.oof)
    missing = {"row_id", "fold", "stage", "latent", "response"} - set(oof.columns)
    if missing:
        from .io import DataFileError

        raise DataFileError(f"{args.oof}: missing column(s) {sorted(missing)}")
    if oof["row_id"].max() >= len(sog) or oof["row_id"].min() < 0:
        from .io import DataFileError

        raise DataFileError("OOF row ids do not match the input table")
    report = {"classification": None, "regression": None, "threshold": cfg.threshold}
    clf = oof[oof["stage"] == "classifier"]
    if len(clf):
        y = (sog[clf["row_id"]] > 0).astype(int)
        p = clf["response"].to_numpy()
        report["classification"] = classification_report(p, y, cfg.threshold)
        fpr, tpr, thr = roc_curve(p, y)
        write_csv(pd.DataFrame({"fpr": fpr, "tpr": tpr, "threshold": thr}), out.path("roc.csv"))
        rec, prec, thr = pr_curve(p, y)
        write_csv(pd.DataFrame({"recall": rec, "precision": prec, "threshold": thr}), out.path("pr.csv"))
        write_csv(calibration_bins(p, y, cfg.calibration_bins), out.path("calibration_classifier.csv"))
    reg = oof[oof["stage"] == "regressor"]
    if len(reg):
        obs = np.sqrt(sog[reg["row_id"]])
        pred = reg["latent"].to_numpy()
        report["regression"] = regression_metrics(pred, obs)
        write_csv(calibration_bins(pred**2, obs**2, cfg.calibration_bins), out.path("calibration.csv"))
    write_json(report, out.path("report.json"))
    return {"classification": report["classification"] is not None, "regression": report["regression"] is not None}


def cmd_explain(args, cfg: PipelineConfig, out: StagedOutput):
    from .explain import binned_marginal, categorical_summary, global_importance, sample_rows, shap_ensemble
    from .two_stage import TwoStageModel

    model = TwoStageModel.from_dict(read_json(args.model))
    if model.encoder is None:
        raise ConfigError("model file carries no feature encoder")
    df = _read_table(args.input)
    records, env = _split(df)
    fs = model.encoder.transform(records, env)
    rows = sample_rows(len(fs.X), cfg.explain_sample, derive_seed(cfg.seed, "explain"))
    raw = raw_covariates(records, env)[rows]
    meta = {}
    for stage in ("classifier", "regressor"):
        m = getattr(model, stage)
        if m is None or args.stage not in (stage, "both"):
            continue
        idx = rows
        if stage == "regressor":
            keep = fs.sog[rows] > 0
            idx, raw_s = rows[keep], raw[keep]
        else:
            raw_s = raw
        shap = shap_ensemble(m, fs.X[idx], row_ids=idx)
        write_csv(shap.to_frame(), out.path(f"shap_values_{stage}.csv"))
        write_csv(global_importance(shap), out.path(f"importance_{stage}.csv"))
        binned = []
        for j, name in enumerate(CONTINUOUS):
            b = binned_marginal(shap, FEATURE_NAMES[j], raw_s[:, j], bins=10)
            b.insert(0, "feature", FEATURE_NAMES[j])
            binned.append(b)
        write_csv(pd.concat(binned, ignore_index=True), out.path(f"binned_{stage}.csv"))
        cats = []
        for col, feat in (("vessel_group", "vessel_group_idx"), ("nav_status", "status_idx")):
            c = categorical_summary(shap, feat, records[col].to_numpy()[idx])
            c.insert(0, "feature", feat)
            cats.append(c)
        write_csv(pd.concat(cats, ignore_index=True), out.path(f"categorical_{stage}.csv"))
        meta[stage] = {"scale": shap.scale, "n_rows": shap.n_rows, "base_value": shap.base_value, **shap.metadata}
    write_json(meta, out.path("explain_metadata.json"))
    return {"stages": sorted(meta)}


def cmd_risk_map(args, cfg: PipelineConfig, out: StagedOutput):
    from .two_stage import SafeSpeedCurve, aggregate_risk_grid, ice_risk_indicator

    if cfg.curve is None:
        raise ConfigError("risk-map needs a safe-speed curve (--curve or `curve` in the config)")
    if not Path(cfg.curve).exists():
        raise ConfigError(f"{cfg.curve}: curve file not found")
    curve = SafeSpeedCurve.from_csv(cfg.curve)
    df = _read_table(args.input)
    records = validate_records(df[list(AIS_COLUMNS)])
    if "icec" not in df.columns:
        from .features import FeatureError

        raise FeatureError("risk-map needs an icec column; run `collocate` first")
    icec = pd.to_numeric(df["icec"], errors="raise").to_numpy(float)
    flags = ice_risk_indicator(records["sog"].to_numpy(), icec, curve)
    grid, top = aggregate_risk_grid(records["lon"].to_numpy(), records["lat"].to_numpy(), flags, cfg.resolution, cfg.top_n)
    write_csv(grid, out.path("risk_grid.csv"))
    write_csv(top, out.path("risk_top_cells.csv"))
    return {"n_cells": len(grid), "n_risky": int(flags.sum())}


COMMANDS = {
    "simulate": cmd_simulate,
    "ingest": cmd_ingest,
    "collocate": cmd_collocate,
    "train-classifier": cmd_train_classifier,
    "train-regressor": cmd_train_regressor,
    "train-two-stage": cmd_train_two_stage,
    "evaluate": cmd_evaluate,
    "explain": cmd_explain,
    "risk-map": cmd_risk_map,
}


# ------------------------------------------------------------------ parsing


def build_parser():
    p = argparse.ArgumentParser(prog="sogmodel", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML configuration file")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--seed", type=int, help="root seed")
    common.add_argument("--resolution", type=float, help="grid resolution in degrees")
    common.add_argument("-v", "--verbose", action="store_true")
    train = argparse.ArgumentParser(add_help=False)
    train.add_argument("--folds", type=int)
    train.add_argument("--n-rounds", type=int, dest="n_rounds")
    train.add_argument("--learning-rate", type=float, dest="learning_rate")

    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("simulate", parents=[common], help="write a synthetic ingest CSV and its truth")
    s.add_argument("--n", type=int)
    s.add_argument("--zero-prevalence", type=float, dest="zero_prevalence")

    s = sub.add_parser("ingest", parents=[common], help="validate, filter and summarise AIS records")
    s.add_argument("--input", required=True)

    s = sub.add_parser("collocate", parents=[common], help="attach environmental fields from daily rasters")
    s.add_argument("--input", required=True)
    s.add_argument("--raster", action="append", metavar="VAR=PATH")

    for name in ("train-classifier", "train-regressor", "train-two-stage"):
        s = sub.add_parser(name, parents=[common, train], help="cross-validated training")
        s.add_argument("--input", required=True)

    s = sub.add_parser("evaluate", parents=[common], help="metrics and curves from out-of-fold predictions")
    s.add_argument("--input", required=True)
    s.add_argument("--oof", required=True)
    s.add_argument("--threshold", type=float)
    s.add_argument("--bins", type=int)

    s = sub.add_parser("explain", parents=[common], help="SHAP attributions per stage")
    s.add_argument("--model", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--stage", choices=("classifier", "regressor", "both"), default="both")
    s.add_argument("--sample", type=int)

    s = sub.add_parser("risk-map", parents=[common], help="ice-risk proportions per grid cell")
    s.add_argument("--input", required=True)
    s.add_argument("--curve")
    s.add_argument("--top-n", type=int, dest="top_n")
    return p


def exit_code_for(exc):
    from .io import DataFileError

    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, (ArithmeticError, np.linalg.LinAlgError)):
        return EXIT_NUMERIC
    if isinstance(exc, (ValueError, KeyError, DataFileError, OSError)):
        return EXIT_DATA
    return None


def _manifest(args, cfg, outputs, inputs, timings, result):
    import scipy

    return {
        "command": args.command,
        "config_hash": cfg.digest(),
        "config": cfg.to_dict(),
        "seeds": {
            "root": cfg.seed,
            "split": derive_seed(cfg.seed, "split"),
            "subsample": derive_seed(cfg.seed, "subsample"),
            "classifier": cfg.stage_config("classifier").seed,
            "regressor": cfg.stage_config("regressor").seed,
        },
        "versions": {
            "sogmodel": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "pandas": pd.__version__,
        },
        "inputs": inputs,
        "outputs": {p.name: file_digest(p) for p in outputs},
        "timings_seconds": timings,
        "result": result,
    }


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    out = None
    out_dir = Path(args.out)
    existed = out_dir.exists()
    t0 = time.perf_counter()
    try:
        cfg = resolve_config(args)
        out = StagedOutput(out_dir)
        result = COMMANDS[args.command](args, cfg, out)
        t1 = time.perf_counter()
        outputs = out.commit()
        inputs = {}
        for attr in ("input", "oof", "model", "config"):
            path = getattr(args, attr, None)
            if path:
                inputs[str(path)] = file_digest(path)
        for item in getattr(args, "raster", None) or []:
            path = item.split("=", 1)[1]
            inputs[path] = file_digest(path)
        if args.command == "risk-map":
            inputs[str(cfg.curve)] = file_digest(cfg.curve)
        timings = {"command": round(t1 - t0, 3), "total": round(time.perf_counter() - t0, 3)}
        write_json_atomic(_manifest(args, cfg, outputs, inputs, timings, result), out_dir / "run_manifest.json")
        return EXIT_OK
    except Exception as exc:  # noqa: BLE001 - every failure becomes an error record
        code = exit_code_for(exc)
        if code is None:
            raise
        if out is not None:
            out.discard()
        if not existed and out_dir.exists() and not any(out_dir.iterdir()):
            out_dir.rmdir()
        record = {"status": "error", "exit_code": code, "command": args.command, "error_type": type(exc).__name__, "message": str(exc)}
        print(json.dumps(record), file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
