"""Command-line entry point: ``spectag {synth,features,train,eval,sweep,loo}``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .classifier import load_model, save_model
from .confidence import Metric
from .config import PipelineConfig, config_to_dict, load_config
from .dataset import DatasetManifest, load_manifest, load_synth_spec, write_phantom_dataset
from .errors import ConfigError, DataError, SpectagError
from .features import write_feature_csv
from .pipeline import (ImageRecord, evaluate, extract_many, leave_one_organ_out, predict_record,
                       tau_sweep, train, write_overlays)

log = logging.getLogger("spectag")


def _setup_logging() -> None:
    level = os.environ.get("SPECTAG_LOG", "WARNING").upper()
    numeric = getattr(logging, level, None)
    if not isinstance(numeric, int):
        numeric = logging.WARNING
    logging.basicConfig(level=numeric, format="%(levelname)s %(name)s: %(message)s")


# --- shared helpers -----------------------------------------------------------

def _config(args) -> PipelineConfig:
    cfg = load_config(args.config)
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "jobs", None) is not None:
        changes["jobs"] = args.jobs
    if getattr(args, "tau", None) is not None:
        changes["tau"] = args.tau
    if getattr(args, "metric", None) is not None:
        changes["metric"] = Metric(args.metric)
    try:
        return cfg.replace(**changes) if changes else cfg
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _manifest(args) -> DatasetManifest:
    if not args.manifest:
        raise ConfigError("--manifest is required")
    return load_manifest(args.manifest)


def _records(manifest: DatasetManifest, split: str, cfg: PipelineConfig) -> list[ImageRecord]:
    entries = manifest.split(split)
    if not entries:
        raise DataError(f"the {split} split is empty")
    log.info("extracting features for %d %s images", len(entries), split)
    return extract_many(entries, cfg)


def _rgb_model_path(path: Path) -> Path:
    return path.with_name(path.stem + ".rgb" + path.suffix)


def _write_json(path: Path, body: dict, command: str) -> None:
    """JSON with a header holding everything run-specific; the body is deterministic."""
    doc = {
        "header": {"generated": datetime.now(timezone.utc).isoformat(timespec="seconds"),
                   "command": command, "version": __version__},
        "body": body,
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _fmt(v):
    return "" if v is None else (f"{v:.6f}" if isinstance(v, float) else v)


def _out_dir(args) -> Path:
    if not args.out:
        raise ConfigError("--out is required")
    return Path(args.out)


# --- subcommands ----------------------------------------------------------------

def cmd_synth(args) -> int:
    spec = load_synth_spec(args.spec)
    if args.seed is not None:
        from dataclasses import replace
        spec = replace(spec, seed=args.seed)
    path = write_phantom_dataset(spec, _out_dir(args))
    print(path)
    return 0


def cmd_features(args) -> int:
    cfg = _config(args)
    manifest = _manifest(args)
    rows = []
    for split in ("train", "test"):
        if not manifest.split(split):
            continue
        for rec in _records(manifest, split, cfg):
            x = rec.features()
            for k, spx in enumerate(rec.desc.ids):
                truth = int(rec.truth[k])
                rows.append((rec.image_id, int(spx), x[k], manifest.class_names[truth] if truth >= 0 else ""))
    out = _out_dir(args)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_feature_csv(out, rows)
    print(out)
    return 0


def _train_one(records, cfg, manifest, wavelengths, model_path: Path, cv_path: Path):
    model, grid = train(records, cfg, manifest.class_names, wavelengths)
    save_model(model, model_path)
    if grid is not None:
        _write_csv(cv_path, ["C", "gamma", "mean_accuracy", "std_accuracy", "folds", "unconverged_solves"],
                   [[repr(r["C"]), repr(r["gamma"]), _fmt(r["mean_accuracy"]), _fmt(r["std_accuracy"]), r["folds"], r["unconverged_solves"]]
                    for r in grid.table])
    log.info("saved %s (C=%g, gamma=%g)", model_path, model.metadata["C"], model.metadata["gamma"])


def cmd_train(args) -> int:
    cfg = _config(args)
    manifest = _manifest(args)
    if not args.model:
        raise ConfigError("--model is required")
    model_path = Path(args.model)
    model_path.parent.mkdir(parents=True, exist_ok=True)
    records = _records(manifest, "train", cfg)
    _train_one(records, cfg, manifest, None, model_path, model_path.with_suffix(".cv.csv"))
    if args.compare_rgb:
        rgb_path = _rgb_model_path(model_path)
        _train_one(records, cfg, manifest, cfg.rgb_bands, rgb_path, rgb_path.with_suffix(".cv.csv"))
    print(model_path)
    return 0


def _emit_report(report: dict, out: Path, records, per_image, cfg: PipelineConfig, class_names, command: str):
    report = dict(report, config=config_to_dict(cfg))
    _write_json(out / "report.json", report, command)
    for metric, rows in report["tau_sweep"].items():
        _write_csv(out / f"tau_sweep_{metric}.csv",
                   ["tau", "median_acc_spx", "iqr_acc_spx", "pooled_acc_spx", "confident_fraction"],
                   [[r["tau"], _fmt(r["median_acc_spx"]), _fmt(r["iqr_acc_spx"]), _fmt(r["pooled_acc_spx"]),
                     _fmt(r["confident_fraction"])] for r in rows])
    names = report["classes"]
    for which in ("base", "tau"):
        cm = report["confusion_matrix"][which]
        _write_csv(out / f"confusion_{which}.csv", ["truth \\ predicted"] + names,
                   [[names[i]] + [_fmt(v) for v in row] for i, row in enumerate(cm)])
    for rec, preds in zip(records, per_image):
        write_overlays(rec, preds, cfg.metric, out / "overlays")


def _evaluate_model(model, records, cfg, manifest, out: Path, command: str) -> dict:
    from .confidence import ConfidenceThreshold
    report = evaluate(model, records, cfg, manifest.class_names)
    thr = ConfidenceThreshold(cfg.tau, cfg.metric)
    per_image = [predict_record(model, rec, thr, cfg.mixed_purity) for rec in records]
    _emit_report(report, out, records, per_image, cfg, manifest.class_names, command)
    return report


def _load_model(path):
    if not path:
        raise ConfigError("--model is required")
    if not Path(path).exists():
        raise DataError(f"model file {path} not found")
    return load_model(path)


def cmd_eval(args) -> int:
    cfg = _config(args)
    manifest = _manifest(args)
    model = _load_model(args.model)
    out = _out_dir(args)
    records = _records(manifest, "test", cfg)
    command = "eval"
    report = _evaluate_model(model, records, cfg, manifest, out, command)
    summary = {"mi": report["base"]["median_acc_spx"]}
    if args.compare_rgb:
        rgb_path = _rgb_model_path(Path(args.model))
        if rgb_path.exists():
            rgb_model = load_model(rgb_path)
        else:
            log.info("no RGB model at %s; training one from the train split", rgb_path)
            rgb_model, _ = train(_records(manifest, "train", cfg), cfg, manifest.class_names, cfg.rgb_bands)
        rgb = _evaluate_model(rgb_model, records, cfg, manifest, out / "rgb", command)
        summary["rgb"] = rgb["base"]["median_acc_spx"]
    print(json.dumps({"base_median_acc_spx": summary}))
    return 0


def cmd_sweep(args) -> int:
    cfg = _config(args)
    manifest = _manifest(args)
    model = _load_model(args.model)
    out = _out_dir(args)
    records = _records(manifest, "test", cfg)
    per_image = [predict_record(model, rec, None, cfg.mixed_purity) for rec in records]
    metrics = [cfg.metric] if args.metric else list(Metric)
    body = {m.value: tau_sweep(per_image, cfg.tau_grid, m) for m in metrics}
    _write_json(out / "sweep.json", body, "sweep")
    for m, rows in body.items():
        _write_csv(out / f"tau_sweep_{m}.csv",
                   ["tau", "median_acc_spx", "iqr_acc_spx", "pooled_acc_spx", "confident_fraction"],
                   [[r["tau"], _fmt(r["median_acc_spx"]), _fmt(r["iqr_acc_spx"]), _fmt(r["pooled_acc_spx"]),
                     _fmt(r["confident_fraction"])] for r in rows])
    return 0


def cmd_loo(args) -> int:
    cfg = _config(args)
    manifest = _manifest(args)
    out = _out_dir(args)
    train_recs = _records(manifest, "train", cfg)
    test_recs = _records(manifest, "test", cfg)
    if args.model:
        meta = _load_model(args.model).metadata
        C, gamma = meta["C"], meta["gamma"]
    elif cfg.C is not None:
        C, gamma = cfg.C, cfg.gamma
    else:
        model, _ = train(train_recs, cfg, manifest.class_names)
        C, gamma = model.metadata["C"], model.metadata["gamma"]
    rows = leave_one_organ_out(train_recs, test_recs, cfg, manifest.class_names, C, gamma, cfg.tau, cfg.metric)
    valid = [r for r in rows if r["lc_ex"] is not None and r["lc_in"] is not None]
    body = {
        "tau": cfg.tau, "metric": cfg.metric.value, "C": C, "gamma": gamma, "rows": rows,
        "mean_lc_ex": sum(r["lc_ex"] for r in valid) / len(valid) if valid else None,
        "mean_lc_in": sum(r["lc_in"] for r in valid) / len(valid) if valid else None,
        "config": config_to_dict(cfg),
    }
    _write_json(out / "loo.json", body, "loo")
    _write_csv(out / "loo.csv", ["organ", "lc_ex", "lc_in", "n_ex", "n_in"],
               [[r["organ"], _fmt(r["lc_ex"]), _fmt(r["lc_in"]), r["n_ex"], r["n_in"]] for r in rows])
    return 0


COMMANDS = {"synth": cmd_synth, "features": cmd_features, "train": cmd_train,
            "eval": cmd_eval, "sweep": cmd_sweep, "loo": cmd_loo}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spectag", description="Confidence-aware superpixel tagging of multispectral images.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, model=False, threshold=False):
        p.add_argument("--manifest", help="dataset manifest JSON")
        p.add_argument("--config", help="pipeline config TOML")
        p.add_argument("--out", help="output path")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--jobs", type=int, help="worker processes for feature extraction (0 = all cores)")
        if model:
            p.add_argument("--model", help="model JSON")
        if threshold:
            p.add_argument("--metric", choices=[m.value for m in Metric])
            p.add_argument("--tau", type=float)
        return p

    p = sub.add_parser("synth", help="write a phantom dataset and manifest")
    p.add_argument("--spec", help="phantom spec TOML ([phantom] and [dataset] sections)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int)
    common(sub.add_parser("features", help="dump per-superpixel features as CSV"))
    p = common(sub.add_parser("train", help="grid search and fit a model"), model=True)
    p.add_argument("--compare-rgb", action="store_true", help="also fit an RGB-only model")
    p = common(sub.add_parser("eval", help="evaluate a model on the test split"), model=True, threshold=True)
    p.add_argument("--compare-rgb", action="store_true", help="also report the RGB-only pipeline")
    common(sub.add_parser("sweep", help="accuracy versus confidence threshold"), model=True, threshold=True)
    common(sub.add_parser("loo", help="leave-one-organ-out low-confidence study"), model=True, threshold=True)
    return parser


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except SpectagError as exc:
        print(f"spectag {args.command}: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
