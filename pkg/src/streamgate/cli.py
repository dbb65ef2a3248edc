"""Command line pipeline: each stage reads and writes files in a working
directory, so any stage can be rerun or inspected in isolation.

Stage artifacts, in order: catalog.jsonl -> filtered.jsonl (+
quality_report.json) -> enhanced.jsonl (+ PNGs) -> partition.json ->
augmented_train.jsonl (+ PNGs) -> model.bin (+ history.json) ->
predictions.csv -> report.json/.csv/.svg. Exit codes: 0 ok, 1 bad input or
arguments, 2 unexpected failure. Outputs never embed wall-clock time, so
reruns with the same inputs and seed are byte-identical for any --jobs.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path
from typing import Optional

from streamgate.augment import AugmentParams, apply_balance, build_balance_plan
from streamgate.catalog import (
    CatalogError,
    ingest,
    read_manifest,
    write_manifest,
)
from streamgate.enhance import EnhanceParams, enhance_catalog
from streamgate.metrics import (
    evaluate,
    read_predictions_csv,
    write_predictions_csv,
    write_report_csv,
    write_report_json,
    write_report_svg,
)
from streamgate.model import (
    ModelConfig,
    TrainConfig,
    load_model,
    predict_catalog,
    save_model,
    train,
)
from streamgate.partition import (
    PartitionConfig,
    PartitionSpec,
    random_search_partition,
    split_catalog,
)
from streamgate.quality import QualityConfig, apply_quality_gate

F_CATALOG = "catalog.jsonl"
F_FILTERED = "filtered.jsonl"
F_QUALITY = "quality_report.json"
F_ENHANCED = "enhanced.jsonl"
F_PARTITION = "partition.json"
F_AUGMENTED = "augmented_train.jsonl"
F_MODEL = "model.bin"
F_HISTORY = "history.json"
F_PREDICTIONS = "predictions.csv"
F_REPORT = "report.json"
F_REPORT_CSV = "report.csv"
F_REPORT_SVG = "report.svg"

D_ENHANCED = "enhanced"
D_AUGMENTED = "augmented"


def _log(args, event: str, **fields) -> None:
    if getattr(args, "json", False):
        line = json.dumps({"event": event, **fields}, sort_keys=True)
    else:
        kv = " ".join(f"{k}={v}" for k, v in fields.items())
        line = f"{event} {kv}".rstrip()
    print(line, file=sys.stderr)


def _write_json(payload: dict, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _workdir(args) -> Path:
    wd = args.workdir or os.environ.get("STREAMGATE_WORKDIR") or "."
    path = Path(wd)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _load_config(args) -> dict:
    if not args.config:
        return {}
    with open(args.config, encoding="utf-8") as fh:
        cfg = json.load(fh)
    if not isinstance(cfg, dict):
        raise CatalogError("config file must hold a JSON object")
    return cfg


def _merged(section: Optional[dict], **overrides) -> dict:
    """Config-file section with non-None CLI flags layered on top."""
    out = dict(section or {})
    for key, value in overrides.items():
        if value is not None:
            out[key] = value
    return out


def _need(path: Path, what: str) -> Path:
    if not path.exists():
        raise CatalogError(f"missing {what}: {path} (run the earlier stage first)")
    return path


def _quality_config(config: dict, override: Optional[dict] = None) -> QualityConfig:
    return QualityConfig(**(override if override is not None else config.get("quality", {})))


def _enhance_params(config: dict, args, override: Optional[dict] = None) -> EnhanceParams:
    if override is not None:
        return EnhanceParams(**override)
    return EnhanceParams(
        **_merged(
            config.get("enhance"),
            alpha=getattr(args, "alpha", None),
            beta=getattr(args, "beta", None),
            crop_target=getattr(args, "crop_target", None),
        )
    )


def cmd_ingest(args, config: dict, wd: Path) -> int:
    catalog, issues = ingest(args.input, labels_csv=args.labels)
    write_manifest(catalog, wd / F_CATALOG)
    _write_json(
        {
            "input": str(args.input),
            "labels": str(args.labels) if args.labels else None,
            "records": catalog.images_total,
            "sites": sorted(catalog.sites),
            "issues": [{"path": i.path, "reason": i.reason} for i in issues],
        },
        wd / "ingest_meta.json",
    )
    _log(args, "ingest.done", records=catalog.images_total, sites=len(catalog.sites),
         issues=len(issues))
    return 0


def cmd_filter(args, config: dict, wd: Path, quality_override: Optional[dict] = None) -> int:
    catalog = read_manifest(_need(wd / F_CATALOG, "catalog manifest"))
    cfg = _quality_config(config, quality_override)
    filtered, report = apply_quality_gate(catalog, cfg, jobs=args.jobs)
    write_manifest(filtered, wd / F_FILTERED)
    _write_json({"config": cfg.to_dict(), **report.to_dict()}, wd / F_QUALITY)
    _log(args, "filter.done", total=report.total, kept=report.kept,
         dropped=report.dropped)
    return 0


def cmd_enhance(args, config: dict, wd: Path, enhance_override: Optional[dict] = None) -> int:
    catalog = read_manifest(_need(wd / F_FILTERED, "filtered manifest"))
    params = _enhance_params(config, args, enhance_override)
    enhanced, issues = enhance_catalog(catalog, params, wd / D_ENHANCED, jobs=args.jobs)
    write_manifest(enhanced, wd / F_ENHANCED)
    _write_json(
        {
            "params": params.to_dict(),
            "records": enhanced.images_total,
            "issues": [{"id": i.record_id, "reason": i.reason} for i in issues],
        },
        wd / "enhance_meta.json",
    )
    _log(args, "enhance.done", records=enhanced.images_total, issues=len(issues))
    return 0


def cmd_partition(args, config: dict, wd: Path) -> int:
    catalog = read_manifest(_need(wd / F_ENHANCED, "enhanced manifest"))
    section = _merged(
        config.get("partition"),
        theta=args.theta,
        iterations=args.iterations,
        metric=args.metric,
        val_theta=args.val_theta,
    )
    section.setdefault("seed", args.seed)
    spec = random_search_partition(catalog, PartitionConfig(**section))
    _write_json(spec.to_dict(), wd / F_PARTITION)
    _log(args, "partition.done", train=len(spec.train_sites), val=len(spec.val_sites),
         test=len(spec.test_sites), objective=format(spec.objective, ".6f"))
    return 0


def cmd_augment(args, config: dict, wd: Path) -> int:
    catalog = read_manifest(_need(wd / F_ENHANCED, "enhanced manifest"))
    spec = PartitionSpec.from_dict(
        json.loads(_need(wd / F_PARTITION, "partition spec").read_text())
    )
    splits = split_catalog(catalog, spec)
    section = dict(config.get("augment", {}))
    target = args.target if args.target is not None else section.pop("target", None)
    section.pop("seed", None)
    seed = config.get("augment", {}).get("seed", args.seed)
    params = AugmentParams(**section)
    plan = build_balance_plan(splits["train"], target)
    augmented, issues = apply_balance(
        splits["train"], plan, params, wd / D_AUGMENTED,
        seed=seed, partition_name="train", jobs=args.jobs,
    )
    write_manifest(augmented, wd / F_AUGMENTED)
    _write_json(
        {
            "seed": seed,
            "params": params.to_dict(),
            "target": plan.target,
            "plan": {
                str(label): {
                    "count": e.count, "target": e.target,
                    "keep": e.keep, "generate": e.generate,
                }
                for label, e in plan.entries.items()
            },
            "records": augmented.images_total,
            "issues": [{"id": i.record_id, "reason": i.reason} for i in issues],
        },
        wd / "augment_meta.json",
    )
    _log(args, "augment.done", records=augmented.images_total,
         generated=plan.total_generate(), issues=len(issues))
    return 0


def cmd_train(args, config: dict, wd: Path) -> int:
    train_catalog = read_manifest(_need(wd / F_AUGMENTED, "augmented train manifest"))
    enhanced = read_manifest(_need(wd / F_ENHANCED, "enhanced manifest"))
    spec = PartitionSpec.from_dict(
        json.loads(_need(wd / F_PARTITION, "partition spec").read_text())
    )
    splits = split_catalog(enhanced, spec)
    monitor = splits["val"] if splits["val"].images_total else None

    model_section = _merged(
        config.get("model"),
        input_size=args.input_size,
        patch_size=args.patch_size,
        m=args.classes,
    )
    model_section.setdefault("seed", args.seed)
    train_section = _merged(
        config.get("train"),
        epochs=args.epochs,
        batch_size=args.batch_size,
        lr=args.lr,
    )
    train_section.setdefault("seed", args.seed)
    model_cfg = ModelConfig(**model_section)
    train_cfg = TrainConfig(**train_section)
    preprocess = {
        "quality": _quality_config(config).to_dict(),
        "enhance": _enhance_params(config, args).to_dict(),
    }
    state, history = train(
        train_catalog, model_cfg, train_cfg, monitor_catalog=monitor,
        preprocess=preprocess,
    )
    save_model(state, wd / F_MODEL)
    _write_json(
        {"model": model_cfg.to_dict(), "train": train_cfg.to_dict(), "epochs": history},
        wd / F_HISTORY,
    )
    best = [h for h in history if h["best"]]
    _log(args, "train.done", epochs=len(history), records=train_catalog.images_total,
         monitored=monitor is not None,
         best_epoch=best[-1]["epoch"] if best else None)
    return 0


def _model_path(args, wd: Path) -> Path:
    return Path(args.model) if args.model else wd / F_MODEL


def cmd_predict(args, config: dict, wd: Path) -> int:
    model_file = _model_path(args, wd)
    if not model_file.exists():
        raise CatalogError(f"missing model file: {model_file}")
    state = load_model(model_file)
    manifest = Path(args.manifest) if args.manifest else _need(wd / F_ENHANCED, "enhanced manifest")
    catalog = read_manifest(manifest)
    if args.split:
        spec = PartitionSpec.from_dict(
            json.loads(_need(wd / F_PARTITION, "partition spec").read_text())
        )
        catalog = split_catalog(catalog, spec)[args.split]
    rows, issues = predict_catalog(catalog, state, jobs=args.jobs)
    write_predictions_csv(rows, wd / F_PREDICTIONS)
    _write_json(
        {
            "model": str(model_file),
            "manifest": str(manifest),
            "split": args.split,
            "predictions": len(rows),
            "issues": [{"id": rid, "reason": reason} for rid, reason in issues],
        },
        wd / "predict_meta.json",
    )
    _log(args, "predict.done", predictions=len(rows), issues=len(issues))
    return 0


def cmd_evaluate(args, config: dict, wd: Path) -> int:
    preds_path = Path(args.predictions) if args.predictions else _need(
        wd / F_PREDICTIONS, "predictions"
    )
    predictions = read_predictions_csv(preds_path)
    manifest = Path(args.truth_manifest) if args.truth_manifest else _need(
        wd / F_ENHANCED, "enhanced manifest"
    )
    catalog = read_manifest(manifest)
    if args.split:
        spec = PartitionSpec.from_dict(
            json.loads(_need(wd / F_PARTITION, "partition spec").read_text())
        )
        catalog = split_catalog(catalog, spec)[args.split]
    truth = {rec.id: rec.label for rec in catalog.labeled()}
    report = evaluate(predictions, truth, m=args.classes if args.classes else 6)
    write_report_json(report, wd / F_REPORT)
    write_report_csv(report, wd / F_REPORT_CSV)
    write_report_svg(report, wd / F_REPORT_SVG)
    headline = {
        "accuracy": format(report["multiclass"]["accuracy"], ".4f"),
        "combined_f1": format(report["multiclass"]["combined_f1"], ".4f"),
    }
    if report.get("binary"):
        headline["binary_accuracy"] = format(report["binary"]["accuracy"], ".4f")
    _log(args, "evaluate.done", evaluated=report["n_evaluated"], **headline)
    print(str(wd / F_REPORT))
    return 0


def cmd_pipeline(args, config: dict, wd: Path) -> int:
    if args.mode == "train":
        cmd_ingest(args, config, wd)
        cmd_filter(args, config, wd)
        cmd_enhance(args, config, wd)
        cmd_partition(args, config, wd)
        cmd_augment(args, config, wd)
        cmd_train(args, config, wd)
        args.split = "test"
        args.manifest = None
        args.predictions = None
        args.truth_manifest = None
        cmd_predict(args, config, wd)
        cmd_evaluate(args, config, wd)
        return 0

    # infer: reuse the preprocessing the model was trained with.
    model_file = _model_path(args, wd)
    if not model_file.exists():
        raise CatalogError(f"missing model file: {model_file}")
    state = load_model(model_file)
    cmd_ingest(args, config, wd)
    cmd_filter(args, config, wd, quality_override=state.preprocess.get("quality"))
    cmd_enhance(args, config, wd, enhance_override=state.preprocess.get("enhance"))
    args.split = None
    args.manifest = None
    cmd_predict(args, config, wd)
    enhanced = read_manifest(wd / F_ENHANCED)
    if any(rec.label is not None for rec in enhanced.records()):
        args.predictions = None
        args.truth_manifest = None
        args.classes = args.classes or state.config.m
        cmd_evaluate(args, config, wd)
    else:
        _log(args, "evaluate.skipped", reason="no labels in manifest")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="streamgate",
        description="Curate time-lapse river camera imagery and classify channel connectivity.",
    )
    parser.add_argument("--workdir", help="stage artifact directory (or $STREAMGATE_WORKDIR)")
    parser.add_argument("--seed", type=int, default=0, help="base seed for every randomized stage")
    parser.add_argument("--jobs", type=int, default=1, help="worker threads for per-frame work")
    parser.add_argument("--json", action="store_true", help="machine-readable log lines")
    parser.add_argument("--config", help="JSON config file; explicit flags win")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="scan an image tree into a catalog manifest")
    p.add_argument("--input", required=True, help="image directory")
    p.add_argument("--labels", help="CSV of id,label")

    sub.add_parser("filter", help="apply the quality gate")

    p = sub.add_parser("enhance", help="temporal luma enhancement + crop/resize")
    p.add_argument("--alpha", type=int, help="temporal window size")
    p.add_argument("--beta", type=float, help="luma mix weight in [-1, 0]")
    p.add_argument("--crop-target", type=int, dest="crop_target", help="output side length")

    p = sub.add_parser("partition", help="split sites into train/val/test")
    p.add_argument("--theta", type=float, help="train fraction of labeled images")
    p.add_argument("--iterations", type=int, help="search budget")
    p.add_argument("--metric", choices=["L1", "L2"], help="distribution distance")
    p.add_argument("--val-theta", type=float, dest="val_theta",
                   help="validation fraction of the non-train pool")

    p = sub.add_parser("augment", help="balance the train split with synthetic frames")
    p.add_argument("--target", type=int, help="records per label after balancing")

    p = sub.add_parser("train", help="fit the classifier on the augmented train split")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--lr", type=float)
    p.add_argument("--input-size", type=int, dest="input_size")
    p.add_argument("--patch-size", type=int, dest="patch_size")
    p.add_argument("--classes", type=int, help="2 for direct binary training, 6 for full labels")

    p = sub.add_parser("predict", help="classify frames with a trained model")
    p.add_argument("--model", help="weights file (default workdir/model.bin)")
    p.add_argument("--manifest", help="manifest to classify (default enhanced.jsonl)")
    p.add_argument("--split", choices=["train", "val", "test"], help="restrict to one partition")

    p = sub.add_parser("evaluate", help="score predictions against labeled truth")
    p.add_argument("--predictions", help="CSV to score (default workdir/predictions.csv)")
    p.add_argument("--truth-manifest", dest="truth_manifest",
                   help="labeled manifest (default enhanced.jsonl)")
    p.add_argument("--split", choices=["train", "val", "test"], help="restrict to one partition")
    p.add_argument("--classes", type=int, help="label count (default 6)")

    p = sub.add_parser("pipeline", help="run every stage in order")
    p.add_argument("--mode", choices=["train", "infer"], required=True)
    p.add_argument("--input", required=True, help="image directory")
    p.add_argument("--labels", help="CSV of id,label")
    p.add_argument("--model", help="weights file for infer mode")
    p.add_argument("--alpha", type=int, help=argparse.SUPPRESS)
    p.add_argument("--beta", type=float, help=argparse.SUPPRESS)
    p.add_argument("--crop-target", type=int, dest="crop_target", help=argparse.SUPPRESS)
    p.add_argument("--theta", type=float, help=argparse.SUPPRESS)
    p.add_argument("--iterations", type=int, help=argparse.SUPPRESS)
    p.add_argument("--metric", choices=["L1", "L2"], help=argparse.SUPPRESS)
    p.add_argument("--val-theta", type=float, dest="val_theta", help=argparse.SUPPRESS)
    p.add_argument("--target", type=int, help=argparse.SUPPRESS)
    p.add_argument("--epochs", type=int, help=argparse.SUPPRESS)
    p.add_argument("--batch-size", type=int, dest="batch_size", help=argparse.SUPPRESS)
    p.add_argument("--lr", type=float, help=argparse.SUPPRESS)
    p.add_argument("--input-size", type=int, dest="input_size", help=argparse.SUPPRESS)
    p.add_argument("--patch-size", type=int, dest="patch_size", help=argparse.SUPPRESS)
    p.add_argument("--classes", type=int, help=argparse.SUPPRESS)
    return parser


_COMMANDS = {
    "ingest": cmd_ingest,
    "filter": cmd_filter,
    "enhance": cmd_enhance,
    "partition": cmd_partition,
    "augment": cmd_augment,
    "train": cmd_train,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "pipeline": cmd_pipeline,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors; bad arguments are a validation
        # failure here, not a crash.
        return 0 if exc.code in (0, None) else 1
    try:
        config = _load_config(args)
        wd = _workdir(args)
        return _COMMANDS[args.command](args, config, wd)
    except (CatalogError, FileNotFoundError, json.JSONDecodeError) as exc:
        _log(args, "error", kind="validation", message=str(exc))
        return 1
    except Exception as exc:  # pragma: no cover - defensive
        _log(args, "error", kind="runtime", message=f"{type(exc).__name__}: {exc}")
        return 2


if __name__ == "__main__":
    sys.exit(main())
