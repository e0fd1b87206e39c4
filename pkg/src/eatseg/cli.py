"""Command-line entry point wiring the pipeline modules into reproducible runs.

Subcommands: phantom, preprocess, train, predict, quantify, evaluate, report.
Every subcommand that takes a run config archives the effective configuration
(file values + flag overrides) next to its outputs. Output locations resolve
as: explicit --out flag, else $EATSEG_OUT_ROOT/<subcommand>, else
<paths.out_root>/<subcommand> from the config. Flags override config-file
values; --set overrides apply first, dedicated flags last.

Exit codes: 0 success, 2 usage error, 3 validation error (bad config, bad
manifest, missing input), 4 runtime error (divergence, leakage, corrupt
checkpoint, undefined statistic, unexpected failure).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import cv2
import numpy as np
import torch

from .config import (
    archive_effective_config,
    parse_override,
    run_config_from_dict,
    set_path,
)
from .data import load_manifest, load_study, split_folds
from .errors import (
    CheckpointError,
    ConfigError,
    DataLeakError,
    DivergenceError,
    EatsegError,
    ManifestError,
    UndefinedCorrelationError,
)
from .evaluate import build_report, emit_plots, overlap_metrics, write_slice_metrics_csv
from .model import load_checkpoint
from .phantom import PhantomConfig, generate_phantom
from .preprocess import (
    build_dataset_samples,
    build_sample,
    filter_empty_slices,
    load_samples,
    resize_to_target,
    save_samples,
    threshold_adipose,
)
from .quantify import (
    aggregate_counts,
    derive_eat,
    fit_bias_correction,
    write_quantification_csv,
    write_quantification_json,
)
from .training import cross_validate, train_fold

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_VALIDATION = 3
EXIT_RUNTIME = 4

OUT_ROOT_ENV = "EATSEG_OUT_ROOT"
PREDICTIONS_INDEX = "predictions.json"


def _load_config(args) -> "RunConfig":
    """Build the effective RunConfig: file values, then --set overrides, then
    dedicated flags."""
    raw = {}
    config_path = getattr(args, "config", None)
    if config_path:
        path = Path(config_path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
    for override in getattr(args, "set", None) or []:
        dotted, value = parse_override(override)
        set_path(raw, dotted, value)
    if getattr(args, "manifest", None):
        set_path(raw, "paths.manifest", args.manifest)
    if getattr(args, "seed", None) is not None:
        set_path(raw, "train.seed", args.seed)
    return run_config_from_dict(raw)


def _resolve_out(args, cfg, default_name: str) -> Path:
    if getattr(args, "out", None):
        return Path(args.out)
    root = os.environ.get(OUT_ROOT_ENV) or cfg.paths.out_root
    return Path(root) / default_name


def _load_dataset(cfg) -> tuple:
    """Manifest + per-patient (study, masks) pairs + preprocessed samples."""
    manifest_path = cfg.paths.manifest
    if not manifest_path:
        raise ConfigError("no dataset manifest given (paths.manifest or --manifest)")
    manifest = load_manifest(manifest_path)
    band = (cfg.preprocess.adipose_hu_low, cfg.preprocess.adipose_hu_high)
    dataset = [load_study(manifest, pid, band) for pid in manifest.patient_ids()]
    samples, report = build_dataset_samples(dataset, cfg.preprocess)
    return manifest, dataset, samples, report


def cmd_phantom(args) -> int:
    cfg = PhantomConfig(
        patients=args.patients,
        slices_per_patient=args.slices,
        image_size=args.size,
        eat_fraction=args.eat_fraction,
        noise_hu=args.noise_hu,
        include_distractor=not args.no_distractor,
        empty_eat_end_slices=args.empty_end_slices,
        seed=args.seed if args.seed is not None else 42,
    )
    out_dir = Path(args.out) if args.out else \
        Path(os.environ.get(OUT_ROOT_ENV, ".")) / "phantom"
    manifest = generate_phantom(cfg, out_dir)
    print(f"phantom: wrote {len(manifest.entries)} slices for "
          f"{len(manifest.patient_ids())} patients to {out_dir}")
    return EXIT_OK


def cmd_preprocess(args) -> int:
    cfg = _load_config(args)
    out_dir = _resolve_out(args, cfg, "preprocess")
    out_dir.mkdir(parents=True, exist_ok=True)
    _, _, samples, report = _load_dataset(cfg)
    save_samples(samples, report, out_dir / "samples.npz")
    (out_dir / "removal_report.json").write_text(json.dumps({
        "removed_count": report.count,
        "removed": [{"patient_id": p, "slice_index": i} for p, i in report.removed],
    }, indent=2) + "\n", encoding="utf-8")
    archive_effective_config(cfg, out_dir)
    print(f"preprocess: {len(samples)} samples kept, {report.count} empty-EAT "
          f"slices removed -> {out_dir / 'samples.npz'}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args)
    out_dir = _resolve_out(args, cfg, "train")
    out_dir.mkdir(parents=True, exist_ok=True)

    if args.samples:
        samples, _ = load_samples(args.samples)
    else:
        _, _, samples, _ = _load_dataset(cfg)
    patient_ids = sorted({s.patient_id for s in samples})
    fold_split = split_folds(patient_ids, cfg.train.fold_count, cfg.train.seed)
    archive_effective_config(cfg, out_dir)
    (out_dir / "fold_split.json").write_text(
        json.dumps(fold_split.assignments, indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )

    if args.all_folds:
        records, aggregate = cross_validate(
            samples, fold_split, cfg.model, cfg.train,
            augment_policy=cfg.augment, out_dir=out_dir, loss_cfg=cfg.loss,
        )
        print(f"train: {len(records)} folds, mean best val loss "
              f"{aggregate['mean_best_val_loss']:.4f} -> {out_dir}")
    else:
        fold = args.fold if args.fold is not None else 0
        val_patients = set(fold_split.patients_in_fold(fold))
        if not val_patients:
            raise ConfigError(f"fold {fold} has no patients "
                              f"(fold_count={cfg.train.fold_count})")
        train_set = [s for s in samples if s.patient_id not in val_patients]
        val_set = [s for s in samples if s.patient_id in val_patients]
        record = train_fold(
            train_set, val_set, cfg.model, cfg.train,
            augment_policy=cfg.augment, out_dir=out_dir / f"fold_{fold}",
            fold_index=fold, loss_cfg=cfg.loss,
        )
        print(f"train: fold {fold} best val loss {record.best_val_loss:.4f} "
              f"at epoch {record.best_epoch} -> {record.checkpoint_path}")
    return EXIT_OK


def _predict_patient(model, study, masks, cfg, device) -> list[dict]:
    """Forward one study and derive per-slice pericardium/EAT predictions."""
    rows = []
    batch_size = cfg.train.batch_size
    samples = [build_sample(s, m, study, cfg.preprocess)
               for s, m in zip(study.slices, masks)]
    binary_pre = dataclasses.replace(cfg.preprocess, threshold_mode="binary")
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        batch = torch.from_numpy(np.stack([s.input for s in chunk])).to(device)
        with torch.no_grad():
            probs = model(batch).cpu().numpy()[:, 0]
        for sample, prob, ct_slice in zip(
                chunk, probs, study.slices[start:start + batch_size]):
            peri_pred = (prob >= cfg.quantify.prediction_threshold).astype(np.uint8)
            adipose = threshold_mask_at_target(ct_slice, binary_pre)
            eat_pred = derive_eat(peri_pred, adipose)
            rows.append({
                "patient_id": sample.patient_id,
                "slice_index": sample.slice_index,
                "pericardium_pred": peri_pred,
                "eat_pred": eat_pred,
            })
    return rows


def threshold_mask_at_target(ct_slice, pre_cfg) -> np.ndarray:
    """Binary adipose map at the model's working resolution."""
    adipose = threshold_adipose(ct_slice, pre_cfg)
    return resize_to_target(adipose.astype(np.uint8), pre_cfg.target_size, is_mask=True)


def cmd_predict(args) -> int:
    cfg = _load_config(args)
    out_dir = _resolve_out(args, cfg, "predict")
    out_dir.mkdir(parents=True, exist_ok=True)
    checkpoint = load_checkpoint(args.checkpoint, expected_config=cfg.model)
    model = checkpoint.model
    device = cfg.train.resolve_device()
    model.to(device)

    manifest_path = cfg.paths.manifest
    if not manifest_path:
        raise ConfigError("no dataset manifest given (paths.manifest or --manifest)")
    manifest = load_manifest(manifest_path)
    band = (cfg.preprocess.adipose_hu_low, cfg.preprocess.adipose_hu_high)
    dataset = [load_study(manifest, pid, band) for pid in manifest.patient_ids()]
    if cfg.preprocess.drop_empty_label_slices:
        dataset, _ = filter_empty_slices(dataset)

    index = {"target_size": cfg.preprocess.target_size,
             "threshold": cfg.quantify.prediction_threshold,
             "entries": []}
    for study, masks in dataset:
        patient_dir = out_dir / study.patient_id
        patient_dir.mkdir(parents=True, exist_ok=True)
        for row in _predict_patient(model, study, masks, cfg, device):
            stem = f"slice_{row['slice_index']:04d}"
            peri_rel = f"{study.patient_id}/{stem}_pericardium_pred.png"
            eat_rel = f"{study.patient_id}/{stem}_eat_pred.png"
            cv2.imwrite(str(out_dir / peri_rel), row["pericardium_pred"] * np.uint8(255))
            cv2.imwrite(str(out_dir / eat_rel), row["eat_pred"] * np.uint8(255))
            index["entries"].append({
                "patient_id": row["patient_id"],
                "slice_index": row["slice_index"],
                "pericardium_pred": peri_rel,
                "eat_pred": eat_rel,
                "predicted_count": int(row["eat_pred"].sum()),
            })
    (out_dir / PREDICTIONS_INDEX).write_text(
        json.dumps(index, indent=2) + "\n", encoding="utf-8")
    archive_effective_config(cfg, out_dir)
    print(f"predict: {len(index['entries'])} slices -> {out_dir}")
    return EXIT_OK


def _read_binary_png(path: Path) -> np.ndarray:
    image = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if image is None:
        raise ManifestError(f"cannot read mask image: {path}")
    return (image > 0).astype(np.uint8)


def _load_predictions(pred_dir: Path) -> dict:
    index_path = pred_dir / PREDICTIONS_INDEX
    if not index_path.exists():
        raise ManifestError(f"prediction index not found: {index_path}")
    return json.loads(index_path.read_text(encoding="utf-8"))


def _truth_masks_at(target_size: int, cfg, patient_id: str, manifest):
    band = (cfg.preprocess.adipose_hu_low, cfg.preprocess.adipose_hu_high)
    study, masks = load_study(manifest, patient_id, band)
    by_index = {}
    for ct_slice, mask in zip(study.slices, masks):
        by_index[ct_slice.slice_index] = (
            resize_to_target(mask.pericardium, target_size, is_mask=True),
            resize_to_target(mask.eat, target_size, is_mask=True),
        )
    return by_index


def _paired_masks(args, cfg):
    """Join predicted masks with truth masks by (patient, slice)."""
    pred_dir = Path(args.pred)
    index = _load_predictions(pred_dir)
    manifest = load_manifest(args.truth)
    target_size = int(index["target_size"])

    truth_cache: dict[str, dict] = {}
    pairs = []
    for entry in index["entries"]:
        pid, sidx = entry["patient_id"], entry["slice_index"]
        if pid not in truth_cache:
            truth_cache[pid] = _truth_masks_at(target_size, cfg, pid, manifest)
        if sidx not in truth_cache[pid]:
            raise ManifestError(
                f"prediction for patient {pid!r} slice {sidx} has no truth entry")
        peri_pred = _read_binary_png(pred_dir / entry["pericardium_pred"])
        eat_pred = _read_binary_png(pred_dir / entry["eat_pred"])
        peri_truth, eat_truth = truth_cache[pid][sidx]
        pairs.append((pid, sidx, peri_pred, eat_pred, peri_truth, eat_truth))
    if not pairs:
        raise ManifestError(f"no prediction entries in {pred_dir / PREDICTIONS_INDEX}")
    return pairs


def cmd_quantify(args) -> int:
    cfg = _load_config(args)
    out_dir = _resolve_out(args, cfg, "quantify")
    out_dir.mkdir(parents=True, exist_ok=True)
    pairs = _paired_masks(args, cfg)
    quant = aggregate_counts(
        [(pid, sidx, eat_pred, eat_truth)
         for pid, sidx, _, eat_pred, _, eat_truth in pairs],
        pixel_area_mm2=cfg.quantify.pixel_area_mm2,
        slice_thickness_mm=cfg.quantify.slice_thickness_mm,
        fold=args.fold,
    )
    correction = fit_bias_correction(quant) if args.fit_bias else None
    write_quantification_csv(quant, out_dir / "quantification.csv", correction)
    write_quantification_json(quant, out_dir / "quantification.json", correction)
    archive_effective_config(cfg, out_dir)
    print(f"quantify: {len(quant.per_slice_counts)} slices -> "
          f"{out_dir / 'quantification.json'}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _load_config(args)
    out_dir = _resolve_out(args, cfg, "evaluate")
    out_dir.mkdir(parents=True, exist_ok=True)
    pairs = _paired_masks(args, cfg)

    metrics = []
    pred_counts, ref_counts = [], []
    for pid, sidx, peri_pred, eat_pred, peri_truth, eat_truth in pairs:
        metrics.append(overlap_metrics(peri_pred, peri_truth, pid, sidx, "pericardium"))
        metrics.append(overlap_metrics(eat_pred, eat_truth, pid, sidx, "eat"))
        pred_counts.append(float(eat_pred.sum()))
        ref_counts.append(float(eat_truth.sum()))

    fold_key = str(args.fold) if args.fold is not None else "0"
    report = build_report(
        {fold_key: metrics}, pred_counts, ref_counts,
        per_patient=cfg.evaluate.per_patient,
    )
    report.to_json(out_dir / "eval_report.json")
    write_slice_metrics_csv(metrics, out_dir / "slice_metrics.csv")
    if cfg.evaluate.emit_plots and not args.no_plots:
        emit_plots(report, out_dir)
    archive_effective_config(cfg, out_dir)
    eat = report.cross_fold_metrics.get("eat", {})
    print(f"evaluate: {len(pairs)} slices, EAT DSC "
          f"{eat.get('dsc', float('nan')):.4f} -> {out_dir / 'eval_report.json'}")
    return EXIT_OK


def cmd_report(args) -> int:
    run_dir = Path(args.run)
    if not run_dir.exists():
        raise ManifestError(f"run directory not found: {run_dir}")
    out_dir = Path(args.out) if args.out else run_dir
    out_dir.mkdir(parents=True, exist_ok=True)

    combined: dict = {"run_dir": str(run_dir), "artifacts": []}
    for name in ("cv_summary.json", "eval_report.json", "quantification.json"):
        for found in sorted(run_dir.rglob(name)):
            combined["artifacts"].append(str(found.relative_to(run_dir)))
            combined[found.stem] = json.loads(found.read_text(encoding="utf-8"))
    records = []
    for found in sorted(run_dir.rglob("train_record.json")):
        combined["artifacts"].append(str(found.relative_to(run_dir)))
        records.append(json.loads(found.read_text(encoding="utf-8")))
    if records:
        combined["train_records"] = records
    if not combined["artifacts"]:
        raise ManifestError(f"no pipeline artifacts found under {run_dir}")

    (out_dir / "report.json").write_text(
        json.dumps(combined, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    lines = ["# Run report", "", f"Run directory: `{run_dir}`", ""]
    if records:
        lines += ["| fold | best epoch | best val loss |", "| --- | --- | --- |"]
        lines += [f"| {r['fold_index']} | {r['best_epoch']} | {r['best_val_loss']:.4f} |"
                  for r in records]
        lines.append("")
    eval_report = combined.get("eval_report")
    if eval_report:
        lines += ["| target | DSC | Jaccard | precision | recall |",
                  "| --- | --- | --- | --- | --- |"]
        for target, row in sorted(eval_report.get("cross_fold_metrics", {}).items()):
            lines.append(f"| {target} | {row['dsc']:.4f} | {row['jaccard']:.4f} "
                         f"| {row['precision']:.4f} | {row['recall']:.4f} |")
        if eval_report.get("pearson_r") is not None:
            lines += ["", f"Pearson r = {eval_report['pearson_r']:.4f} "
                          f"(p = {eval_report['pearson_p']:.3g})"]
        lines.append("")
    quant = combined.get("quantification")
    if quant:
        lines += [f"Total predicted EAT pixels: {quant['total_predicted']}",
                  f"Total reference EAT pixels: {quant['total_ground_truth']}", ""]
    (out_dir / "report.md").write_text("\n".join(lines), encoding="utf-8")
    print(f"report: {len(combined['artifacts'])} artifacts -> {out_dir / 'report.json'}")
    return EXIT_OK


def _add_config_flags(sub):
    sub.add_argument("--config", help="run config JSON file")
    sub.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                     help="override a config value (repeatable)")
    sub.add_argument("--seed", type=int, help="override train.seed")
    sub.add_argument("--out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="eatseg",
        description="Epicardial adipose tissue segmentation and quantification pipeline.",
    )
    subparsers = parser.add_subparsers(dest="command", required=True)

    p = subparsers.add_parser("phantom", help="generate a synthetic phantom dataset")
    p.add_argument("--patients", type=int, default=4)
    p.add_argument("--slices", type=int, default=8, help="slices per patient")
    p.add_argument("--size", type=int, default=64, help="square image size in pixels")
    p.add_argument("--eat-fraction", type=float, default=0.35)
    p.add_argument("--noise-hu", type=float, default=0.0)
    p.add_argument("--no-distractor", action="store_true",
                   help="omit the extra-pericardial fat blob")
    p.add_argument("--empty-end-slices", type=int, default=0)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_phantom)

    p = subparsers.add_parser("preprocess", help="build and archive training samples")
    _add_config_flags(p)
    p.add_argument("--manifest", help="dataset manifest JSON (overrides paths.manifest)")
    p.set_defaults(func=cmd_preprocess)

    p = subparsers.add_parser("train", help="train one fold or all folds")
    _add_config_flags(p)
    p.add_argument("--manifest", help="dataset manifest JSON (overrides paths.manifest)")
    p.add_argument("--samples", help="preprocessed samples.npz (skips preprocessing)")
    group = p.add_mutually_exclusive_group()
    group.add_argument("--fold", type=int, help="fold index to hold out for validation")
    group.add_argument("--all-folds", action="store_true", help="run full cross-validation")
    p.set_defaults(func=cmd_train)

    p = subparsers.add_parser("predict", help="run a trained model over a dataset")
    _add_config_flags(p)
    p.add_argument("--manifest", help="dataset manifest JSON (overrides paths.manifest)")
    p.add_argument("--checkpoint", required=True, help="checkpoint file to load")
    p.set_defaults(func=cmd_predict)

    p = subparsers.add_parser("quantify", help="per-slice EAT pixel counts and totals")
    _add_config_flags(p)
    p.add_argument("--pred", required=True, help="predict output directory")
    p.add_argument("--truth", required=True, help="dataset manifest with reference masks")
    p.add_argument("--fold", type=int, default=None, help="fold provenance tag")
    p.add_argument("--fit-bias", action="store_true",
                   help="fit and record an additive bias correction on these counts")
    p.set_defaults(func=cmd_quantify)

    p = subparsers.add_parser("evaluate", help="overlap metrics, correlation, Bland-Altman")
    _add_config_flags(p)
    p.add_argument("--pred", required=True, help="predict output directory")
    p.add_argument("--truth", required=True, help="dataset manifest with reference masks")
    p.add_argument("--fold", type=int, default=None, help="fold key for the report")
    p.add_argument("--no-plots", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = subparsers.add_parser("report", help="combine run artifacts into one report")
    p.add_argument("--run", required=True, help="directory holding pipeline outputs")
    p.add_argument("--out", help="output directory (defaults to --run)")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    try:
        return args.func(args)
    except (ConfigError, ManifestError, ValueError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (DivergenceError, DataLeakError, CheckpointError,
            UndefinedCorrelationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except EatsegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
