"""Segmentation and quantification agreement metrics: Dice/Jaccard/precision/
recall per slice, Pearson correlation over per-slice EAT pixel counts, and
Bland-Altman analysis with plot emission.

Empty-vs-empty masks score 1.0 on every overlap metric; exactly one empty
side scores 0.0. Per-slice metrics are macro-averaged within a fold, and
folds are averaged unweighted (per-patient averaging is available as an
option). Limits of agreement use the 1.96 multiplier (95% interval) and the
sample (n-1) standard deviation; the difference sign convention is
predicted minus reference, so over-segmentation shows as positive bias.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from .errors import UndefinedCorrelationError

LOA_MULTIPLIER = 1.96


@dataclass
class SliceMetrics:
    dsc: float
    jaccard: float
    precision: float
    recall: float
    patient_id: str = ""
    slice_index: int = -1
    target: str = ""  # "pericardium" or "eat"


@dataclass
class BlandAltmanResult:
    mean_diff: float
    sd_diff: float
    loa_low: float
    loa_high: float
    points: list[dict] = field(default_factory=list)  # {"mean": ..., "diff": ...}
    outlier_count: int = 0


@dataclass
class EvalReport:
    fold_metrics: dict[str, dict[str, dict[str, float]]] = field(default_factory=dict)
    # fold_metrics[fold][target] -> {"dsc": ..., "jaccard": ..., "precision": ..., "recall": ...}
    cross_fold_metrics: dict[str, dict[str, float]] = field(default_factory=dict)
    pearson_r: float | None = None
    pearson_p: float | None = None
    bland_altman: BlandAltmanResult | None = None
    slice_count: int = 0

    def to_json(self, path: str | Path):
        payload = asdict(self)
        Path(path).write_text(
            json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )


def overlap_metrics(
    pred: np.ndarray,
    truth: np.ndarray,
    patient_id: str = "",
    slice_index: int = -1,
    target: str = "",
) -> SliceMetrics:
    """DSC, Jaccard, precision, and recall between two binary masks."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs truth {truth.shape}")
    p = pred > 0
    t = truth > 0
    np_, nt = int(p.sum()), int(t.sum())
    if np_ == 0 and nt == 0:
        dsc = jaccard = precision = recall = 1.0
    elif np_ == 0 or nt == 0:
        dsc = jaccard = precision = recall = 0.0
    else:
        inter = int((p & t).sum())
        union = np_ + nt - inter
        dsc = 2.0 * inter / (np_ + nt)
        jaccard = inter / union
        precision = inter / np_
        recall = inter / nt
    return SliceMetrics(dsc=dsc, jaccard=jaccard, precision=precision, recall=recall,
                        patient_id=patient_id, slice_index=slice_index, target=target)


def aggregate_slice_metrics(
    metrics: list[SliceMetrics],
    per_patient: bool = False,
) -> dict[str, float]:
    """Macro-average metrics over slices, or over patient means when
    per_patient is set."""
    if not metrics:
        raise ValueError("no metrics to aggregate")
    if per_patient:
        by_patient: dict[str, list[SliceMetrics]] = {}
        for m in metrics:
            by_patient.setdefault(m.patient_id, []).append(m)
        rows = [aggregate_slice_metrics(group) for group in by_patient.values()]
        return {k: float(np.mean([r[k] for r in rows])) for k in rows[0]}
    return {
        "dsc": float(np.mean([m.dsc for m in metrics])),
        "jaccard": float(np.mean([m.jaccard for m in metrics])),
        "precision": float(np.mean([m.precision for m in metrics])),
        "recall": float(np.mean([m.recall for m in metrics])),
    }


def pearson(xs: list[float], ys: list[float]) -> tuple[float, float]:
    """Sample Pearson r with the two-sided t-distribution p-value."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape:
        raise ValueError(f"length mismatch: {xs.shape[0]} vs {ys.shape[0]}")
    n = xs.shape[0]
    if n < 3:
        raise ValueError(f"need at least 3 points for a correlation, got {n}")
    dx = xs - xs.mean()
    dy = ys - ys.mean()
    sxx = float((dx * dx).sum())
    syy = float((dy * dy).sum())
    if sxx == 0.0 or syy == 0.0:
        raise UndefinedCorrelationError("correlation is undefined for a constant series")
    r = float((dx * dy).sum() / math.sqrt(sxx * syy))
    r = max(-1.0, min(1.0, r))
    if abs(r) == 1.0:
        return r, 0.0
    t = r * math.sqrt((n - 2) / (1.0 - r * r))
    p = 2.0 * float(stats.t.sf(abs(t), df=n - 2))
    return r, p


def bland_altman(pred_counts: list[float], ref_counts: list[float]) -> BlandAltmanResult:
    """Bland-Altman agreement: per-point mean/difference, bias, and 95% limits."""
    pred = np.asarray(pred_counts, dtype=np.float64)
    ref = np.asarray(ref_counts, dtype=np.float64)
    if pred.shape != ref.shape:
        raise ValueError(f"length mismatch: {pred.shape[0]} vs {ref.shape[0]}")
    if pred.shape[0] < 2:
        raise ValueError(f"need at least 2 points, got {pred.shape[0]}")
    diffs = pred - ref
    means = (pred + ref) / 2.0
    bias = float(diffs.mean())
    sd = float(diffs.std(ddof=1))
    loa_low = bias - LOA_MULTIPLIER * sd
    loa_high = bias + LOA_MULTIPLIER * sd
    outliers = int(((diffs < loa_low) | (diffs > loa_high)).sum())
    return BlandAltmanResult(
        mean_diff=bias,
        sd_diff=sd,
        loa_low=loa_low,
        loa_high=loa_high,
        points=[{"mean": float(m), "diff": float(d)} for m, d in zip(means, diffs)],
        outlier_count=outliers,
    )


def build_report(
    per_fold_metrics: dict[str, list[SliceMetrics]],
    pred_counts: list[float] | None = None,
    ref_counts: list[float] | None = None,
    per_patient: bool = False,
) -> EvalReport:
    """Assemble the evaluation report from per-fold slice metrics and pooled
    per-slice EAT counts.

    per_fold_metrics maps a fold key (e.g. "0") to its slice metrics for all
    targets; cross-fold values are unweighted means of the fold values.
    """
    report = EvalReport()
    targets: list[str] = []
    for fold_key, metrics in sorted(per_fold_metrics.items()):
        by_target: dict[str, list[SliceMetrics]] = {}
        for m in metrics:
            by_target.setdefault(m.target or "all", []).append(m)
        report.fold_metrics[fold_key] = {
            target: aggregate_slice_metrics(group, per_patient=per_patient)
            for target, group in sorted(by_target.items())
        }
        for target in by_target:
            if target not in targets:
                targets.append(target)
        report.slice_count += len({(m.patient_id, m.slice_index) for m in metrics})

    for target in targets:
        fold_rows = [
            fold[target] for fold in report.fold_metrics.values() if target in fold
        ]
        report.cross_fold_metrics[target] = {
            k: float(np.mean([row[k] for row in fold_rows])) for k in fold_rows[0]
        }

    if pred_counts is not None and ref_counts is not None and len(pred_counts) >= 3:
        try:
            report.pearson_r, report.pearson_p = pearson(pred_counts, ref_counts)
        except UndefinedCorrelationError:
            report.pearson_r = report.pearson_p = None  # constant series
        report.bland_altman = bland_altman(pred_counts, ref_counts)
    return report


def write_slice_metrics_csv(metrics: list[SliceMetrics], path: str | Path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["patient_id", "slice_index", "target",
                         "dsc", "jaccard", "precision", "recall"])
        for m in metrics:
            writer.writerow([m.patient_id, m.slice_index, m.target,
                             f"{m.dsc:.6f}", f"{m.jaccard:.6f}",
                             f"{m.precision:.6f}", f"{m.recall:.6f}"])


def emit_plots(report: EvalReport, out_dir: str | Path) -> list[Path]:
    """Write the Bland-Altman scatter (bias line + dashed LoA lines) and the
    predicted-vs-truth count scatter as PNG files with deterministic names
    and no embedded timestamps."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if report.bland_altman is None or not report.bland_altman.points:
        raise ValueError("nothing to plot: report has no Bland-Altman points")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ba = report.bland_altman
    means = [p["mean"] for p in ba.points]
    diffs = [p["diff"] for p in ba.points]

    written = []
    fig, ax = plt.subplots(figsize=(6, 4.5), dpi=120)
    ax.scatter(means, diffs, s=14, alpha=0.7, edgecolors="none")
    ax.axhline(ba.mean_diff, color="tab:blue", lw=1.2,
               label=f"bias = {ba.mean_diff:.1f}")
    ax.axhline(ba.loa_low, color="tab:red", lw=1.0, ls="--",
               label=f"LoA = [{ba.loa_low:.1f}, {ba.loa_high:.1f}]")
    ax.axhline(ba.loa_high, color="tab:red", lw=1.0, ls="--")
    ax.set_xlabel("mean of predicted and reference EAT pixel counts")
    ax.set_ylabel("predicted - reference")
    ax.legend(loc="upper right", fontsize=8)
    fig.tight_layout()
    path = out_dir / "bland_altman.png"
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    written.append(path)

    preds = [p["mean"] + p["diff"] / 2.0 for p in ba.points]
    refs = [p["mean"] - p["diff"] / 2.0 for p in ba.points]
    fig, ax = plt.subplots(figsize=(6, 4.5), dpi=120)
    ax.scatter(refs, preds, s=14, alpha=0.7, edgecolors="none")
    lim = max(max(refs, default=1.0), max(preds, default=1.0)) * 1.05 or 1.0
    ax.plot([0, lim], [0, lim], color="grey", lw=0.8, ls=":")
    if report.pearson_r is not None:
        ax.set_title(f"r = {report.pearson_r:.4f}", fontsize=10)
    ax.set_xlabel("reference EAT pixel count per slice")
    ax.set_ylabel("predicted EAT pixel count per slice")
    fig.tight_layout()
    path = out_dir / "count_scatter.png"
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    written.append(path)
    return written
