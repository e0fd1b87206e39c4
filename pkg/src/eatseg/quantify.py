"""EAT quantification: derive EAT masks from predicted pericardium regions,
count positive pixels as the volume proxy, and apply the additive
classify-and-count bias correction.

The correction's bias is the Bland-Altman mean difference (predicted minus
reference) and must be fitted on a fold disjoint from the one it is applied
to; fold provenance is recorded and checked.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataLeakError


@dataclass
class SliceCount:
    patient_id: str
    slice_index: int
    predicted_count: int
    ground_truth_count: int


@dataclass
class EatQuantification:
    """Per-slice and per-patient EAT pixel counts for one evaluation set."""

    per_slice_counts: list[SliceCount] = field(default_factory=list)
    pixel_area_mm2: float | None = None
    slice_thickness_mm: float | None = None
    fold: int | None = None

    @property
    def per_patient_totals(self) -> dict[str, dict[str, int]]:
        totals: dict[str, dict[str, int]] = {}
        for c in self.per_slice_counts:
            t = totals.setdefault(c.patient_id, {"predicted": 0, "ground_truth": 0})
            t["predicted"] += c.predicted_count
            t["ground_truth"] += c.ground_truth_count
        return totals

    def predicted_counts(self) -> list[float]:
        return [float(c.predicted_count) for c in self.per_slice_counts]

    def ground_truth_counts(self) -> list[float]:
        return [float(c.ground_truth_count) for c in self.per_slice_counts]

    def voxel_volume_mm3(self) -> float | None:
        """Physical volume per pixel-count unit; None when spacing is unknown."""
        if self.pixel_area_mm2 is None or self.slice_thickness_mm is None:
            return None
        return self.pixel_area_mm2 * self.slice_thickness_mm


@dataclass
class BiasCorrection:
    bias: float  # mean of (predicted - reference), in pixels
    source: str = "bland_altman_mean"
    fitted_on: int | None = None  # fold identifier


def derive_eat(pericardium_pred: np.ndarray, adipose_map: np.ndarray) -> np.ndarray:
    """EAT mask = predicted pericardium AND adipose-band map, elementwise."""
    pericardium_pred = np.asarray(pericardium_pred)
    adipose_map = np.asarray(adipose_map)
    if pericardium_pred.shape != adipose_map.shape:
        raise ValueError(
            f"shape mismatch: pericardium {pericardium_pred.shape} vs adipose {adipose_map.shape}"
        )
    return ((pericardium_pred > 0) & (adipose_map > 0)).astype(np.uint8)


def binarize_prediction(prob_map: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Threshold a probability map; ties at the threshold map to 1."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must be in [0, 1], got {threshold}")
    return (np.asarray(prob_map) >= threshold).astype(np.uint8)


def count_eat_pixels(eat_mask: np.ndarray) -> int:
    return int(np.count_nonzero(eat_mask))


def aggregate_counts(
    entries: list[tuple[str, int, np.ndarray, np.ndarray]],
    pixel_area_mm2: float | None = None,
    slice_thickness_mm: float | None = None,
    fold: int | None = None,
) -> EatQuantification:
    """Count (predicted_eat, ground_truth_eat) mask pairs into a quantification.

    entries: (patient_id, slice_index, predicted_eat_mask, ground_truth_eat_mask).
    """
    quant = EatQuantification(
        pixel_area_mm2=pixel_area_mm2, slice_thickness_mm=slice_thickness_mm, fold=fold
    )
    for patient_id, slice_index, pred_mask, truth_mask in entries:
        quant.per_slice_counts.append(SliceCount(
            patient_id=patient_id,
            slice_index=slice_index,
            predicted_count=count_eat_pixels(pred_mask),
            ground_truth_count=count_eat_pixels(truth_mask),
        ))
    return quant


def fit_bias_correction(quant: EatQuantification, fold: int | None = None) -> BiasCorrection:
    """Estimate the additive bias as the mean of (predicted - reference) counts."""
    if not quant.per_slice_counts:
        raise ValueError("cannot fit a bias correction on an empty quantification")
    diffs = np.asarray(quant.predicted_counts()) - np.asarray(quant.ground_truth_counts())
    return BiasCorrection(bias=float(diffs.mean()), fitted_on=fold if fold is not None else quant.fold)


def adjusted_count(
    raw_count: float,
    correction: BiasCorrection,
    eval_fold: int | None = None,
    clamp_at_zero: bool = True,
) -> tuple[float, bool]:
    """Apply the additive correction: raw_count - bias, clamped at 0.

    Returns (corrected, clamped). When eval_fold is given it must differ from
    the fold the correction was fitted on, otherwise DataLeakError; pass
    eval_fold=None for pure arithmetic (e.g. held-in self-consistency checks).
    """
    if eval_fold is not None and correction.fitted_on is not None \
            and eval_fold == correction.fitted_on:
        raise DataLeakError(
            f"bias correction fitted on fold {correction.fitted_on} "
            f"applied to the same fold"
        )
    corrected = raw_count - correction.bias
    if clamp_at_zero and corrected < 0:
        return 0.0, True
    return corrected, False


def apply_correction(
    quant: EatQuantification,
    correction: BiasCorrection,
    eval_fold: int | None = None,
) -> list[tuple[SliceCount, float, bool]]:
    """Correct every per-slice predicted count; returns (entry, corrected, clamped)."""
    return [
        (c, *adjusted_count(float(c.predicted_count), correction, eval_fold=eval_fold))
        for c in quant.per_slice_counts
    ]


def write_quantification_csv(
    quant: EatQuantification,
    path: str | Path,
    correction: BiasCorrection | None = None,
    eval_fold: int | None = None,
):
    """CSV export: patient_id, slice_index, predicted_count, ground_truth_count,
    corrected_count (blank without a correction)."""
    corrected: dict[int, float] = {}
    if correction is not None:
        for i, (_, value, _) in enumerate(apply_correction(quant, correction, eval_fold)):
            corrected[i] = value
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["patient_id", "slice_index", "predicted_count",
                         "ground_truth_count", "corrected_count"])
        for i, c in enumerate(quant.per_slice_counts):
            writer.writerow([
                c.patient_id, c.slice_index, c.predicted_count, c.ground_truth_count,
                f"{corrected[i]:.4f}" if i in corrected else "",
            ])


def write_quantification_json(
    quant: EatQuantification,
    path: str | Path,
    correction: BiasCorrection | None = None,
):
    diffs = np.asarray(quant.predicted_counts()) - np.asarray(quant.ground_truth_counts())
    summary = {
        "slices": len(quant.per_slice_counts),
        "fold": quant.fold,
        "total_predicted": int(sum(c.predicted_count for c in quant.per_slice_counts)),
        "total_ground_truth": int(sum(c.ground_truth_count for c in quant.per_slice_counts)),
        "mean_count_difference": float(diffs.mean()) if len(diffs) else None,
        "per_patient_totals": quant.per_patient_totals,
        "pixel_area_mm2": quant.pixel_area_mm2,
        "slice_thickness_mm": quant.slice_thickness_mm,
        "voxel_volume_mm3": quant.voxel_volume_mm3(),
        "bias_correction": asdict(correction) if correction else None,
    }
    Path(path).write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
