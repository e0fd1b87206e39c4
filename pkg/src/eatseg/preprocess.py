"""Preprocessing: adipose HU thresholding, downscaling, zero-centering,
empty-slice removal, and the constant slice-depth input channel.

The network input is built per slice as a 2-channel plane: channel 0 is the
thresholded, resized, zero-centered CT slice; channel 1 is a constant plane
holding that slice's normalized depth in [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np

from .data import CtSlice, CtStudy, MaskPair


@dataclass
class PreprocessConfig:
    adipose_hu_low: float = -200.0
    adipose_hu_high: float = -30.0
    target_size: int = 128
    global_mean: float = 0.1
    drop_empty_label_slices: bool = True
    # "binary": in-band pixels map to 1; "intensity": linear map of the band to [0, 1]
    threshold_mode: str = "binary"

    def __post_init__(self):
        if self.adipose_hu_low >= self.adipose_hu_high:
            raise ValueError(
                f"adipose_hu_low must be < adipose_hu_high, got "
                f"[{self.adipose_hu_low}, {self.adipose_hu_high}]"
            )
        if self.target_size <= 0:
            raise ValueError(f"target_size must be > 0, got {self.target_size}")
        if self.threshold_mode not in ("binary", "intensity"):
            raise ValueError(f"unknown threshold_mode: {self.threshold_mode!r}")


@dataclass
class TrainSample:
    """One network input/target pair.

    input has shape (2, target_size, target_size); channel 1 is constant and
    equal to normalized_depth.
    """

    input: np.ndarray
    target: np.ndarray
    patient_id: str
    slice_index: int
    normalized_depth: float


@dataclass
class RemovalReport:
    """Slices dropped because their EAT label had no positive pixels."""

    removed: list[tuple[str, int]] = field(default_factory=list)  # (patient_id, slice_index)

    @property
    def count(self) -> int:
        return len(self.removed)


def threshold_adipose(ct_slice: CtSlice | np.ndarray, cfg: PreprocessConfig) -> np.ndarray:
    """Map HU pixels to the adipose-band indicator (closed interval).

    In "binary" mode in-band pixels become 1.0 and everything else 0.0; in
    "intensity" mode in-band pixels map linearly onto [0, 1] and out-of-band
    pixels become 0.0.
    """
    hu = ct_slice.pixels if isinstance(ct_slice, CtSlice) else np.asarray(ct_slice)
    hu = hu.astype(np.float32)
    in_band = (hu >= cfg.adipose_hu_low) & (hu <= cfg.adipose_hu_high)
    if cfg.threshold_mode == "binary":
        return in_band.astype(np.float32)
    span = cfg.adipose_hu_high - cfg.adipose_hu_low
    scaled = (hu - cfg.adipose_hu_low) / span
    return np.where(in_band, scaled, 0.0).astype(np.float32)


def normalize_and_center(image: np.ndarray, cfg: PreprocessConfig) -> np.ndarray:
    """Zero-center a normalized image by subtracting the global training mean."""
    return np.asarray(image, dtype=np.float32) - np.float32(cfg.global_mean)


def resize_to_target(image: np.ndarray, target_size: int, is_mask: bool) -> np.ndarray:
    """Resize a square image to target_size x target_size.

    Images use bilinear interpolation; masks use nearest-neighbor and are
    re-binarized. An input already at target size is returned unchanged.
    """
    image = np.asarray(image)
    if image.ndim != 2 or image.shape[0] != image.shape[1]:
        raise ValueError(f"expected a square 2-D image, got shape {image.shape}")
    if image.shape[0] == target_size:
        return image.copy()
    if is_mask:
        out = cv2.resize(image.astype(np.uint8), (target_size, target_size),
                         interpolation=cv2.INTER_NEAREST)
        return (out > 0).astype(np.uint8)
    out = cv2.resize(image.astype(np.float32), (target_size, target_size),
                     interpolation=cv2.INTER_LINEAR)
    return out


def normalized_depth(slice_index: int, slice_count: int) -> float:
    """Normalize a slice position to [0, 1]; a single-slice study maps to 0.5."""
    if slice_count < 1:
        raise ValueError(f"slice_count must be >= 1, got {slice_count}")
    if not 0 <= slice_index < slice_count:
        raise ValueError(f"slice_index {slice_index} out of range [0, {slice_count})")
    if slice_count == 1:
        return 0.5
    return slice_index / (slice_count - 1)


def build_sample(
    ct_slice: CtSlice,
    mask: MaskPair,
    study: CtStudy,
    cfg: PreprocessConfig,
) -> TrainSample:
    """Assemble the 2-channel input and resized pericardium target for one slice.

    Depth is normalized over the study's retained slice range: the slice's
    position within study.slices, not its raw slice_index.
    """
    try:
        position = next(i for i, s in enumerate(study.slices) if s.slice_index == ct_slice.slice_index)
    except StopIteration:
        raise ValueError(
            f"slice {ct_slice.slice_index} of patient {ct_slice.patient_id!r} "
            f"is not in the given study"
        ) from None

    ct = threshold_adipose(ct_slice, cfg)
    ct = resize_to_target(ct, cfg.target_size, is_mask=False)
    ct = normalize_and_center(ct, cfg)

    depth = normalized_depth(position, len(study.slices))
    depth_plane = np.full((cfg.target_size, cfg.target_size), depth, dtype=np.float32)

    target = resize_to_target(mask.pericardium, cfg.target_size, is_mask=True)

    return TrainSample(
        input=np.stack([ct, depth_plane]).astype(np.float32),
        target=target.astype(np.uint8),
        patient_id=ct_slice.patient_id,
        slice_index=ct_slice.slice_index,
        normalized_depth=float(depth),
    )


def filter_empty_slices(
    dataset: list[tuple[CtStudy, list[MaskPair]]],
) -> tuple[list[tuple[CtStudy, list[MaskPair]]], RemovalReport]:
    """Drop slices whose EAT label has zero positive pixels.

    Returns the filtered dataset (patients left with no slices are removed
    entirely) and a report listing every removed (patient_id, slice_index).
    """
    report = RemovalReport()
    filtered: list[tuple[CtStudy, list[MaskPair]]] = []
    for study, masks in dataset:
        if len(masks) != len(study.slices):
            raise ValueError(
                f"patient {study.patient_id!r}: {len(masks)} masks for {len(study.slices)} slices"
            )
        kept_slices: list[CtSlice] = []
        kept_masks: list[MaskPair] = []
        for ct_slice, mask in zip(study.slices, masks):
            if mask.eat.sum() == 0:
                report.removed.append((study.patient_id, ct_slice.slice_index))
            else:
                kept_slices.append(ct_slice)
                kept_masks.append(mask)
        if kept_slices:
            filtered.append(
                (CtStudy(patient_id=study.patient_id, slices=kept_slices, scanner=study.scanner),
                 kept_masks)
            )
    return filtered, report


def build_dataset_samples(
    dataset: list[tuple[CtStudy, list[MaskPair]]],
    cfg: PreprocessConfig,
) -> tuple[list[TrainSample], RemovalReport]:
    """Full preprocessing for loaded studies: optional empty-slice filtering,
    then per-slice sample construction."""
    if cfg.drop_empty_label_slices:
        dataset, report = filter_empty_slices(dataset)
    else:
        report = RemovalReport()
    samples: list[TrainSample] = []
    for study, masks in dataset:
        for ct_slice, mask in zip(study.slices, masks):
            samples.append(build_sample(ct_slice, mask, study, cfg))
    return samples, report


def save_samples(samples: list[TrainSample], report: RemovalReport, path: str | Path):
    """Archive preprocessed samples and the removal report as one .npz file."""
    if not samples:
        raise ValueError("no samples to save")
    np.savez_compressed(
        path,
        inputs=np.stack([s.input for s in samples]).astype(np.float32),
        targets=np.stack([s.target for s in samples]).astype(np.uint8),
        patient_ids=np.array([s.patient_id for s in samples]),
        slice_indices=np.array([s.slice_index for s in samples], dtype=np.int64),
        depths=np.array([s.normalized_depth for s in samples], dtype=np.float64),
        removed_patients=np.array([p for p, _ in report.removed]),
        removed_slices=np.array([i for _, i in report.removed], dtype=np.int64),
    )


def load_samples(path: str | Path) -> tuple[list[TrainSample], RemovalReport]:
    """Inverse of save_samples."""
    with np.load(path, allow_pickle=False) as archive:
        samples = [
            TrainSample(
                input=archive["inputs"][i],
                target=archive["targets"][i],
                patient_id=str(archive["patient_ids"][i]),
                slice_index=int(archive["slice_indices"][i]),
                normalized_depth=float(archive["depths"][i]),
            )
            for i in range(archive["inputs"].shape[0])
        ]
        report = RemovalReport(removed=[
            (str(p), int(i))
            for p, i in zip(archive["removed_patients"], archive["removed_slices"])
        ])
    return samples, report
