"""Synthetic cardiac CT phantom generator.

Each phantom patient is a stack of axial slices containing a body ellipse
(soft tissue, 40 HU) on an air background (-1000 HU), a pericardium ellipse
whose radius follows a sinusoidal depth profile, an adipose ring just inside
the pericardium boundary (uniform integer HU inside the adipose band, so
thresholding recovers it exactly when noise is off), inner heart tissue at
35 HU, and optionally a distractor fat blob outside the pericardium that a
plain HU threshold would wrongly count as EAT.

Geometry, HU draws, and file layout are fully determined by the config seed,
so repeated runs produce byte-identical datasets.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import (
    CtSlice,
    CtStudy,
    DatasetManifest,
    MaskPair,
    load_manifest,
    save_study,
    write_manifest,
)
from .errors import ConfigError

AIR_HU = -1000
BODY_HU = 40
HEART_HU = 35
ADIPOSE_HU_RANGE = (-180, -50)  # strictly inside the (-200, -30) band


@dataclass
class PhantomConfig:
    patients: int = 4
    slices_per_patient: int = 8
    image_size: int = 64
    eat_fraction: float = 0.35  # area fraction of the pericardium that is adipose
    r_min_frac: float = 0.10    # pericardium semi-axis at the stack ends
    r_max_frac: float = 0.28    # pericardium semi-axis at mid-stack
    noise_hu: float = 0.0
    include_distractor: bool = True
    empty_eat_end_slices: int = 0  # slices per stack end with pericardium but no EAT
    slice_spacing_mm: float = 3.0
    seed: int = 42
    hu_slope: float = 1.0
    hu_intercept: float = -1024.0

    def validate(self):
        if self.patients < 1:
            raise ConfigError(f"patients must be >= 1, got {self.patients}")
        if self.slices_per_patient < 1:
            raise ConfigError(
                f"slices_per_patient must be >= 1, got {self.slices_per_patient}"
            )
        if self.image_size < 16:
            raise ConfigError(f"image_size must be >= 16, got {self.image_size}")
        if not 0.0 < self.eat_fraction < 1.0:
            raise ConfigError(
                f"eat_fraction must lie strictly between 0 and 1, got {self.eat_fraction}"
            )
        if not 0.0 < self.r_min_frac < self.r_max_frac <= 0.34:
            raise ConfigError(
                "require 0 < r_min_frac < r_max_frac <= 0.34, got "
                f"{self.r_min_frac} and {self.r_max_frac}"
            )
        if self.noise_hu < 0.0:
            raise ConfigError(f"noise_hu must be >= 0, got {self.noise_hu}")
        if self.empty_eat_end_slices < 0:
            raise ConfigError(
                f"empty_eat_end_slices must be >= 0, got {self.empty_eat_end_slices}"
            )
        if 2 * self.empty_eat_end_slices >= self.slices_per_patient:
            raise ConfigError(
                f"{self.empty_eat_end_slices} empty end slices per side leave no "
                f"EAT-bearing slices in a {self.slices_per_patient}-slice stack"
            )
        if self.slice_spacing_mm <= 0.0:
            raise ConfigError(f"slice_spacing_mm must be > 0, got {self.slice_spacing_mm}")


@dataclass
class PhantomStudy:
    study: CtStudy
    masks: list[MaskPair] = field(default_factory=list)


def _patient_rng(seed: int, patient_id: str) -> np.random.Generator:
    digest = hashlib.blake2b(f"{seed}:phantom:{patient_id}".encode(), digest_size=8)
    return np.random.default_rng(int.from_bytes(digest.digest(), "little"))


def _ellipse_mask(size: int, cx: float, cy: float, a: float, b: float) -> np.ndarray:
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    return ((xs - cx) / a) ** 2 + ((ys - cy) / b) ** 2 <= 1.0


def _depth_profile(index: int, count: int, cfg: PhantomConfig) -> float:
    """Pericardium semi-axis (pixels) at a slice position; sinusoidal in depth."""
    d_hat = 0.5 if count == 1 else index / (count - 1)
    frac = cfg.r_min_frac + (cfg.r_max_frac - cfg.r_min_frac) * np.sin(np.pi * d_hat)
    return frac * cfg.image_size


def build_phantom_study(cfg: PhantomConfig, patient_id: str) -> PhantomStudy:
    """Generate one patient's slices and masks in memory."""
    cfg.validate()
    rng = _patient_rng(cfg.seed, patient_id)
    size = cfg.image_size
    center = (size - 1) / 2.0
    cx = center + float(rng.uniform(-0.02, 0.02)) * size
    cy = center + float(rng.uniform(-0.02, 0.02)) * size
    aspect = float(rng.uniform(0.78, 0.92))  # b = aspect * a
    inner_scale = float(np.sqrt(1.0 - cfg.eat_fraction))

    body = _ellipse_mask(size, center, center, 0.46 * size, 0.43 * size)
    distractor = np.zeros((size, size), dtype=bool)
    if cfg.include_distractor:
        distractor = _ellipse_mask(
            size, center + 0.38 * size, center, 0.05 * size, 0.07 * size
        ) & body

    slices, masks = [], []
    n = cfg.slices_per_patient
    for idx in range(n):
        a = _depth_profile(idx, n, cfg)
        b = aspect * a
        peri = _ellipse_mask(size, cx, cy, a, b)
        no_eat = idx < cfg.empty_eat_end_slices or idx >= n - cfg.empty_eat_end_slices
        if no_eat:
            ring = np.zeros_like(peri)
            inner = peri
        else:
            inner = _ellipse_mask(size, cx, cy, inner_scale * a, inner_scale * b)
            ring = peri & ~inner

        hu = np.full((size, size), AIR_HU, dtype=np.float64)
        hu[body] = BODY_HU
        hu[peri] = HEART_HU
        lo, hi = ADIPOSE_HU_RANGE
        hu[ring] = rng.integers(lo, hi + 1, size=int(ring.sum()))
        if cfg.include_distractor:
            hu[distractor] = rng.integers(lo, hi + 1, size=int(distractor.sum()))
        if cfg.noise_hu > 0.0:
            hu = hu + rng.normal(0.0, cfg.noise_hu, size=hu.shape)
        pixels = np.rint(hu).astype(np.int16)

        slices.append(CtSlice(
            patient_id=patient_id,
            slice_index=idx,
            pixels=pixels,
            depth_mm=idx * cfg.slice_spacing_mm,
        ))
        masks.append(MaskPair(
            pericardium=peri.astype(np.uint8),
            eat=ring.astype(np.uint8),
        ))
    return PhantomStudy(study=CtStudy(patient_id=patient_id, slices=slices,
                                      scanner="phantom"), masks=masks)


def generate_phantom(cfg: PhantomConfig, out_dir: str | Path) -> DatasetManifest:
    """Write a complete phantom dataset (images, masks, manifest) to out_dir
    and return the loaded manifest."""
    cfg.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for p in range(cfg.patients):
        patient_id = f"phantom_{p:03d}"
        built = build_phantom_study(cfg, patient_id)
        entries.extend(save_study(built.study, built.masks, out_dir,
                                  hu_slope=cfg.hu_slope, hu_intercept=cfg.hu_intercept))
    manifest_path = write_manifest(entries, out_dir,
                                   hu_slope=cfg.hu_slope, hu_intercept=cfg.hu_intercept)
    return load_manifest(manifest_path)
