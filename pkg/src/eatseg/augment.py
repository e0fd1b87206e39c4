"""Stochastic training-time augmentation applied jointly to the CT channel
and the target mask: horizontal flip, random affine combinations
(translate/scale/rotate), and a non-linear mesh deform.

Geometric warps use bilinear interpolation with border replication; masks go
through the same warp as float images and are re-binarized at 0.5, so the
warped mask and the warped mask-indicator image agree exactly. The constant
slice-depth channel is never warped.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import cv2
import numpy as np

from .preprocess import TrainSample

AFFINE_COMPONENT_PROB = 0.5  # each of translate/scale/rotate once the affine branch fires


@dataclass
class AugmentPolicy:
    p_hflip: float = 0.5
    p_affine: float = 0.3
    max_translate_frac: float = 0.0625
    max_scale_delta: float = 0.10
    max_rotate_deg: float = 45.0
    p_mesh_deform: float = 0.2
    mesh_grid: int = 4
    mesh_magnitude_frac: float = 0.05

    def __post_init__(self):
        for name in ("p_hflip", "p_affine", "p_mesh_deform"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {p}")
        for name in ("max_translate_frac", "max_scale_delta", "max_rotate_deg",
                     "mesh_magnitude_frac"):
            v = getattr(self, name)
            if v < 0:
                raise ValueError(f"{name} must be >= 0, got {v}")
        if self.mesh_grid < 2:
            raise ValueError(f"mesh_grid must be >= 2, got {self.mesh_grid}")


@dataclass
class AugmentOutcome:
    """Reproducibility record of which branches fired and what was drawn."""

    flipped: bool = False
    affine_params: dict | None = None  # {tx, ty, scale, rot_deg} iff affine fired
    mesh_applied: bool = False
    rng_draws: list[float] = field(default_factory=list)

    @property
    def fired_any(self) -> bool:
        return self.flipped or self.affine_params is not None or self.mesh_applied


def sample_rng(global_seed: int, patient_id: str, slice_index: int, epoch: int) -> np.random.Generator:
    """Independent per-sample generator stream, stable across processes."""
    token = f"{global_seed}:{patient_id}:{slice_index}:{epoch}".encode()
    digest = hashlib.blake2b(token, digest_size=8).digest()
    return np.random.default_rng(int.from_bytes(digest, "little"))


def _affine_matrix(size: int, tx: float, ty: float, scale: float, rot_deg: float) -> np.ndarray:
    center = ((size - 1) / 2.0, (size - 1) / 2.0)
    m = cv2.getRotationMatrix2D(center, rot_deg, scale)
    m[0, 2] += tx
    m[1, 2] += ty
    return m


def _warp_affine(image: np.ndarray, m: np.ndarray) -> np.ndarray:
    size = image.shape[0]
    return cv2.warpAffine(
        image.astype(np.float32), m, (size, size),
        flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_REPLICATE,
    )


def mesh_deform(image: np.ndarray, control_displacements: np.ndarray) -> np.ndarray:
    """Smooth spatial warp from a coarse grid of per-control-point (dx, dy)
    displacements in pixels, bilinearly upsampled to a dense field.

    A positive dx moves content toward +x; zero displacements are the exact
    identity. Sampling is bilinear with border replication.
    """
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError(f"expected a 2-D image, got shape {image.shape}")
    disp = np.asarray(control_displacements, dtype=np.float32)
    if disp.ndim != 3 or disp.shape[2] != 2 or disp.shape[0] < 2 or disp.shape[1] < 2:
        raise ValueError(
            f"control grid must have shape (G, G, 2) with G >= 2, got {disp.shape}"
        )
    h, w = image.shape
    dense = cv2.resize(disp, (w, h), interpolation=cv2.INTER_LINEAR)
    xs, ys = np.meshgrid(np.arange(w, dtype=np.float32), np.arange(h, dtype=np.float32))
    map_x = xs - dense[..., 0]
    map_y = ys - dense[..., 1]
    return cv2.remap(
        image.astype(np.float32), map_x, map_y,
        interpolation=cv2.INTER_LINEAR, borderMode=cv2.BORDER_REPLICATE,
    )


def augment_sample(
    sample: TrainSample,
    policy: AugmentPolicy,
    rng: np.random.Generator,
) -> tuple[TrainSample, AugmentOutcome]:
    """Apply the stochastic policy to one sample.

    The same sampled geometric transform hits channel 0 and the target mask;
    the mask is re-binarized at 0.5 after interpolation; channel 1 keeps its
    constant depth value.
    """
    size = sample.input.shape[1]
    ct = sample.input[0].astype(np.float32)
    mask = sample.target.astype(np.float32)
    outcome = AugmentOutcome()

    def draw() -> float:
        u = float(rng.uniform())
        outcome.rng_draws.append(u)
        return u

    if draw() < policy.p_hflip:
        outcome.flipped = True
        ct = np.fliplr(ct)
        mask = np.fliplr(mask)

    if draw() < policy.p_affine:
        include_translate = draw() < AFFINE_COMPONENT_PROB
        include_scale = draw() < AFFINE_COMPONENT_PROB
        include_rotate = draw() < AFFINE_COMPONENT_PROB
        tx = ty = 0.0
        scale = 1.0
        rot_deg = 0.0
        if include_translate:
            tx = (2.0 * draw() - 1.0) * policy.max_translate_frac * size
            ty = (2.0 * draw() - 1.0) * policy.max_translate_frac * size
        if include_scale:
            scale = 1.0 + (2.0 * draw() - 1.0) * policy.max_scale_delta
        if include_rotate:
            rot_deg = (2.0 * draw() - 1.0) * policy.max_rotate_deg
        outcome.affine_params = {"tx": tx, "ty": ty, "scale": scale, "rot_deg": rot_deg}
        m = _affine_matrix(size, tx, ty, scale, rot_deg)
        ct = _warp_affine(ct, m)
        mask = _warp_affine(mask, m)

    if draw() < policy.p_mesh_deform:
        outcome.mesh_applied = True
        g = policy.mesh_grid
        magnitude = policy.mesh_magnitude_frac * size
        disp = rng.uniform(-magnitude, magnitude, size=(g, g, 2)).astype(np.float32)
        outcome.rng_draws.extend(disp.ravel().tolist())
        ct = mesh_deform(ct, disp)
        mask = mesh_deform(mask, disp)

    depth_plane = np.full((size, size), sample.normalized_depth, dtype=np.float32)
    out = TrainSample(
        input=np.stack([ct.astype(np.float32), depth_plane]),
        target=(mask >= 0.5).astype(np.uint8),
        patient_id=sample.patient_id,
        slice_index=sample.slice_index,
        normalized_depth=sample.normalized_depth,
    )
    return out, outcome
