"""Dataset schema, on-disk loading/saving, and per-patient fold splitting.

The on-disk layout is manifest-driven: a UTF-8 JSON file with top-level
``hu_slope``/``hu_intercept`` (raw-to-HU conversion) and an ``entries``
array, one entry per slice, with paths relative to the manifest file.
Slice images are either lossless greyscale PNGs (8/16-bit) or 16-bit
little-endian flat binaries (``.raw``/``.bin``; dims taken from top-level
``width``/``height``). Masks are greyscale images binarized on load
(any value > 0 maps to 1).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np

from .errors import ManifestError, MissingAssetError

DEFAULT_ADIPOSE_BAND = (-200.0, -30.0)

_RAW_SUFFIXES = {".raw", ".bin"}


@dataclass
class CtSlice:
    """One axial CT slice in Hounsfield units."""

    patient_id: str
    slice_index: int
    pixels: np.ndarray  # 2-D int16 HU array
    depth_mm: float | None = None

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels)
        if self.pixels.ndim != 2:
            raise ValueError(f"slice pixels must be 2-D, got shape {self.pixels.shape}")
        if self.slice_index < 0:
            raise ValueError(f"slice_index must be >= 0, got {self.slice_index}")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass
class CtStudy:
    """One patient's ordered stack of CT slices."""

    patient_id: str
    slices: list[CtSlice]
    scanner: str = ""

    def __post_init__(self):
        indices = [s.slice_index for s in self.slices]
        if len(set(indices)) != len(indices):
            raise ValueError(f"duplicate slice_index in study {self.patient_id!r}")
        if indices != sorted(indices):
            raise ValueError(f"slices of study {self.patient_id!r} not sorted by slice_index")

    def __len__(self) -> int:
        return len(self.slices)


@dataclass
class MaskPair:
    """Pericardium mask and derived EAT mask for one slice, values in {0, 1}."""

    pericardium: np.ndarray
    eat: np.ndarray

    def __post_init__(self):
        self.pericardium = np.asarray(self.pericardium, dtype=np.uint8)
        self.eat = np.asarray(self.eat, dtype=np.uint8)
        if self.pericardium.shape != self.eat.shape:
            raise ValueError(
                f"mask shape mismatch: pericardium {self.pericardium.shape} vs eat {self.eat.shape}"
            )
        for name, mask in (("pericardium", self.pericardium), ("eat", self.eat)):
            vals = np.unique(mask)
            if not np.isin(vals, (0, 1)).all():
                raise ValueError(f"{name} mask contains values outside {{0, 1}}: {vals}")
        if np.any(self.eat & ~self.pericardium.astype(bool)):
            raise ValueError("eat mask has pixels outside the pericardium mask")


@dataclass
class ManifestEntry:
    patient_id: str
    slice_index: int
    image_path: Path
    pericardium_mask_path: Path
    eat_mask_path: Path | None = None
    scanner: str = ""


@dataclass
class DatasetManifest:
    """Validated view of the on-disk dataset."""

    entries: list[ManifestEntry]
    hu_slope: float
    hu_intercept: float
    base_dir: Path
    width: int | None = None  # only needed for flat-binary images
    height: int | None = None

    def patient_ids(self) -> list[str]:
        seen: dict[str, None] = {}
        for e in self.entries:
            seen.setdefault(e.patient_id, None)
        return list(seen)

    def entries_for(self, patient_id: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.patient_id == patient_id]


@dataclass
class FoldSplit:
    """Per-patient fold assignment; all slices of a patient share a fold."""

    fold_count: int
    assignments: dict[str, int] = field(default_factory=dict)

    def patients_in_fold(self, fold: int) -> list[str]:
        return sorted(p for p, f in self.assignments.items() if f == fold)

    def patients_outside_fold(self, fold: int) -> list[str]:
        return sorted(p for p, f in self.assignments.items() if f != fold)


def _require(condition: bool, path: str, message: str):
    if not condition:
        raise ManifestError(f"{path}: {message}")


def load_manifest(path: str | Path) -> DatasetManifest:
    """Parse and validate a dataset manifest, checking every referenced file exists.

    Raises ManifestError on schema violations (message carries the offending
    field path) and MissingAssetError naming the first entry whose image or
    mask file is absent.
    """
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest file not found: {path}")
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ManifestError(f"manifest is not valid JSON: {exc}") from exc

    _require(isinstance(payload, dict), "$", "top level must be a JSON object")
    for key in ("hu_slope", "hu_intercept", "entries"):
        _require(key in payload, f"$.{key}", "required key missing")
    _require(isinstance(payload["hu_slope"], (int, float)), "$.hu_slope", "must be a number")
    _require(isinstance(payload["hu_intercept"], (int, float)), "$.hu_intercept", "must be a number")
    _require(isinstance(payload["entries"], list), "$.entries", "must be an array")
    _require(len(payload["entries"]) > 0, "$.entries", "empty manifest")

    base_dir = path.parent
    entries: list[ManifestEntry] = []
    for i, raw in enumerate(payload["entries"]):
        where = f"$.entries[{i}]"
        _require(isinstance(raw, dict), where, "entry must be an object")
        for key in ("patient_id", "slice_index", "image", "pericardium_mask"):
            _require(key in raw, f"{where}.{key}", "required key missing")
        _require(isinstance(raw["patient_id"], str) and raw["patient_id"] != "",
                 f"{where}.patient_id", "must be a non-empty string")
        _require(isinstance(raw["slice_index"], int) and raw["slice_index"] >= 0,
                 f"{where}.slice_index", "must be an integer >= 0")

        entry = ManifestEntry(
            patient_id=raw["patient_id"],
            slice_index=raw["slice_index"],
            image_path=base_dir / raw["image"],
            pericardium_mask_path=base_dir / raw["pericardium_mask"],
            eat_mask_path=(base_dir / raw["eat_mask"]) if raw.get("eat_mask") else None,
            scanner=raw.get("scanner", ""),
        )
        for label, p in (("image", entry.image_path),
                         ("pericardium_mask", entry.pericardium_mask_path),
                         ("eat_mask", entry.eat_mask_path)):
            if p is not None and not p.exists():
                raise MissingAssetError(
                    f"{where}.{label}: file not found: {p} "
                    f"(patient {entry.patient_id!r}, slice {entry.slice_index})"
                )
        entries.append(entry)

    seen_keys = set()
    for i, e in enumerate(entries):
        key = (e.patient_id, e.slice_index)
        _require(key not in seen_keys, f"$.entries[{i}]",
                 f"duplicate (patient_id, slice_index) = {key}")
        seen_keys.add(key)

    return DatasetManifest(
        entries=entries,
        hu_slope=float(payload["hu_slope"]),
        hu_intercept=float(payload["hu_intercept"]),
        base_dir=base_dir,
        width=payload.get("width"),
        height=payload.get("height"),
    )


def _read_greyscale(path: Path, manifest: DatasetManifest) -> np.ndarray:
    if path.suffix.lower() in _RAW_SUFFIXES:
        if manifest.width is None or manifest.height is None:
            raise ManifestError(
                f"$.width/$.height: required for flat-binary image {path.name}"
            )
        raw = np.fromfile(path, dtype="<u2")
        expected = manifest.width * manifest.height
        if raw.size != expected:
            raise ManifestError(
                f"flat-binary image {path.name} has {raw.size} pixels, expected {expected}"
            )
        return raw.reshape(manifest.height, manifest.width)
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise ManifestError(f"could not decode image file: {path}")
    if img.ndim == 3:  # tolerate accidental RGB export of a greyscale label
        img = img[..., 0]
    return img


def _to_hu(raw: np.ndarray, manifest: DatasetManifest) -> np.ndarray:
    hu = raw.astype(np.float64) * manifest.hu_slope + manifest.hu_intercept
    return np.rint(hu).astype(np.int16)


def load_study(
    manifest: DatasetManifest,
    patient_id: str,
    adipose_band: tuple[float, float] = DEFAULT_ADIPOSE_BAND,
) -> tuple[CtStudy, list[MaskPair]]:
    """Load one patient's slices and masks, sorted ascending by slice_index.

    Masks are binarized (any nonzero value maps to 1). When an entry has no
    eat_mask, the EAT label is derived as the dataset defines it: pixels in
    the adipose HU band masked by the pericardium label.
    """
    entries = manifest.entries_for(patient_id)
    if not entries:
        known = manifest.patient_ids()
        raise KeyError(f"patient {patient_id!r} not in manifest (patients: {known})")
    entries = sorted(entries, key=lambda e: e.slice_index)

    slices: list[CtSlice] = []
    masks: list[MaskPair] = []
    for entry in entries:
        hu = _to_hu(_read_greyscale(entry.image_path, manifest), manifest)
        peri = (_read_greyscale(entry.pericardium_mask_path, manifest) > 0).astype(np.uint8)
        if peri.shape != hu.shape:
            raise ManifestError(
                f"pericardium mask shape {peri.shape} != image shape {hu.shape} "
                f"(patient {patient_id!r}, slice {entry.slice_index})"
            )
        if entry.eat_mask_path is not None:
            eat = (_read_greyscale(entry.eat_mask_path, manifest) > 0).astype(np.uint8)
        else:
            low, high = adipose_band
            adipose = (hu >= low) & (hu <= high)
            eat = (adipose & peri.astype(bool)).astype(np.uint8)
        slices.append(CtSlice(patient_id=patient_id, slice_index=entry.slice_index, pixels=hu))
        masks.append(MaskPair(pericardium=peri, eat=eat))

    return CtStudy(patient_id=patient_id, slices=slices, scanner=entries[0].scanner), masks


def save_study(
    study: CtStudy,
    masks: list[MaskPair],
    out_dir: str | Path,
    hu_slope: float = 1.0,
    hu_intercept: float = -1024.0,
) -> list[dict]:
    """Write a study back to disk as 16-bit PNG images and 8-bit 0/255 mask PNGs.

    Returns the manifest entry dicts for the written files (paths relative to
    out_dir). Round-trips bit-identically with load_study given integral HU
    values representable under the raw encoding.
    """
    if len(masks) != len(study.slices):
        raise ValueError(f"{len(masks)} masks for {len(study.slices)} slices")
    out_dir = Path(out_dir)
    patient_dir = out_dir / study.patient_id
    patient_dir.mkdir(parents=True, exist_ok=True)

    entries = []
    for ct_slice, mask in zip(study.slices, masks):
        raw = (ct_slice.pixels.astype(np.float64) - hu_intercept) / hu_slope
        raw_u16 = np.rint(raw)
        if raw_u16.min() < 0 or raw_u16.max() > np.iinfo(np.uint16).max:
            raise ValueError(
                f"HU range [{ct_slice.pixels.min()}, {ct_slice.pixels.max()}] does not fit "
                f"the uint16 raw encoding with slope={hu_slope}, intercept={hu_intercept}"
            )
        stem = f"slice_{ct_slice.slice_index:04d}"
        image_rel = f"{study.patient_id}/{stem}.png"
        peri_rel = f"{study.patient_id}/{stem}_pericardium.png"
        eat_rel = f"{study.patient_id}/{stem}_eat.png"
        cv2.imwrite(str(out_dir / image_rel), raw_u16.astype(np.uint16))
        cv2.imwrite(str(out_dir / peri_rel), mask.pericardium * np.uint8(255))
        cv2.imwrite(str(out_dir / eat_rel), mask.eat * np.uint8(255))
        entries.append({
            "patient_id": study.patient_id,
            "slice_index": ct_slice.slice_index,
            "image": image_rel,
            "pericardium_mask": peri_rel,
            "eat_mask": eat_rel,
            "scanner": study.scanner,
        })
    return entries


def write_manifest(
    entries: list[dict],
    out_dir: str | Path,
    hu_slope: float = 1.0,
    hu_intercept: float = -1024.0,
    filename: str = "manifest.json",
) -> Path:
    """Write a manifest JSON for entries produced by save_study."""
    out_dir = Path(out_dir)
    payload = {
        "hu_slope": hu_slope,
        "hu_intercept": hu_intercept,
        "entries": entries,
    }
    manifest_path = out_dir / filename
    manifest_path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    return manifest_path


def split_folds(patient_ids: list[str], fold_count: int, seed: int) -> FoldSplit:
    """Assign patients to folds: seeded shuffle followed by round-robin.

    Deterministic given the seed; fold sizes differ by at most one patient.
    """
    if fold_count < 2:
        raise ValueError(f"fold_count must be >= 2, got {fold_count}")
    if len(patient_ids) < fold_count:
        raise ValueError(
            f"need at least {fold_count} patients for {fold_count} folds, got {len(patient_ids)}"
        )
    if len(set(patient_ids)) != len(patient_ids):
        raise ValueError("patient_ids contains duplicates")

    rng = np.random.default_rng(seed)
    order = sorted(patient_ids)  # canonical order first, so input order is irrelevant
    rng.shuffle(order)
    assignments = {pid: i % fold_count for i, pid in enumerate(order)}
    return FoldSplit(fold_count=fold_count, assignments=assignments)
