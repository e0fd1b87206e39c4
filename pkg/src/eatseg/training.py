"""Smoothed-Dice training: loss, single-fold optimization loop with per-epoch
checkpointing and best-model selection, and the per-patient cross-validation
harness.

Each fold emits a per-epoch CSV log (epoch, train_loss, val_loss, seconds),
checkpoint files, and a JSON run record pointing at the earliest epoch that
reached the minimum validation loss. Validation data is never augmented.
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .augment import AugmentPolicy, augment_sample, sample_rng
from .data import FoldSplit
from .errors import DataLeakError, DivergenceError
from .model import SegModelConfig, build_model, save_checkpoint
from .preprocess import TrainSample


@dataclass
class DiceLossConfig:
    smoothing_lambda: float = 1.0

    def __post_init__(self):
        if self.smoothing_lambda <= 0:
            raise ValueError(f"smoothing_lambda must be > 0, got {self.smoothing_lambda}")


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 8
    learning_rate: float = 0.001
    optimizer: str = "adam"
    seed: int = 42
    fold_count: int = 2
    # conventional Adam defaults, recorded here so runs are auditable
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    device: str = "auto"
    keep_all_checkpoints: bool = False

    def __post_init__(self):
        for name in ("epochs", "batch_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.optimizer != "adam":
            raise ValueError(f"unsupported optimizer: {self.optimizer!r}")

    def resolve_device(self) -> torch.device:
        if self.device == "auto":
            return torch.device("cuda" if torch.cuda.is_available() else "cpu")
        return torch.device(self.device)


@dataclass
class TrainRunRecord:
    fold_index: int
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    epoch_seconds: list[float] = field(default_factory=list)
    best_epoch: int = -1
    best_val_loss: float = float("inf")
    checkpoint_path: str = ""
    train_augmentations_fired: int = 0
    val_augmentations_fired: int = 0  # validation passes never augment

    @property
    def epochs_run(self) -> int:
        return len(self.train_loss)

    def to_json(self, path: str | Path):
        Path(path).write_text(json.dumps(asdict(self), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def from_json(cls, path: str | Path) -> "TrainRunRecord":
        return cls(**json.loads(Path(path).read_text(encoding="utf-8")))


def dice_loss(
    pred: torch.Tensor,
    target: torch.Tensor,
    cfg: DiceLossConfig | None = None,
) -> torch.Tensor:
    """Smoothed soft-Dice loss: 1 - (2*sum(pred*target) + lambda) /
    (sum(pred) + sum(target) + lambda).

    Sums run over all pixels of each sample (dim 0 is the batch when input
    is 3-D or higher); the per-sample losses are averaged over the batch.
    Differentiable in pred; value in [0, 1).
    """
    cfg = cfg or DiceLossConfig()
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: pred {tuple(pred.shape)} vs target {tuple(target.shape)}")
    if pred.ndim <= 2:
        pred_flat = pred.reshape(1, -1)
        target_flat = target.reshape(1, -1)
    else:
        pred_flat = pred.reshape(pred.shape[0], -1)
        target_flat = target.reshape(target.shape[0], -1)
    target_flat = target_flat.to(pred_flat.dtype)
    lam = cfg.smoothing_lambda
    intersection = (pred_flat * target_flat).sum(dim=1)
    denom = pred_flat.sum(dim=1) + target_flat.sum(dim=1) + lam
    per_sample = 1.0 - (2.0 * intersection + lam) / denom
    return per_sample.mean()


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    token = f"{seed}:shuffle:{epoch}".encode()
    digest = hashlib.blake2b(token, digest_size=8).digest()
    return np.random.default_rng(int.from_bytes(digest, "little"))


def _to_batch(samples: list[TrainSample], device: torch.device) -> tuple[torch.Tensor, torch.Tensor]:
    inputs = torch.from_numpy(np.stack([s.input for s in samples])).to(device)
    targets = torch.from_numpy(
        np.stack([s.target for s in samples]).astype(np.float32)
    ).unsqueeze(1).to(device)
    return inputs, targets


def _check_patient_disjoint(train_samples: list[TrainSample], val_samples: list[TrainSample]):
    train_patients = {s.patient_id for s in train_samples}
    val_patients = {s.patient_id for s in val_samples}
    overlap = train_patients & val_patients
    if overlap:
        raise DataLeakError(
            f"patients present in both train and validation sets: {sorted(overlap)}"
        )


def train_fold(
    train_samples: list[TrainSample],
    val_samples: list[TrainSample],
    model_cfg: SegModelConfig,
    train_cfg: TrainConfig,
    augment_policy: AugmentPolicy | None = None,
    out_dir: str | Path = "train_out",
    fold_index: int = 0,
    loss_cfg: DiceLossConfig | None = None,
) -> TrainRunRecord:
    """Train one fold for the configured number of epochs.

    Writes last.ckpt every epoch, best.ckpt whenever validation loss improves
    (earliest minimum wins ties), epochs.csv, and train_record.json. Raises
    DataLeakError on overlapping patient sets and DivergenceError (naming the
    epoch) on a non-finite loss.
    """
    if not train_samples or not val_samples:
        raise ValueError("train and validation sample lists must be non-empty")
    _check_patient_disjoint(train_samples, val_samples)

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    device = train_cfg.resolve_device()
    loss_cfg = loss_cfg or DiceLossConfig()

    model = build_model(model_cfg, train_cfg.seed).to(device)
    optimizer = torch.optim.Adam(
        model.parameters(),
        lr=train_cfg.learning_rate,
        betas=(train_cfg.adam_beta1, train_cfg.adam_beta2),
        eps=train_cfg.adam_eps,
    )

    record = TrainRunRecord(fold_index=fold_index)
    csv_path = out_dir / "epochs.csv"
    best_path = out_dir / "best.ckpt"
    with open(csv_path, "w", newline="", encoding="utf-8") as csv_file:
        writer = csv.writer(csv_file)
        writer.writerow(["epoch", "train_loss", "val_loss", "seconds"])

        for epoch in range(train_cfg.epochs):
            started = time.perf_counter()
            model.train()
            order = np.arange(len(train_samples))
            _epoch_rng(train_cfg.seed, epoch).shuffle(order)

            total_loss = 0.0
            for start in range(0, len(order), train_cfg.batch_size):
                batch_ids = order[start:start + train_cfg.batch_size]
                batch = []
                for i in batch_ids:
                    sample = train_samples[i]
                    if augment_policy is not None:
                        rng = sample_rng(train_cfg.seed, sample.patient_id,
                                         sample.slice_index, epoch)
                        sample, outcome = augment_sample(sample, augment_policy, rng)
                        if outcome.fired_any:
                            record.train_augmentations_fired += 1
                    batch.append(sample)
                inputs, targets = _to_batch(batch, device)
                optimizer.zero_grad()
                loss = dice_loss(model(inputs), targets, loss_cfg)
                if not torch.isfinite(loss):
                    raise DivergenceError(f"non-finite training loss at epoch {epoch}")
                loss.backward()
                optimizer.step()
                total_loss += float(loss.detach()) * len(batch)
            train_loss = total_loss / len(train_samples)

            model.eval()
            val_total = 0.0
            with torch.no_grad():
                for start in range(0, len(val_samples), train_cfg.batch_size):
                    batch = val_samples[start:start + train_cfg.batch_size]
                    inputs, targets = _to_batch(batch, device)
                    loss = dice_loss(model(inputs), targets, loss_cfg)
                    val_total += float(loss) * len(batch)
            val_loss = val_total / len(val_samples)
            if not np.isfinite(val_loss):
                raise DivergenceError(f"non-finite validation loss at epoch {epoch}")

            seconds = time.perf_counter() - started
            record.train_loss.append(train_loss)
            record.val_loss.append(val_loss)
            record.epoch_seconds.append(seconds)
            writer.writerow([epoch, f"{train_loss:.8f}", f"{val_loss:.8f}", f"{seconds:.3f}"])

            save_checkpoint(model, out_dir / "last.ckpt", epoch, val_loss, train_cfg.seed)
            if train_cfg.keep_all_checkpoints:
                save_checkpoint(model, out_dir / f"epoch_{epoch:04d}.ckpt",
                                epoch, val_loss, train_cfg.seed)
            if val_loss < record.best_val_loss:
                record.best_val_loss = val_loss
                record.best_epoch = epoch
                save_checkpoint(model, best_path, epoch, val_loss, train_cfg.seed)

    record.checkpoint_path = str(best_path)
    record.to_json(out_dir / "train_record.json")
    return record


def cross_validate(
    samples: list[TrainSample],
    fold_split: FoldSplit,
    model_cfg: SegModelConfig,
    train_cfg: TrainConfig,
    augment_policy: AugmentPolicy | None = None,
    out_dir: str | Path = "cv_out",
    loss_cfg: DiceLossConfig | None = None,
) -> tuple[list[TrainRunRecord], dict]:
    """Train every fold (validation = the fold's patients, training = the rest)
    and aggregate by unweighted mean across folds."""
    if fold_split.fold_count < 2:
        raise ValueError(f"cross-validation needs >= 2 folds, got {fold_split.fold_count}")
    unknown = {s.patient_id for s in samples} - set(fold_split.assignments)
    if unknown:
        raise ValueError(f"samples for patients without a fold assignment: {sorted(unknown)}")

    out_dir = Path(out_dir)
    records: list[TrainRunRecord] = []
    for fold in range(fold_split.fold_count):
        val_patients = set(fold_split.patients_in_fold(fold))
        train_set = [s for s in samples if s.patient_id not in val_patients]
        val_set = [s for s in samples if s.patient_id in val_patients]
        if not val_set:
            raise ValueError(f"fold {fold} has no validation samples")
        record = train_fold(
            train_set, val_set, model_cfg, train_cfg, augment_policy,
            out_dir=out_dir / f"fold_{fold}", fold_index=fold, loss_cfg=loss_cfg,
        )
        records.append(record)

    aggregate = {
        "fold_count": fold_split.fold_count,
        "best_val_loss_per_fold": [r.best_val_loss for r in records],
        "mean_best_val_loss": float(np.mean([r.best_val_loss for r in records])),
        "best_epoch_per_fold": [r.best_epoch for r in records],
    }
    (out_dir / "cv_summary.json").write_text(
        json.dumps(aggregate, indent=2) + "\n", encoding="utf-8"
    )
    return records, aggregate
