import csv

import numpy as np
import pytest
import torch

import eatseg.training
from eatseg.augment import AugmentPolicy
from eatseg.data import FoldSplit
from eatseg.errors import DataLeakError, DivergenceError
from eatseg.model import SegModelConfig
from eatseg.preprocess import TrainSample
from eatseg.training import (
    DiceLossConfig,
    TrainConfig,
    TrainRunRecord,
    cross_validate,
    dice_loss,
    train_fold,
)

TINY_MODEL = SegModelConfig(depth=2, base_width=4, input_size=16,
                            target_param_count=7000, param_tolerance=1.0)


def _dice_oracle(pred, target, lam=1.0):
    """Plain-python pixel-sum Dice loss for one 2-D sample."""
    inter = p_sum = t_sum = 0.0
    rows = len(pred)
    for r in range(rows):
        for c in range(len(pred[r])):
            inter += pred[r][c] * target[r][c]
            p_sum += pred[r][c]
            t_sum += target[r][c]
    return 1.0 - (2.0 * inter + lam) / (p_sum + t_sum + lam)


class TestDiceLoss:
    def test_matches_oracle_float64(self, rng):
        for _ in range(20):
            pred = rng.uniform(size=(8, 8))
            target = (rng.uniform(size=(8, 8)) < 0.5).astype(np.float64)
            ours = dice_loss(torch.from_numpy(pred), torch.from_numpy(target))
            expected = _dice_oracle(pred.tolist(), target.tolist())
            assert abs(float(ours) - expected) < 1e-9

    def test_batch_is_mean_of_per_sample(self, rng):
        preds = rng.uniform(size=(3, 6, 6))
        targets = (rng.uniform(size=(3, 6, 6)) < 0.5).astype(np.float64)
        batch = dice_loss(torch.from_numpy(preds), torch.from_numpy(targets))
        singles = [float(dice_loss(torch.from_numpy(preds[i]),
                                   torch.from_numpy(targets[i]))) for i in range(3)]
        assert float(batch) == pytest.approx(np.mean(singles), abs=1e-12)

    def test_perfect_and_empty_cases(self):
        ones = torch.ones(4, 4, dtype=torch.float64)
        zeros = torch.zeros(4, 4, dtype=torch.float64)
        # perfect overlap of n pixels: 1 - (2n+1)/(2n+1) = 0
        assert float(dice_loss(ones, ones)) == pytest.approx(0.0, abs=1e-12)
        # both empty: the lambda smoothing makes the loss 0, not undefined
        assert float(dice_loss(zeros, zeros)) == pytest.approx(0.0, abs=1e-12)
        # full false positive: 1 - 1/(16+1)
        assert float(dice_loss(ones, zeros)) == pytest.approx(1 - 1 / 17, abs=1e-12)

    def test_lambda_must_be_positive(self):
        with pytest.raises(ValueError):
            DiceLossConfig(smoothing_lambda=0.0)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="mismatch"):
            dice_loss(torch.zeros(2, 2), torch.zeros(3, 3))

    def test_gradient_matches_finite_differences(self, rng):
        pred = torch.tensor(rng.uniform(0.05, 0.95, size=(5, 5)),
                            dtype=torch.float64, requires_grad=True)
        target = torch.tensor((rng.uniform(size=(5, 5)) < 0.5).astype(np.float64))
        dice_loss(pred, target).backward()
        grad = pred.grad.numpy()
        h = 1e-6
        flat = pred.detach().numpy().copy()
        for idx in [(0, 0), (2, 3), (4, 4), (1, 2)]:
            bumped_up, bumped_dn = flat.copy(), flat.copy()
            bumped_up[idx] += h
            bumped_dn[idx] -= h
            fd = (float(dice_loss(torch.from_numpy(bumped_up), target))
                  - float(dice_loss(torch.from_numpy(bumped_dn), target))) / (2 * h)
            assert abs(fd - grad[idx]) <= 1e-4 * max(1.0, abs(fd))


def _samples(patients, slices_each=3, size=16, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for pid in patients:
        for idx in range(slices_each):
            ct = rng.uniform(-0.1, 0.9, size=(size, size)).astype(np.float32)
            depth = idx / max(slices_each - 1, 1)
            target = np.zeros((size, size), dtype=np.uint8)
            target[4:12, 4:12] = 1
            out.append(TrainSample(
                input=np.stack([ct, np.full((size, size), depth, dtype=np.float32)]),
                target=target, patient_id=pid, slice_index=idx,
                normalized_depth=depth))
    return out


FAST = TrainConfig(epochs=2, batch_size=4, seed=13, device="cpu")


class TestTrainFold:
    def test_artifacts_written(self, tmp_path):
        record = train_fold(_samples(["a", "b"]), _samples(["c"]),
                            TINY_MODEL, FAST, out_dir=tmp_path)
        assert (tmp_path / "last.ckpt").exists()
        assert (tmp_path / "best.ckpt").exists()
        assert (tmp_path / "train_record.json").exists()
        with open(tmp_path / "epochs.csv", newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["epoch", "train_loss", "val_loss", "seconds"]
        assert len(rows) == 1 + FAST.epochs
        assert record.epochs_run == FAST.epochs
        assert record.checkpoint_path.endswith("best.ckpt")

    def test_patient_overlap_rejected(self, tmp_path):
        with pytest.raises(DataLeakError, match="a"):
            train_fold(_samples(["a", "b"]), _samples(["a"]),
                       TINY_MODEL, FAST, out_dir=tmp_path)

    def test_empty_sets_rejected(self, tmp_path):
        with pytest.raises(ValueError, match="non-empty"):
            train_fold([], _samples(["c"]), TINY_MODEL, FAST, out_dir=tmp_path)

    def test_deterministic_rerun(self, tmp_path):
        args = (_samples(["a", "b"]), _samples(["c"]), TINY_MODEL, FAST)
        rec1 = train_fold(*args, augment_policy=AugmentPolicy(), out_dir=tmp_path / "r1")
        rec2 = train_fold(*args, augment_policy=AugmentPolicy(), out_dir=tmp_path / "r2")
        assert rec1.train_loss == rec2.train_loss
        assert rec1.val_loss == rec2.val_loss
        assert rec1.train_augmentations_fired == rec2.train_augmentations_fired

    def test_divergence_error_names_epoch(self, tmp_path, monkeypatch):
        def nan_loss(pred, target, cfg=None):
            return pred.sum() * float("nan")
        monkeypatch.setattr(eatseg.training, "dice_loss", nan_loss)
        with pytest.raises(DivergenceError, match="epoch 0"):
            train_fold(_samples(["a"]), _samples(["c"]),
                       TINY_MODEL, FAST, out_dir=tmp_path)

    def test_keep_all_checkpoints(self, tmp_path):
        cfg = TrainConfig(epochs=2, batch_size=4, seed=13, device="cpu",
                          keep_all_checkpoints=True)
        train_fold(_samples(["a"]), _samples(["c"]), TINY_MODEL, cfg, out_dir=tmp_path)
        assert (tmp_path / "epoch_0000.ckpt").exists()
        assert (tmp_path / "epoch_0001.ckpt").exists()

    def test_best_checkpoint_tracks_val_minimum(self, tmp_path):
        cfg = TrainConfig(epochs=4, batch_size=4, seed=13, device="cpu")
        record = train_fold(_samples(["a", "b"]), _samples(["c"]),
                            TINY_MODEL, cfg, out_dir=tmp_path)
        assert record.best_val_loss == min(record.val_loss)
        assert record.best_epoch == record.val_loss.index(min(record.val_loss))

    def test_record_json_roundtrip(self, tmp_path):
        record = train_fold(_samples(["a"]), _samples(["c"]),
                            TINY_MODEL, FAST, out_dir=tmp_path)
        loaded = TrainRunRecord.from_json(tmp_path / "train_record.json")
        assert loaded.fold_index == record.fold_index
        assert loaded.val_loss == record.val_loss
        assert loaded.best_epoch == record.best_epoch


class TestCrossValidate:
    def test_two_folds(self, tmp_path):
        samples = _samples(["a", "b", "c", "d"], slices_each=2)
        split = FoldSplit(fold_count=2,
                          assignments={"a": 0, "b": 0, "c": 1, "d": 1})
        records, aggregate = cross_validate(samples, split, TINY_MODEL, FAST,
                                            out_dir=tmp_path)
        assert len(records) == 2
        assert aggregate["fold_count"] == 2
        assert aggregate["mean_best_val_loss"] == pytest.approx(
            np.mean([r.best_val_loss for r in records]))
        assert (tmp_path / "fold_0" / "best.ckpt").exists()
        assert (tmp_path / "fold_1" / "best.ckpt").exists()
        assert (tmp_path / "cv_summary.json").exists()

    def test_validation_is_fold_patients(self, tmp_path):
        samples = _samples(["a", "b"], slices_each=2)
        split = FoldSplit(fold_count=2, assignments={"a": 0, "b": 1})
        records, _ = cross_validate(samples, split, TINY_MODEL, FAST, out_dir=tmp_path)
        assert [r.fold_index for r in records] == [0, 1]

    def test_unassigned_patient_rejected(self, tmp_path):
        samples = _samples(["a", "b", "x"], slices_each=1)
        split = FoldSplit(fold_count=2, assignments={"a": 0, "b": 1})
        with pytest.raises(ValueError, match="x"):
            cross_validate(samples, split, TINY_MODEL, FAST, out_dir=tmp_path)

    def test_single_fold_rejected(self, tmp_path):
        samples = _samples(["a"], slices_each=1)
        split = FoldSplit(fold_count=1, assignments={"a": 0})
        with pytest.raises(ValueError, match="folds"):
            cross_validate(samples, split, TINY_MODEL, FAST, out_dir=tmp_path)
