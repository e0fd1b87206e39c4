import json

import numpy as np
import pytest

from eatseg.cli import (
    EXIT_OK,
    EXIT_RUNTIME,
    EXIT_USAGE,
    EXIT_VALIDATION,
    main,
)

TINY_RUN = {
    "preprocess": {"target_size": 32, "drop_empty_label_slices": False},
    "model": {"input_size": 32, "depth": 2, "base_width": 4,
              "target_param_count": 8000, "param_tolerance": 1.0},
    "train": {"epochs": 2, "batch_size": 4, "fold_count": 2, "seed": 5,
              "device": "cpu"},
}


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """One tiny phantom run shared by the CLI tests: phantom -> train ->
    predict; later stages reuse its outputs."""
    root = tmp_path_factory.mktemp("cli_run")
    ds = root / "ds"
    assert main(["phantom", "--patients", "4", "--slices", "4", "--size", "32",
                 "--seed", "5", "--out", str(ds)]) == EXIT_OK
    config_path = root / "run.json"
    run = dict(TINY_RUN)
    run["paths"] = {"manifest": str(ds / "manifest.json"), "out_root": str(root / "o")}
    config_path.write_text(json.dumps(run))
    assert main(["train", "--config", str(config_path), "--fold", "0",
                 "--out", str(root / "train")]) == EXIT_OK
    assert main(["predict", "--config", str(config_path),
                 "--checkpoint", str(root / "train" / "fold_0" / "best.ckpt"),
                 "--out", str(root / "pred")]) == EXIT_OK
    return root, config_path, ds


class TestPhantom:
    def test_entry_count_example(self, tmp_path):
        out = tmp_path / "ds"
        assert main(["phantom", "--patients", "4", "--slices", "12",
                     "--out", str(out)]) == EXIT_OK
        manifest = json.loads((out / "manifest.json").read_text())
        assert len(manifest["entries"]) == 48

    def test_invalid_geometry_is_validation_error(self, tmp_path, capsys):
        code = main(["phantom", "--eat-fraction", "1.5", "--out", str(tmp_path / "x")])
        assert code == EXIT_VALIDATION
        assert "eat_fraction" in capsys.readouterr().err


class TestUsageErrors:
    def test_unknown_flag(self, capsys):
        assert main(["phantom", "--bogus"]) == EXIT_USAGE
        capsys.readouterr()

    def test_unknown_subcommand(self, capsys):
        assert main(["transmogrify"]) == EXIT_USAGE
        capsys.readouterr()

    def test_missing_required_flag(self, capsys):
        assert main(["predict"]) == EXIT_USAGE
        capsys.readouterr()


class TestPreprocess:
    def test_writes_samples_and_report(self, pipeline, tmp_path):
        _, config_path, _ = pipeline
        out = tmp_path / "pre"
        assert main(["preprocess", "--config", str(config_path),
                     "--out", str(out)]) == EXIT_OK
        assert (out / "samples.npz").exists()
        assert (out / "effective_config.json").exists()
        report = json.loads((out / "removal_report.json").read_text())
        assert "removed_count" in report

    def test_missing_manifest_is_validation_error(self, tmp_path, capsys):
        config = tmp_path / "run.json"
        config.write_text(json.dumps(TINY_RUN))
        code = main(["preprocess", "--config", str(config), "--out", str(tmp_path / "o")])
        assert code == EXIT_VALIDATION
        assert "manifest" in capsys.readouterr().err

    def test_bad_config_is_validation_error(self, tmp_path, capsys):
        config = tmp_path / "run.json"
        config.write_text(json.dumps({"train": {"epoch_count": 2}}))
        code = main(["preprocess", "--config", str(config), "--out", str(tmp_path / "o")])
        assert code == EXIT_VALIDATION
        assert "epoch_count" in capsys.readouterr().err


class TestTrain:
    def test_artifacts(self, pipeline):
        root, _, _ = pipeline
        fold_dir = root / "train" / "fold_0"
        assert (fold_dir / "best.ckpt").exists()
        assert (fold_dir / "epochs.csv").exists()
        assert (fold_dir / "train_record.json").exists()
        assert (root / "train" / "fold_split.json").exists()
        assert (root / "train" / "effective_config.json").exists()

    def test_set_override_applies(self, pipeline, tmp_path):
        _, config_path, _ = pipeline
        out = tmp_path / "t"
        assert main(["train", "--config", str(config_path), "--fold", "0",
                     "--set", "train.epochs=1", "--out", str(out)]) == EXIT_OK
        record = json.loads((out / "fold_0" / "train_record.json").read_text())
        assert len(record["val_loss"]) == 1
        effective = json.loads((out / "effective_config.json").read_text())
        assert effective["train"]["epochs"] == 1


class TestPredict:
    def test_outputs(self, pipeline):
        root, _, _ = pipeline
        index = json.loads((root / "pred" / "predictions.json").read_text())
        assert index["target_size"] == 32
        assert len(index["entries"]) == 16
        first = index["entries"][0]
        assert (root / "pred" / first["pericardium_pred"]).exists()
        assert (root / "pred" / first["eat_pred"]).exists()

    def test_corrupt_checkpoint_is_runtime_error(self, pipeline, tmp_path, capsys):
        _, config_path, _ = pipeline
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"garbage-garbage")
        code = main(["predict", "--config", str(config_path),
                     "--checkpoint", str(bad), "--out", str(tmp_path / "o")])
        assert code == EXIT_RUNTIME
        assert "magic" in capsys.readouterr().err


class TestQuantifyEvaluate:
    def test_quantify_outputs(self, pipeline, tmp_path):
        root, config_path, ds = pipeline
        out = tmp_path / "q"
        assert main(["quantify", "--config", str(config_path),
                     "--pred", str(root / "pred"),
                     "--truth", str(ds / "manifest.json"),
                     "--fit-bias", "--out", str(out)]) == EXIT_OK
        data = json.loads((out / "quantification.json").read_text())
        assert data["slices"] == 16
        assert data["bias_correction"] is not None
        assert (out / "quantification.csv").exists()

    def test_evaluate_outputs(self, pipeline, tmp_path):
        root, config_path, ds = pipeline
        out = tmp_path / "e"
        assert main(["evaluate", "--config", str(config_path),
                     "--pred", str(root / "pred"),
                     "--truth", str(ds / "manifest.json"),
                     "--out", str(out)]) == EXIT_OK
        report = json.loads((out / "eval_report.json").read_text())
        assert set(report["cross_fold_metrics"]) == {"eat", "pericardium"}
        assert (out / "slice_metrics.csv").exists()
        assert (out / "bland_altman.png").exists()
        assert (out / "count_scatter.png").exists()

    def test_no_plots_flag(self, pipeline, tmp_path):
        root, config_path, ds = pipeline
        out = tmp_path / "e2"
        assert main(["evaluate", "--config", str(config_path),
                     "--pred", str(root / "pred"),
                     "--truth", str(ds / "manifest.json"),
                     "--no-plots", "--out", str(out)]) == EXIT_OK
        assert not (out / "bland_altman.png").exists()

    def test_missing_pred_dir_is_validation_error(self, pipeline, tmp_path, capsys):
        _, config_path, ds = pipeline
        code = main(["evaluate", "--config", str(config_path),
                     "--pred", str(tmp_path / "nope"),
                     "--truth", str(ds / "manifest.json"),
                     "--out", str(tmp_path / "o")])
        assert code == EXIT_VALIDATION
        capsys.readouterr()


class TestReport:
    def test_combines_artifacts(self, pipeline, tmp_path):
        root, config_path, ds = pipeline
        assert main(["quantify", "--config", str(config_path),
                     "--pred", str(root / "pred"),
                     "--truth", str(ds / "manifest.json"),
                     "--out", str(root / "quant")]) == EXIT_OK
        assert main(["evaluate", "--config", str(config_path),
                     "--pred", str(root / "pred"),
                     "--truth", str(ds / "manifest.json"),
                     "--no-plots", "--out", str(root / "eval")]) == EXIT_OK
        out = tmp_path / "r"
        assert main(["report", "--run", str(root), "--out", str(out)]) == EXIT_OK
        combined = json.loads((out / "report.json").read_text())
        assert combined["train_records"]
        assert "eval_report" in combined
        assert "quantification" in combined
        assert (out / "report.md").read_text().startswith("# Run report")

    def test_empty_run_dir_rejected(self, tmp_path, capsys):
        empty = tmp_path / "empty"
        empty.mkdir()
        assert main(["report", "--run", str(empty)]) == EXIT_VALIDATION
        capsys.readouterr()


class TestOutRootEnv:
    def test_env_var_used_when_no_out_flag(self, pipeline, tmp_path, monkeypatch):
        _, config_path, _ = pipeline
        monkeypatch.setenv("EATSEG_OUT_ROOT", str(tmp_path / "envroot"))
        assert main(["preprocess", "--config", str(config_path)]) == EXIT_OK
        assert (tmp_path / "envroot" / "preprocess" / "samples.npz").exists()
