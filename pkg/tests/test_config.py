import json

import pytest

from eatseg.config import (
    EFFECTIVE_CONFIG_NAME,
    RunConfig,
    archive_effective_config,
    load_run_config,
    parse_override,
    run_config_from_dict,
    set_path,
)
from eatseg.errors import ConfigError


class TestDefaults:
    def test_empty_dict_gives_paper_defaults(self):
        cfg = run_config_from_dict({})
        assert cfg.preprocess.target_size == 128
        assert cfg.preprocess.adipose_hu_low == -200.0
        assert cfg.preprocess.adipose_hu_high == -30.0
        assert cfg.train.epochs == 200
        assert cfg.train.batch_size == 8
        assert cfg.train.learning_rate == 0.001
        assert cfg.train.fold_count == 2
        assert cfg.loss.smoothing_lambda == 1.0
        assert cfg.augment.p_hflip == 0.5
        assert cfg.augment.p_affine == 0.3
        assert cfg.augment.p_mesh_deform == 0.2
        assert cfg.model.in_channels == 2
        assert cfg.seed == 42


class TestRoundTrip:
    def test_json_roundtrip(self, tmp_path):
        cfg = run_config_from_dict({"train": {"epochs": 7, "seed": 123},
                                    "preprocess": {"target_size": 64},
                                    "model": {"input_size": 64}})
        path = tmp_path / "run.json"
        cfg.to_json(path)
        loaded = load_run_config(path)
        assert loaded == cfg

    def test_archive_writes_effective_copy(self, tmp_path):
        cfg = run_config_from_dict({})
        path = archive_effective_config(cfg, tmp_path / "out")
        assert path.name == EFFECTIVE_CONFIG_NAME
        data = json.loads(path.read_text())
        assert set(data) == {"preprocess", "augment", "model", "train",
                             "loss", "quantify", "evaluate", "paths"}


class TestValidation:
    def test_unknown_section(self):
        with pytest.raises(ConfigError, match="unknown section"):
            run_config_from_dict({"trainer": {}})

    def test_unknown_key_names_path(self):
        with pytest.raises(ConfigError, match=r"\$\.train.*epoch_count"):
            run_config_from_dict({"train": {"epoch_count": 5}})

    def test_section_error_names_section(self):
        with pytest.raises(ConfigError, match=r"\$\.train"):
            run_config_from_dict({"train": {"learning_rate": -1}})

    def test_size_mismatch_between_model_and_preprocess(self):
        with pytest.raises(ConfigError, match="input_size"):
            run_config_from_dict({"preprocess": {"target_size": 64}})

    def test_non_object_section(self):
        with pytest.raises(ConfigError, match="expected an object"):
            run_config_from_dict({"train": [1, 2]})

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_run_config(tmp_path / "absent.json")

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{nope")
        with pytest.raises(ConfigError, match="not valid JSON"):
            load_run_config(path)


class TestOverrides:
    def test_parse_override_json_values(self):
        assert parse_override("train.epochs=5") == ("train.epochs", 5)
        assert parse_override("train.device=cpu") == ("train.device", "cpu")
        assert parse_override("quantify.pixel_area_mm2=1.5") == \
            ("quantify.pixel_area_mm2", 1.5)
        assert parse_override("evaluate.emit_plots=false") == \
            ("evaluate.emit_plots", False)

    def test_parse_override_requires_equals(self):
        with pytest.raises(ConfigError, match="section.key=value"):
            parse_override("train.epochs")

    def test_set_path(self):
        data = {}
        set_path(data, "train.epochs", 9)
        set_path(data, "train.seed", 1)
        assert data == {"train": {"epochs": 9, "seed": 1}}

    def test_set_path_rejects_bad_section(self):
        with pytest.raises(ConfigError, match="unknown section"):
            set_path({}, "nosuch.key", 1)

    def test_set_path_rejects_depth(self):
        with pytest.raises(ConfigError, match="section.key"):
            set_path({}, "train", 1)

    def test_override_flows_into_config(self):
        data = {"train": {"epochs": 3}}
        dotted, value = parse_override("train.epochs=11")
        set_path(data, dotted, value)
        cfg = run_config_from_dict(data)
        assert cfg.train.epochs == 11
