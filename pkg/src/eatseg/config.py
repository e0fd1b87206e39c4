"""Composite run configuration: one JSON document that fully determines a run.

The file has one section per pipeline stage (preprocess, augment, model,
train, loss, quantify, evaluate, paths). Unknown sections or keys are
rejected with the offending JSON path so typos cannot silently fall back to
defaults. Every executed run archives its effective configuration verbatim
next to its outputs.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .augment import AugmentPolicy
from .errors import ConfigError
from .model import SegModelConfig
from .preprocess import PreprocessConfig
from .training import DiceLossConfig, TrainConfig

EFFECTIVE_CONFIG_NAME = "effective_config.json"


@dataclass
class QuantifyOptions:
    prediction_threshold: float = 0.5
    pixel_area_mm2: float | None = None
    slice_thickness_mm: float | None = None
    clamp_at_zero: bool = True

    def __post_init__(self):
        if not 0.0 <= self.prediction_threshold <= 1.0:
            raise ValueError(
                f"prediction_threshold must be in [0, 1], got {self.prediction_threshold}"
            )


@dataclass
class EvaluateOptions:
    per_patient: bool = False
    emit_plots: bool = True


@dataclass
class PathsConfig:
    manifest: str = ""
    out_root: str = "runs"


@dataclass
class RunConfig:
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)
    model: SegModelConfig = field(default_factory=SegModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: DiceLossConfig = field(default_factory=DiceLossConfig)
    quantify: QuantifyOptions = field(default_factory=QuantifyOptions)
    evaluate: EvaluateOptions = field(default_factory=EvaluateOptions)
    paths: PathsConfig = field(default_factory=PathsConfig)

    @property
    def seed(self) -> int:
        return self.train.seed

    def validate(self):
        self.model.validate()
        if self.model.input_size != self.preprocess.target_size:
            raise ConfigError(
                f"model.input_size ({self.model.input_size}) must equal "
                f"preprocess.target_size ({self.preprocess.target_size})"
            )

    def to_dict(self) -> dict:
        return {name: dataclasses.asdict(getattr(self, name)) for name in _SECTIONS}

    def to_json(self, path: str | Path):
        Path(path).write_text(
            json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )


_SECTIONS: dict[str, type] = {
    "preprocess": PreprocessConfig,
    "augment": AugmentPolicy,
    "model": SegModelConfig,
    "train": TrainConfig,
    "loss": DiceLossConfig,
    "quantify": QuantifyOptions,
    "evaluate": EvaluateOptions,
    "paths": PathsConfig,
}


def _build_section(name: str, cls: type, payload: dict):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(payload) - known
    if unknown:
        raise ConfigError(f"$.{name}: unknown key(s) {sorted(unknown)}")
    try:
        return cls(**payload)
    except (ValueError, ConfigError) as exc:
        raise ConfigError(f"$.{name}: {exc}") from exc


def run_config_from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError(f"run config root must be a JSON object, got {type(data).__name__}")
    unknown = set(data) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"$: unknown section(s) {sorted(unknown)}")
    kwargs = {}
    for name, cls in _SECTIONS.items():
        payload = data.get(name, {})
        if not isinstance(payload, dict):
            raise ConfigError(f"$.{name}: expected an object, got {type(payload).__name__}")
        kwargs[name] = _build_section(name, cls, payload)
    cfg = RunConfig(**kwargs)
    try:
        cfg.validate()
    except ConfigError:
        raise
    return cfg


def load_run_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
    return run_config_from_dict(data)


def set_path(data: dict, dotted: str, value):
    """Set a dotted path like train.epochs in a raw config dict, creating the
    section when absent. Values arrive pre-parsed."""
    parts = dotted.split(".")
    if len(parts) != 2:
        raise ConfigError(f"override path must be section.key, got {dotted!r}")
    section, key = parts
    if section not in _SECTIONS:
        raise ConfigError(f"$: unknown section(s) ['{section}']")
    data.setdefault(section, {})[key] = value


def parse_override(text: str) -> tuple[str, object]:
    """Parse a section.key=value override; the value is read as JSON when
    possible and kept as a string otherwise."""
    if "=" not in text:
        raise ConfigError(f"override must look like section.key=value, got {text!r}")
    dotted, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return dotted.strip(), value


def archive_effective_config(cfg: RunConfig, out_dir: str | Path) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / EFFECTIVE_CONFIG_NAME
    cfg.to_json(path)
    return path
