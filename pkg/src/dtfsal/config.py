"""Configuration: model/data/training dataclasses and the flat config file.

Config files are plain text, one dotted key per line::

    model.base_channels = 16
    train.lr = 3e-3
    data.num_samples = 200
    seed = 7

Values are parsed as JSON (numbers, strings, booleans, lists). Unknown keys
and type mismatches are schema errors carrying the offending field path.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any, Optional

import numpy as np


class ConfigError(ValueError):
    """Invalid or missing configuration; message names the field path."""


@dataclass
class ModelConfig:
    precision: str = "f64"
    base_channels: int = 96
    blocks_per_stage: tuple = (1, 1, 2, 1)
    refined_channels: int = 192
    symmetric_level1: bool = False
    block_placement: str = "default"
    n_tokens: int = 8
    token_hw: tuple = (7, 7)
    shift_displacements: tuple = (-1, 0, 1)
    shift_boundary: str = "cyclic"
    fusion: str = "amfb"  # amfb | concat | cross_attention | none
    fusion_levels: tuple = (1, 2, 3, 4)
    offset_clip: float = 0.0
    decoder: str = "multi"  # multi | one | unet
    decoder_width: int = 64
    audio_sample_rate: int = 16000
    audio_n_fft: int = 512
    audio_hop: int = 256
    audio_n_mels: int = 112
    audio_segment_frames: int = 192
    audio_overlap_ms: float = 11.0
    audio_channels: tuple = (16, 32, 64, 128)
    audio_dim: int = 128

    @property
    def np_dtype(self):
        return {"f64": np.float64, "f32": np.float32}[self.precision]

    @staticmethod
    def desk() -> "ModelConfig":
        """Laptop-scale widths for training runs on synthetic clips."""
        return ModelConfig(
            base_channels=16,
            blocks_per_stage=(1, 1, 1, 1),
            refined_channels=24,
            n_tokens=4,
            token_hw=(5, 5),
            decoder_width=16,
            audio_sample_rate=4000,
            audio_n_fft=128,
            audio_hop=64,
            audio_n_mels=16,
            audio_segment_frames=8,
            audio_channels=(8, 16, 32),
            audio_dim=32,
        )

    @staticmethod
    def micro() -> "ModelConfig":
        """Tiny widths for exhaustive finite-difference checks."""
        return ModelConfig(
            base_channels=4,
            blocks_per_stage=(1, 1, 1, 1),
            refined_channels=6,
            n_tokens=2,
            token_hw=(2, 2),
            decoder_width=4,
            audio_sample_rate=1000,
            audio_n_fft=64,
            audio_hop=32,
            audio_n_mels=6,
            audio_segment_frames=4,
            audio_channels=(4, 8),
            audio_dim=6,
        )


@dataclass
class DataConfig:
    num_samples: int = 200
    frames: int = 16
    height: int = 32
    width: int = 32
    fps: float = 8.0
    audio_sample_rate: int = 4000
    blob_sigma: float = 2.5
    gt_sigma: float = 2.5
    n_fixations: int = 15
    audio_decides_fraction: float = 0.3
    seed: int = 0


@dataclass
class TrainConfig:
    lr: float = 1e-4
    lr_decay: float = 0.1
    lr_step_epochs: int = 3
    epochs: int = 10
    patience: int = 3
    batch_size: int = 1
    lam_kl: float = 1.0
    lam_cc: float = -1.0
    kl_eps: float = 1e-7
    kl_textbook: bool = False
    val_fraction: float = 0.2
    phase: str = "full"  # full | visual
    freeze: str = "none"  # none | visual
    init_from: Optional[str] = None
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError("train.lr must be positive")
        if self.patience > self.epochs:
            raise ConfigError("train.patience must not exceed train.epochs")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0

    def flat(self) -> dict[str, Any]:
        out = {"seed": self.seed}
        for section in ("model", "data", "train"):
            for key, value in asdict(getattr(self, section)).items():
                if isinstance(value, tuple):
                    value = list(value)
                out[f"{section}.{key}"] = value
        return out


_TUPLE_FIELDS = {
    "model.blocks_per_stage",
    "model.token_hw",
    "model.shift_displacements",
    "model.fusion_levels",
    "model.audio_channels",
}

_CHOICE_FIELDS = {
    "model.precision": ("f64", "f32"),
    "model.fusion": ("amfb", "concat", "cross_attention", "none"),
    "model.decoder": ("multi", "one", "unet"),
    "model.shift_boundary": ("cyclic", "zero"),
    "train.phase": ("full", "visual"),
    "train.freeze": ("none", "visual"),
}


def _schema() -> dict[str, type]:
    schema: dict[str, type] = {"seed": int}
    for section, cls in (("model", ModelConfig), ("data", DataConfig), ("train", TrainConfig)):
        for f in fields(cls):
            schema[f"{section}.{f.name}"] = f.type
    return schema


def parse_flat_text(text: str) -> dict[str, Any]:
    """Parse ``key = value`` lines into a flat dict; '#' starts a comment."""
    out: dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got '{raw.strip()}'")
        key, value = line.split("=", 1)
        key = key.strip()
        value = value.strip()
        try:
            out[key] = json.loads(value)
        except json.JSONDecodeError:
            out[key] = value.strip("\"'")
    return out


def run_config_from_flat(flat: dict[str, Any]) -> RunConfig:
    """Validate a flat mapping against the schema and build a RunConfig."""
    schema = _schema()
    sections: dict[str, dict[str, Any]] = {"model": {}, "data": {}, "train": {}}
    seed = 0
    for key, value in flat.items():
        if key not in schema:
            raise ConfigError(f"unknown config field '{key}'")
        if key in _CHOICE_FIELDS and value not in _CHOICE_FIELDS[key]:
            raise ConfigError(f"field '{key}' must be one of {_CHOICE_FIELDS[key]}, got {value!r}")
        if key in _TUPLE_FIELDS:
            if not isinstance(value, list) or not all(isinstance(v, int) for v in value):
                raise ConfigError(f"field '{key}' must be a list of integers, got {value!r}")
            value = tuple(value)
        if key == "seed":
            if not isinstance(value, int):
                raise ConfigError("field 'seed' must be an integer")
            seed = value
            continue
        section, name = key.split(".", 1)
        expected_numeric = isinstance(getattr_default(section, name), (int, float)) and not isinstance(
            getattr_default(section, name), bool
        )
        if expected_numeric and isinstance(value, bool):
            raise ConfigError(f"field '{key}' must be numeric, got a boolean")
        sections[section][name] = value
    try:
        model = ModelConfig(**sections["model"])
        data = DataConfig(**sections["data"])
        train = TrainConfig(**sections["train"])
    except TypeError as e:
        raise ConfigError(str(e)) from None
    _type_check(model, "model")
    _type_check(data, "data")
    _type_check(train, "train")
    return RunConfig(model=model, data=data, train=train, seed=seed)


def getattr_default(section: str, name: str):
    cls = {"model": ModelConfig, "data": DataConfig, "train": TrainConfig}[section]
    for f in fields(cls):
        if f.name == name:
            return f.default if f.default is not None else 0
    raise ConfigError(f"unknown config field '{section}.{name}'")


def _type_check(obj, section: str) -> None:
    defaults = type(obj)()
    for f in fields(obj):
        value = getattr(obj, f.name)
        ref = getattr(defaults, f.name)
        if ref is None or value is None:
            continue
        if isinstance(ref, bool) != isinstance(value, bool):
            raise ConfigError(f"field '{section}.{f.name}' has wrong type {type(value).__name__}")
        if isinstance(ref, (int, float)) and not isinstance(value, (int, float)):
            raise ConfigError(f"field '{section}.{f.name}' has wrong type {type(value).__name__}")
        if isinstance(ref, str) and not isinstance(value, str):
            raise ConfigError(f"field '{section}.{f.name}' has wrong type {type(value).__name__}")
        if isinstance(ref, tuple) and not isinstance(value, tuple):
            raise ConfigError(f"field '{section}.{f.name}' has wrong type {type(value).__name__}")


def load_run_config(path: str) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as e:
        raise ConfigError(f"cannot read config file: {e}") from None
    return run_config_from_flat(parse_flat_text(text))


def dump_run_config(config: RunConfig) -> str:
    return "\n".join(f"{k} = {json.dumps(v)}" for k, v in sorted(config.flat().items())) + "\n"


PRESETS = {
    "paper": lambda: RunConfig(),
    "desk": lambda: RunConfig(model=ModelConfig.desk()),
    "micro": lambda: RunConfig(model=ModelConfig.micro()),
}
