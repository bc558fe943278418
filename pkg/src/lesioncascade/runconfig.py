"""Run configuration files (JSON with sections) and their content digest."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

from .augment import AugmentConfig
from .blocks import BackboneSpec, backbone_preset
from .checkpoint import digest
from .clsmodel import ClsModelConfig
from .dataio import NormalizationPolicy
from .segmodel import DEFAULT_DECODER_WIDTHS, SegModelConfig
from .trainer import TrainConfig

SEED_ENV = "LESION_SEED"


class ConfigError(ValueError):
    pass


_TOP = {"task", "dataio", "augment", "model", "train", "paths", "dtype"}
_DATAIO = {"mode", "target_size", "train_fraction", "val_fraction"}
_MODEL_COMMON = {"backbone", "base_width", "max_width", "repeats", "norm"}
_MODEL_SEG = _MODEL_COMMON | {"skip_strides", "decoder_widths", "decoder_norm"}
_MODEL_CLS = _MODEL_COMMON | {"num_classes", "head_width", "dropout", "class_names"}
_PATHS = {"data_dir", "out_dir", "labels_csv"}


def _reject_unknown(section: dict, allowed: set, prefix: str):
    if not isinstance(section, dict):
        raise ConfigError(f"section {prefix or '<root>'} must be an object")
    for key in section:
        if key not in allowed:
            raise ConfigError(f"unknown config key '{prefix}{key}'")


@dataclass
class RunConfig:
    task: str
    policy: NormalizationPolicy
    train_fraction: float
    val_fraction: float
    augment: AugmentConfig | None
    model: SegModelConfig | ClsModelConfig
    train: TrainConfig
    paths: dict
    dtype: str = "float32"
    raw: dict = field(default_factory=dict)

    @property
    def digest(self) -> str:
        return digest(self.raw)


def resolve(raw: dict, seed: int | None = None, epochs: int | None = None) -> dict:
    """Apply overrides: explicit flags beat LESION_SEED, which beats the file."""
    raw = json.loads(json.dumps(raw))
    raw.setdefault("train", {})
    env_seed = os.environ.get(SEED_ENV)
    if env_seed is not None and seed is None:
        try:
            seed = int(env_seed)
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env_seed!r}") from None
    if seed is not None:
        raw["train"]["seed"] = seed
    if epochs is not None:
        raw["train"]["max_epochs"] = epochs
    return raw


def parse(raw: dict) -> RunConfig:
    _reject_unknown(raw, _TOP, "")
    task = raw.get("task")
    if task not in ("seg", "cls"):
        raise ConfigError("config 'task' must be 'seg' or 'cls'")
    dio = raw.get("dataio", {})
    _reject_unknown(dio, _DATAIO, "dataio.")
    default_size = (512, 512) if task == "seg" else (224, 224)
    try:
        policy = NormalizationPolicy(dio.get("mode", "unit_interval"), tuple(dio.get("target_size", default_size)))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    train_fraction = float(dio.get("train_fraction", 0.8))
    val_fraction = float(dio.get("val_fraction", 0.0))
    if not 0 <= val_fraction < 1:
        raise ConfigError("dataio.val_fraction must be in [0, 1)")

    aug_raw = raw.get("augment", {})
    augment = None
    if aug_raw is not None:
        _reject_unknown(aug_raw, {f.name for f in fields(AugmentConfig)}, "augment.")
        try:
            augment = AugmentConfig(**aug_raw)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    m = raw.get("model", {})
    _reject_unknown(m, _MODEL_SEG if task == "seg" else _MODEL_CLS, "model.")
    h, w = policy.target_size
    try:
        bb = m.get("backbone", "efficientnet" if task == "seg" else "mobilenet")
        if isinstance(bb, dict):
            backbone = BackboneSpec.from_dict(bb)
        else:
            backbone = backbone_preset(bb, 16 if task == "seg" else 32, base_width=m.get("base_width", 32),
                                       max_width=m.get("max_width", 256), repeats=m.get("repeats", 1),
                                       norm=m.get("norm", True))
        if task == "seg":
            model = SegModelConfig(backbone, tuple(m.get("skip_strides", (4, 8))),
                                   tuple(m.get("decoder_widths", DEFAULT_DECODER_WIDTHS)), (h, w, 3),
                                   m.get("decoder_norm", True))
        else:
            model = ClsModelConfig(backbone, m.get("num_classes", 7), (h, w, 3), m.get("head_width", 0),
                                   m.get("dropout", 0.0), tuple(m.get("class_names", ())))
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"invalid model section: {exc}") from None

    tr = raw.get("train", {})
    _reject_unknown(tr, {f.name for f in fields(TrainConfig)}, "train.")
    tr = {"max_epochs": 15 if task == "seg" else 30, **tr}
    try:
        train = TrainConfig(**tr)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None

    paths = raw.get("paths", {})
    _reject_unknown(paths, _PATHS, "paths.")
    dtype = raw.get("dtype", "float32")
    if dtype not in ("float32", "float64"):
        raise ConfigError("dtype must be float32 or float64")
    return RunConfig(task, policy, train_fraction, val_fraction, augment, model, train, paths, dtype, raw)


def load(path, seed: int | None = None, epochs: int | None = None) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return parse(resolve(raw, seed, epochs))
