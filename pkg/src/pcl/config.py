"""Experiment configuration: YAML files, schema checks and presets.

A config file is a key-value tree with ``schema_version`` and the sections
``data``, ``train``, ``eval`` and ``finetune``. Unknown keys are rejected with
the dotted path of the offending field.
"""
from __future__ import annotations

import copy
import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .contrastive import NCEConfig
from .errors import ConfigError
from .evaluation import EvalConfig, FinetuneConfig
from .models import EncoderConfig
from .training import TrainConfig
from .videodata import AugmentConfig, SyntheticSpec
from .videodata.synthetic import MotionParams

SCHEMA_VERSION = 1

_NESTED = {
    (TrainConfig, "encoder"): EncoderConfig,
    (TrainConfig, "nce"): NCEConfig,
    (TrainConfig, "augment"): AugmentConfig,
}


def _join(path, key):
    return f"{path}.{key}" if path else str(key)


def _coerce(value, default, path):
    """Check ``value`` against the type of the field's default."""
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected true/false, got {value!r}")
    elif isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
    elif isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        value = float(value)
    elif isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
    elif isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(path, f"expected a list, got {value!r}")
        value = tuple(value)
    return value


def build(cls, data, path=""):
    """Instantiate dataclass ``cls`` from a plain mapping, reporting field paths."""
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(path, f"expected a mapping, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        p = _join(path, key)
        if key not in fields:
            raise ConfigError(p, "unknown key")
        f = fields[key]
        sub = _NESTED.get((cls, key))
        if sub is not None:
            kwargs[key] = build(sub, value, p)
            continue
        if f.default is not dataclasses.MISSING:
            kwargs[key] = _coerce(value, f.default, p)
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except ConfigError as exc:
        raise ConfigError(_join(path, exc.path), str(exc).split(": ", 1)[-1]) from None
    except TypeError as exc:
        raise ConfigError(path, str(exc)) from None


def train_config_from_dict(d) -> TrainConfig:
    return build(TrainConfig, d, "train")


@dataclass
class DataConfig:
    path: str = ""
    synthetic: dict = field(default_factory=dict)
    seed: int = 0

    def synthetic_spec(self) -> SyntheticSpec:
        d = dict(self.synthetic)
        motion = d.pop("motion_params", None)
        spec_kwargs = {}
        for key, value in d.items():
            if key not in {f.name for f in dataclasses.fields(SyntheticSpec)}:
                raise ConfigError(f"data.synthetic.{key}", "unknown key")
            spec_kwargs[key] = tuple(value) if isinstance(value, list) else value
        if motion is not None:
            try:
                spec_kwargs["motion_params"] = [MotionParams(**m) for m in motion]
            except TypeError as exc:
                raise ConfigError("data.synthetic.motion_params", str(exc)) from None
        try:
            return SyntheticSpec(**spec_kwargs)
        except ConfigError as exc:
            raise ConfigError(f"data.synthetic.{exc.path}", str(exc).split(": ", 1)[-1]) from None
        except TypeError as exc:
            raise ConfigError("data.synthetic", str(exc)) from None


@dataclass
class Experiment:
    data: DataConfig
    train: TrainConfig
    eval: EvalConfig
    finetune: FinetuneConfig
    schema_version: int = SCHEMA_VERSION

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "data": {"path": self.data.path, "synthetic": copy.deepcopy(self.data.synthetic),
                     "seed": self.data.seed},
            "train": self.train.to_dict(),
            "eval": _plain(dataclasses.asdict(self.eval)),
            "finetune": _plain(dataclasses.asdict(self.finetune)),
        }

    def load_dataset(self):
        from .videodata import VideoDataset, generate_synthetic

        if self.data.path:
            return VideoDataset.load(self.data.path)
        return generate_synthetic(self.data.synthetic_spec(), self.data.seed)


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


# ------------------------------------------------------------------ presets

DESK = {
    "schema_version": 1,
    "data": {
        "synthetic": {"n_classes": 8, "videos_per_class": 40, "frames_per_video": 48,
                      "frame_size": [32, 32]},
        "seed": 0,
    },
    "train": {
        "task": "transform", "use_contrastive": True, "use_residual": True,
        "use_augment": True, "alpha": 0.1, "batch_size": 16, "epochs": 30, "lr": 0.01,
        "momentum": 0.9, "clip_len": 8, "seed": 0, "pretext_views": "shared",
        "encoder": {"family": "c3d_like", "width_multiplier": 0.25, "feature_dim": 128},
        "nce": {"temperature": 0.07, "n_negatives": 1024, "momentum": 0.5, "mode": "batch"},
        "augment": {"crop_size": [28, 28], "flip_prob": 0.0, "blur_sigma_range": [0.1, 0.5],
                    "jitter_strength": [0.2, 0.2, 0.2, 0.05]},
    },
    "eval": {"clips_per_video": 10},
    "finetune": {"epochs": 20, "lr": 0.001},
}

PAPER = {
    "schema_version": 1,
    "data": {"path": ""},
    "train": {
        "task": "transform", "use_contrastive": True, "use_residual": True,
        "use_augment": True, "alpha": 0.5, "batch_size": 16, "epochs": 200, "lr": 0.01,
        "momentum": 0.9, "clip_len": 16, "resize": [128, 171], "seed": 0,
        "encoder": {"family": "r3d_like", "width_multiplier": 1.0, "feature_dim": 512,
                    "blocks_per_stage": [2, 2, 2, 2]},
        "nce": {"temperature": 0.07, "n_negatives": 1024, "momentum": 0.5},
        "augment": {"crop_size": [112, 112]},
    },
    "eval": {"clips_per_video": 10},
    "finetune": {"epochs": 150, "lr": 0.001},
}

PRESETS = {"desk": DESK, "paper": PAPER}


def deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in (override or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def set_dotted(tree: dict, dotted: str, value):
    node = tree
    keys = dotted.split(".")
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(dotted, "cannot set a key below a scalar")
    node[keys[-1]] = value


def resolve(raw: dict, preset: str = "desk", seed=None) -> Experiment:
    """Merge ``raw`` over a preset and validate the result."""
    if preset not in PRESETS:
        raise ConfigError("preset", f"unknown preset {preset!r}")
    raw = raw or {}
    if not isinstance(raw, dict):
        raise ConfigError("", "config root must be a mapping")
    version = raw.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError("schema_version", f"unsupported version {version}")
    for key in raw:
        if key not in ("schema_version", "data", "train", "eval", "finetune"):
            raise ConfigError(key, "unknown key")
    merged = deep_merge(PRESETS[preset], raw)
    if raw.get("data", {}).get("path"):
        merged["data"].pop("synthetic", None)
    if seed is not None:
        merged["train"]["seed"] = int(seed)
        merged["finetune"]["seed"] = int(seed)
    data = build(DataConfig, merged.get("data"), "data")
    if not data.path:
        data.synthetic_spec()
    return Experiment(
        data=data,
        train=build(TrainConfig, merged.get("train"), "train"),
        eval=build(EvalConfig, merged.get("eval"), "eval"),
        finetune=build(FinetuneConfig, merged.get("finetune"), "finetune"),
        schema_version=version,
    )


def load_yaml(path) -> dict:
    text = Path(path).read_text()
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError("", f"{path}: invalid YAML: {exc}") from None
    return raw or {}


def load_experiment(path, preset="desk", seed=None) -> Experiment:
    return resolve(load_yaml(path), preset, seed)


def dump_yaml(data: dict, path):
    Path(path).write_text(yaml.safe_dump(data, sort_keys=False))
