"""Experiment configuration: YAML round-trip, dotted overrides and named presets."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import yaml

from foveal_mim.evaluation import ProbeConfig
from foveal_mim.imaging import Attention, MaskPlan
from foveal_mim.training import SWEEP_RATIOS, PretrainConfig


class ConfigError(ValueError):
    """Configuration text cannot be parsed or names unknown keys."""


@dataclass
class DataConfig:
    stl10_root: str = "data/stl10_binary"
    confidence_dir: Optional[str] = None
    unlabeled_limit: Optional[int] = None
    # generate a labeled corpus in STL-10 layout when no real data is present
    synthetic: bool = False
    synthetic_unlabeled: int = 1000
    synthetic_train: int = 5000
    synthetic_test: int = 8000


@dataclass
class MetricsConfig:
    covariance_batch: int = 512
    eval_images: int = 1000
    foreground_only: bool = False


@dataclass
class ExperimentConfig:
    preset: Optional[str] = None
    seed: int = 0
    output_dir: str = "runs"
    encoder: str = "pretrained"
    data: DataConfig = field(default_factory=DataConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    sweep_ratios: Tuple[float, ...] = SWEEP_RATIOS

    def __post_init__(self):
        if self.encoder not in ("pretrained", "random", "pixels"):
            raise ConfigError(f"encoder must be pretrained, random or pixels, got {self.encoder!r}")

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    def to_yaml(self) -> str:
        return dump_yaml(self.to_dict())

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        return _build(cls, data, "")

    @classmethod
    def from_yaml(cls, text: str) -> "ExperimentConfig":
        try:
            data = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"unparseable config: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config must be a mapping")
        return cls.from_dict(data)

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def dump_yaml(data: dict) -> str:
    return yaml.safe_dump(_plain(data), sort_keys=False, default_flow_style=None)


def _unwrap_optional(tp):
    if typing.get_origin(tp) is typing.Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if len(args) == 1:
            return args[0], True
    return tp, False


def _coerce(tp, value, path):
    tp, optional = _unwrap_optional(tp)
    if value is None:
        if optional:
            return None
        raise ConfigError(f"{path} may not be null")
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{path} must be a mapping")
        return _build(tp, value, path)
    origin = typing.get_origin(tp)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path} must be a list")
        args = typing.get_args(tp)
        inner = args[0] if args else Any
        return tuple(_coerce(inner, v, f"{path}[{i}]") for i, v in enumerate(value))
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path} must be a number, got {value!r}")
        return float(value)
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path} must be an integer, got {value!r}")
        return value
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path} must be true or false, got {value!r}")
        return value
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path} must be a string, got {value!r}")
        return value
    return value


def _build(cls, data: dict, prefix: str):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        where = prefix or "top level"
        raise ConfigError(f"unknown config keys at {where}: {', '.join(unknown)}")
    kwargs = {k: _coerce(hints[k], v, f"{prefix}.{k}" if prefix else k) for k, v in data.items()}
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {prefix or 'config'}: {exc}") from exc


def apply_overrides(data: dict, overrides) -> dict:
    """Apply ``key.sub=value`` strings; values are parsed as YAML scalars."""
    data = json.loads(json.dumps(data))
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse override value {raw!r}") from exc
        node = data
        parts = key.strip().split(".")
        for part in parts[:-1]:
            if not isinstance(node.get(part), dict):
                node[part] = {} if node.get(part) is None else node[part]
                if not isinstance(node[part], dict):
                    raise ConfigError(f"override {key!r} descends into a non-mapping")
            node = node[part]
        node[parts[-1]] = value
    return data


def _pretrain(strategy, ratio, **kw):
    mask_kw = {k: kw.pop(k) for k in ("attention", "blur_sigma") if k in kw}
    return PretrainConfig(mask=MaskPlan(strategy, ratio, **mask_kw), **kw)


def _presets() -> Dict[str, ExperimentConfig]:
    p = {
        "random_patches": _pretrain("random_patches", 0.6),
        "masked_periphery": _pretrain("masked_periphery", 0.8),
        "blurry_patches": _pretrain("blurry_patches", 0.6),
        "blurry_periphery": _pretrain("blurry_periphery", 0.8),
        "foveal_filter": _pretrain("foveal_filter", 0.8),
        "autoencoder": _pretrain("none", 0.0),
        "masked_periphery_no_crop": _pretrain("masked_periphery", 0.8, crop=False),
        "random_patches_no_crop": _pretrain("random_patches", 0.6, crop=False),
        "foveal_filter_no_crop": _pretrain("foveal_filter", 0.8, crop=False),
        "random_patches_fixed_layout": _pretrain("random_patches", 0.6, fixed_masks=True),
        "random_patches_fixed_layout_no_crop": _pretrain("random_patches", 0.6, fixed_masks=True, crop=False),
        "random_patches_fg": _pretrain("random_patches", 0.6, foreground_weighting=True),
        "masked_periphery_fg": _pretrain("masked_periphery", 0.8, foreground_weighting=True),
        "covert_attention_random": _pretrain("masked_periphery", 0.8, attention=Attention(placement="random"),
                                             foreground_weighting=True),
        "covert_attention_object": _pretrain("masked_periphery", 0.8, attention=Attention(placement="object"),
                                             foreground_weighting=True),
        "smoke": _pretrain("masked_periphery", 0.8, epochs=30, batch_size=64, learning_rate=5e-4),
    }
    out = {}
    for name, pre in p.items():
        cfg = ExperimentConfig(preset=name, pretrain=pre)
        if name == "smoke":
            cfg.data.unlabeled_limit = 1000
            cfg.probe = ProbeConfig(seeds=(0, 1, 2))
        if name.endswith("_fg") or name.startswith("covert_attention"):
            cfg.data.confidence_dir = "data/confidence"
            cfg.metrics.foreground_only = True
        out[name] = cfg
    out["pixel_probe"] = ExperimentConfig(preset="pixel_probe", encoder="pixels")
    return out


PRESET_NAMES = tuple(sorted(_presets()))


def preset(name: str) -> ExperimentConfig:
    presets = _presets()
    if name not in presets:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(sorted(presets))}")
    return presets[name]


def load_config(path=None, preset_name=None, overrides=(), seed=None, out=None) -> ExperimentConfig:
    """Compose preset, config file, overrides and CLI flags, in that order."""
    data = preset(preset_name).to_dict() if preset_name else ExperimentConfig().to_dict()
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        file_data = ExperimentConfig.from_yaml(text)  # validates keys before merging
        raw = yaml.safe_load(text) or {}
        data = _merge(data, raw) if preset_name else file_data.to_dict()
    data = apply_overrides(data, overrides)
    if seed is not None:
        data["seed"] = seed
    if out is not None:
        data["output_dir"] = str(out)
    cfg = ExperimentConfig.from_dict(data)
    # the global seed drives pretraining
    cfg.pretrain.seed = cfg.seed
    return cfg


def _merge(base: dict, update: dict) -> dict:
    out = dict(base)
    for k, v in update.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out
