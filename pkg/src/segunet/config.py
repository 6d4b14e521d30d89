"""Dotted-key run configuration: defaults < SEGUNET_SEED < config file < CLI flags."""

import os
from copy import deepcopy
from pathlib import Path

import yaml

from .adapter import AdapterConfig
from .data import AugmentationConfig
from .decoder import DecoderConfig
from .engine import TrainConfig
from .errors import ConfigError
from .model import ModelConfig
from .rfb import RFBConfig

DEFAULTS = {
    "model.preset": "desk",
    "model.adapter.bottleneck_dim": None,
    "model.freeze_backbone": True,
    "model.rfb.out_channels": 64,
    "train.lr": 1e-3,
    "train.weight_decay": 1e-4,
    "train.epochs": 5,
    "train.batch_size": 4,
    "train.eta_min": 0.0,
    "train.grad_clip": None,
    "train.per_step_schedule": False,
    "train.max_steps": None,
    "data.image_size": 352,
    "data.multiscale": [1.0],
    "data.hflip_prob": 0.5,
    "data.vflip_prob": 0.5,
    "seed": 0,
}

_TYPES = {
    "model.preset": str,
    "model.adapter.bottleneck_dim": int,
    "model.freeze_backbone": bool,
    "model.rfb.out_channels": int,
    "train.lr": float,
    "train.weight_decay": float,
    "train.epochs": int,
    "train.batch_size": int,
    "train.eta_min": float,
    "train.grad_clip": float,
    "train.per_step_schedule": bool,
    "train.max_steps": int,
    "data.image_size": int,
    "data.multiscale": list,
    "data.hflip_prob": float,
    "data.vflip_prob": float,
    "seed": int,
}


def flatten(d, prefix=""):
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _coerce(key, value):
    if key not in _TYPES:
        raise ConfigError(f"unknown config key {key!r}", field=key)
    if value is None:
        if DEFAULTS[key] is None:
            return None
        raise ConfigError(f"{key} may not be null", field=key)
    kind = _TYPES[key]
    try:
        if kind is bool:
            if isinstance(value, str):
                if value.lower() in ("true", "1", "yes", "on"):
                    return True
                if value.lower() in ("false", "0", "no", "off"):
                    return False
                raise ValueError(value)
            return bool(value)
        if kind is list:
            if isinstance(value, str):
                value = [v for v in value.replace(",", " ").split()]
            if not isinstance(value, (list, tuple)):
                value = [value]
            return [float(v) for v in value]
        if kind is int and isinstance(value, float) and not value.is_integer():
            raise ValueError(value)
        return kind(value)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{key}: cannot interpret {value!r} as {kind.__name__}", field=key) from e


def load_file(path):
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text()) or {}
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}", field="config") from e
    except yaml.YAMLError as e:
        raise ConfigError(f"config file {path} does not parse: {e}", field="config") from e
    if not isinstance(raw, dict):
        raise ConfigError(f"config file {path} must hold a mapping", field="config")
    return flatten(raw)


def parse_override(text):
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like key=value", field=text)
    key, value = text.split("=", 1)
    return key.strip(), yaml.safe_load(value)


def resolve(config_path=None, overrides=None, env=None):
    """Merge the layers and return a fully materialised flat dict."""
    env = os.environ if env is None else env
    cfg = deepcopy(DEFAULTS)
    if env.get("SEGUNET_SEED"):
        cfg["seed"] = _coerce("seed", env["SEGUNET_SEED"])
    if config_path:
        for k, v in load_file(config_path).items():
            cfg[k] = _coerce(k, v)
    for k, v in (overrides or {}).items():
        if v is not None:
            cfg[k] = _coerce(k, v)
    return cfg


def model_config(cfg) -> ModelConfig:
    out = cfg["model.rfb.out_channels"]
    return ModelConfig(
        preset=cfg["model.preset"],
        adapter=AdapterConfig(cfg["model.adapter.bottleneck_dim"]),
        rfb=RFBConfig(out_channels=out),
        decoder=DecoderConfig(channels=out),
        freeze_backbone=cfg["model.freeze_backbone"],
        seed=cfg["seed"],
    ).validate()


def train_config(cfg) -> TrainConfig:
    return TrainConfig(
        lr=cfg["train.lr"],
        weight_decay=cfg["train.weight_decay"],
        epochs=cfg["train.epochs"],
        batch_size=cfg["train.batch_size"],
        eta_min=cfg["train.eta_min"],
        grad_clip=cfg["train.grad_clip"],
        per_step_schedule=cfg["train.per_step_schedule"],
        max_steps=cfg["train.max_steps"],
        seed=cfg["seed"],
        image_size=cfg["data.image_size"],
        augmentation=AugmentationConfig(
            hflip_prob=cfg["data.hflip_prob"],
            vflip_prob=cfg["data.vflip_prob"],
            multiscale=tuple(cfg["data.multiscale"]),
        ),
    ).validate()


def snapshot(cfg, path):
    Path(path).write_text(yaml.safe_dump(dict(sorted(cfg.items())), sort_keys=True))
