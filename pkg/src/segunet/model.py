"""End-to-end assembly and ``.sunet`` checkpoint persistence."""

import json
import zipfile
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Tuple

import numpy as np
import torch
import torch.nn as nn

from . import adapter as adapter_mod
from .adapter import AdapterConfig
from .backbone import EncoderConfig, build_encoder, preset, resolve_preset
from .decoder import DecoderConfig, UNetDecoder, predict_mask
from .errors import (
    CheckpointError,
    ConfigError,
    CorruptCheckpointError,
    MissingParameterError,
    SchemaVersionError,
)
from .rfb import RFBConfig, apply_rfb_pyramid, build_rfbs

SCHEMA_VERSION = 1
CHECKPOINT_SUFFIX = ".sunet"
IMAGE_MEAN = (0.485, 0.456, 0.406)
IMAGE_STD = (0.229, 0.224, 0.225)


@dataclass
class ModelConfig:
    preset: str = "desk"
    # explicit encoder config overrides the preset's
    encoder: Optional[EncoderConfig] = None
    adapter: AdapterConfig = field(default_factory=AdapterConfig)
    rfb: RFBConfig = field(default_factory=RFBConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    freeze_backbone: bool = True
    seed: int = 0
    mean: Tuple[float, float, float] = IMAGE_MEAN
    std: Tuple[float, float, float] = IMAGE_STD

    def encoder_config(self) -> EncoderConfig:
        if self.encoder is not None:
            return self.encoder.validate()
        return preset(self.preset)

    def validate(self):
        self.preset = resolve_preset(self.preset).value
        try:
            self.encoder_config()
        except ConfigError as e:
            raise ConfigError(f"encoder: {e}", field=e.field) from e
        if self.rfb.out_channels <= 0:
            raise ConfigError("rfb.out_channels must be positive", field="model.rfb.out_channels")
        if self.decoder.channels != self.rfb.out_channels:
            raise ConfigError(
                f"decoder.channels ({self.decoder.channels}) must equal rfb.out_channels ({self.rfb.out_channels})",
                field="model.decoder.channels",
            )
        try:
            self.decoder.validate()
        except ConfigError as e:
            raise ConfigError(f"decoder: {e}", field=e.field) from e
        if len(self.mean) != 3 or len(self.std) != 3 or any(s <= 0 for s in self.std):
            raise ConfigError("mean/std must be 3 values with std > 0", field="model.std")
        return self

    def to_dict(self):
        d = asdict(self)
        d["rfb"].pop("in_channels")
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        enc = d.pop("encoder", None)
        rfb = dict(d.pop("rfb", {}) or {})
        rfb.pop("in_channels", None)
        if "branch_dilations" in rfb:
            rfb["branch_dilations"] = tuple(rfb["branch_dilations"])
        cfg = cls(
            encoder=EncoderConfig.from_dict(enc) if enc else None,
            adapter=AdapterConfig(**(d.pop("adapter", {}) or {})),
            rfb=RFBConfig(**rfb),
            decoder=DecoderConfig(**(d.pop("decoder", {}) or {})),
            **{k: tuple(v) if k in ("mean", "std") else v for k, v in d.items()},
        )
        return cfg


class SegUNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.config = cfg
        enc_cfg = cfg.encoder_config()
        self.encoder = build_encoder(enc_cfg)
        adapter_mod.insert_adapters(self.encoder, cfg.adapter)
        self.rfbs = build_rfbs(enc_cfg.stage_channels, cfg.rfb.out_channels, cfg.rfb.branch_dilations)
        self.decoder = UNetDecoder(cfg.decoder)
        self.register_buffer("pixel_mean", torch.tensor(cfg.mean).view(1, 3, 1, 1))
        self.register_buffer("pixel_std", torch.tensor(cfg.std).view(1, 3, 1, 1))
        if cfg.freeze_backbone:
            adapter_mod.freeze_backbone(self.encoder)

    def forward(self, image):
        """``image`` in [0, 1], shape (B, 3, H, W). Returns logits ``[S_1, S_2, S_3]`` at (H, W)."""
        x = (image - self.pixel_mean) / self.pixel_std
        pyramid = self.encoder(x)
        pyramid = apply_rfb_pyramid(self.rfbs, pyramid)
        return self.decoder(pyramid, image.shape[-2:])

    @torch.no_grad()
    def predict(self, image):
        return predict_mask(self(image))


def build_model(cfg: Optional[ModelConfig] = None) -> SegUNet:
    cfg = cfg or ModelConfig()
    cfg.validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        return SegUNet(cfg)


def forward(model, image):
    return model(image)


def frozen_parameter_paths(model):
    return [n for n, p in model.named_parameters() if not p.requires_grad]


def is_trainable_path(path: str) -> bool:
    """The trainable set expected under freezing: adapters, RFBs, decoder blocks and heads."""
    return not path.startswith("encoder.") or adapter_mod.is_adapter_path(path)


# -- checkpoints ------------------------------------------------------------

_DTYPES = {
    torch.float32: "<f4",
    torch.float64: "<f8",
    torch.int64: "<i8",
}


def _encode_array(t: torch.Tensor):
    dtype = _DTYPES.get(t.dtype)
    if dtype is None:
        raise CheckpointError(f"unsupported tensor dtype {t.dtype}")
    arr = t.detach().cpu().contiguous().numpy().astype(dtype, copy=False)
    return {"dtype": dtype, "shape": list(arr.shape)}, arr.tobytes(order="C")


def _optimizer_state(model, optimizer):
    by_param = {p: n for n, p in model.named_parameters()}
    arrays, meta = {}, {}
    for group in optimizer.param_groups:
        for p in group["params"]:
            state = optimizer.state.get(p)
            if not state:
                continue
            name = by_param[p]
            entry = {}
            for key, value in state.items():
                if torch.is_tensor(value) and value.dim() > 0:
                    arrays[f"optim/{name}/{key}"] = value
                else:
                    entry[key] = float(value)
            meta[name] = entry
    hyper = [{k: v for k, v in g.items() if k != "params"} for g in optimizer.param_groups]
    return arrays, {"per_param": meta, "param_groups": json.loads(json.dumps(hyper, default=str))}


def save_checkpoint(model: SegUNet, path, training_state: Optional[dict] = None):
    """Write a ``.sunet`` zip: ``header.json`` plus one raw little-endian array per tensor path.

    ``training_state`` may hold ``epoch``, ``step`` and an ``optimizer`` whose state is stored too.
    """
    path = Path(path)
    header = {
        "format": "sunet",
        "schema_version": SCHEMA_VERSION,
        "model_config": model.config.to_dict(),
        "normalization": {"mean": list(model.config.mean), "std": list(model.config.std)},
        "parameters": {},
        "buffers": {},
        "training_state": None,
    }
    blobs = {}
    for name, p in model.named_parameters():
        header["parameters"][name], blobs[f"parameters/{name}"] = _encode_array(p)
    for name, b in model.named_buffers():
        header["buffers"][name], blobs[f"buffers/{name}"] = _encode_array(b)
    if training_state:
        ts = {k: v for k, v in training_state.items() if k != "optimizer"}
        opt = training_state.get("optimizer")
        if opt is not None:
            arrays, meta = _optimizer_state(model, opt)
            ts["optimizer"] = meta
            ts["optimizer"]["arrays"] = {}
            for key, t in arrays.items():
                ts["optimizer"]["arrays"][key], blobs[key] = _encode_array(t)
        header["training_state"] = ts
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr("header.json", json.dumps(header, indent=2, sort_keys=True))
        for key, blob in blobs.items():
            zf.writestr(key, blob)
    tmp.replace(path)
    return path


def _read_header(zf):
    try:
        header = json.loads(zf.read("header.json").decode("utf-8"))
    except KeyError as e:
        raise CorruptCheckpointError("checkpoint has no header.json") from e
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CorruptCheckpointError(f"unreadable checkpoint header: {e}") from e
    if header.get("format") != "sunet":
        raise CorruptCheckpointError("not a .sunet checkpoint")
    version = header.get("schema_version")
    if version != SCHEMA_VERSION:
        raise SchemaVersionError(f"checkpoint schema_version={version}, this build reads {SCHEMA_VERSION}")
    return header


def _read_array(zf, key, meta):
    try:
        raw = zf.read(key)
    except KeyError as e:
        raise MissingParameterError(f"checkpoint entry {key!r} is missing") from e
    arr = np.frombuffer(raw, dtype=np.dtype(meta["dtype"]))
    expected = int(np.prod(meta["shape"])) if meta["shape"] else 1
    if arr.size != expected:
        raise CorruptCheckpointError(f"{key}: {arr.size} values, header says shape {meta['shape']}")
    return torch.from_numpy(arr.reshape(meta["shape"]).copy())


def read_checkpoint(path):
    """Parse a checkpoint into ``(header, {kind/path: tensor})`` without building a model."""
    try:
        zf = zipfile.ZipFile(path)
    except (zipfile.BadZipFile, OSError) as e:
        if isinstance(e, FileNotFoundError):
            raise
        raise CorruptCheckpointError(f"{path}: {e}") from e
    with zf:
        header = _read_header(zf)
        tensors = {}
        try:
            for kind in ("parameters", "buffers"):
                for name, meta in header[kind].items():
                    tensors[f"{kind}/{name}"] = _read_array(zf, f"{kind}/{name}", meta)
            ts = header.get("training_state") or {}
            for key, meta in (ts.get("optimizer") or {}).get("arrays", {}).items():
                tensors[key] = _read_array(zf, key, meta)
        except zipfile.BadZipFile as e:
            raise CorruptCheckpointError(f"{path}: {e}") from e
    return header, tensors


def load_checkpoint(path, return_header=False):
    header, tensors = read_checkpoint(path)
    try:
        cfg = ModelConfig.from_dict(header["model_config"]).validate()
    except (TypeError, KeyError) as e:
        raise CorruptCheckpointError(f"invalid model_config in checkpoint: {e}") from e
    model = build_model(cfg)
    expected = {f"parameters/{n}" for n, _ in model.named_parameters()}
    expected |= {f"buffers/{n}" for n, _ in model.named_buffers()}
    stored = {k for k in tensors if not k.startswith("optim/")}
    missing = sorted(expected - stored)
    if missing:
        raise MissingParameterError(f"checkpoint lacks {len(missing)} tensors, e.g. {missing[:3]}")
    unexpected = sorted(stored - expected)
    if unexpected:
        raise CorruptCheckpointError(f"checkpoint has unknown tensors, e.g. {unexpected[:3]}")
    with torch.no_grad():
        for kind, items in (("parameters", model.named_parameters()), ("buffers", model.named_buffers())):
            for name, t in items:
                src = tensors[f"{kind}/{name}"]
                if tuple(src.shape) != tuple(t.shape):
                    raise CorruptCheckpointError(f"{name}: shape {tuple(src.shape)} != {tuple(t.shape)}")
                t.copy_(src.to(t.dtype))
    if return_header:
        return model, header, tensors
    return model


def restore_optimizer(model, optimizer, header, tensors):
    """Load optimizer moments saved by ``save_checkpoint(training_state={'optimizer': ...})``."""
    opt_meta = (header.get("training_state") or {}).get("optimizer")
    if not opt_meta:
        return False
    params = dict(model.named_parameters())
    for name, entry in opt_meta["per_param"].items():
        p = params[name]
        state = {k: torch.tensor(v) for k, v in entry.items()}
        for key in list(opt_meta["arrays"]):
            prefix = f"optim/{name}/"
            if key.startswith(prefix):
                state[key[len(prefix):]] = tensors[key].to(p.dtype)
        optimizer.state[p] = state
    return True


def with_preset(cfg: ModelConfig, name) -> ModelConfig:
    return replace(cfg, preset=resolve_preset(name).value, encoder=None)
