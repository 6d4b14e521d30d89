"""Bottleneck adapters for parameter-efficient fine-tuning of the encoder."""

from collections import namedtuple
from dataclasses import dataclass
from typing import Optional

import torch.nn as nn

from .errors import ConfigError

DEFAULT_BOTTLENECK = 32


@dataclass
class AdapterConfig:
    # None resolves to min(32, smallest_channel // 2) so desk presets build out of the box
    bottleneck_dim: Optional[int] = None

    def resolve(self, min_channels: int) -> int:
        b = self.bottleneck_dim
        if b is None:
            return max(1, min(DEFAULT_BOTTLENECK, min_channels // 2))
        if b < 1:
            raise ConfigError(f"bottleneck_dim must be positive, got {b}", field="model.adapter.bottleneck_dim")
        if b >= min_channels:
            raise ConfigError(
                f"bottleneck_dim={b} must be smaller than the narrowest adapted width ({min_channels})",
                field="model.adapter.bottleneck_dim",
            )
        return b


class Adapter(nn.Module):
    """down -> GELU -> up -> GELU; applied residually as x + A(x) in front of a block."""

    def __init__(self, dim, bottleneck):
        super().__init__()
        self.down = nn.Linear(dim, bottleneck)
        self.act = nn.GELU()
        self.up = nn.Linear(bottleneck, dim)
        nn.init.trunc_normal_(self.down.weight, std=0.02)
        nn.init.zeros_(self.down.bias)
        # zero up-projection: A(x) == 0 at init, so the adapted encoder starts as the original
        nn.init.zeros_(self.up.weight)
        nn.init.zeros_(self.up.bias)

    def forward(self, x):
        return self.act(self.up(self.act(self.down(x))))


def insertion_points(encoder):
    """Block identifiers that receive an adapter, in forward order."""
    return [f"blocks.{i}" for i in range(len(encoder.blocks))]


def insert_adapters(encoder, cfg: Optional[AdapterConfig] = None):
    """Attach one adapter in front of every encoder block. Mutates and returns ``encoder``."""
    cfg = cfg or AdapterConfig()
    dims = encoder.block_dims()
    b = cfg.resolve(min(dims))
    encoder.adapters = nn.ModuleList(Adapter(d, b) for d in dims)
    for p in encoder.adapters.parameters():
        p.requires_grad_(True)
    return encoder


def freeze_backbone(encoder):
    """Freeze every original encoder weight; adapters stay trainable."""
    if encoder.adapters is None:
        raise ConfigError("freeze_backbone called before insert_adapters", field="model.freeze_backbone")
    for name, p in encoder.named_parameters():
        p.requires_grad_(name.startswith("adapters."))
    return encoder


def is_adapter_path(path: str) -> bool:
    return ".adapters." in f".{path}"


ReportRow = namedtuple("ReportRow", "path count trainable")


def trainable_parameter_report(model: nn.Module):
    return [ReportRow(name, p.numel(), p.requires_grad) for name, p in model.named_parameters()]


def trainable_fraction(model: nn.Module) -> float:
    rows = trainable_parameter_report(model)
    total = sum(r.count for r in rows)
    return sum(r.count for r in rows if r.trainable) / total


def format_report(rows) -> str:
    width = max(len(r.path) for r in rows)
    lines = [f"{'path':<{width}}  {'count':>10}  trainable"]
    for r in rows:
        lines.append(f"{r.path:<{width}}  {r.count:>10}  {'yes' if r.trainable else 'no'}")
    total = sum(r.count for r in rows)
    trainable = sum(r.count for r in rows if r.trainable)
    lines.append(f"total={total} trainable={trainable} ({100.0 * trainable / total:.2f}%)")
    return "\n".join(lines)
