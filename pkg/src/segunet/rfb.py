"""Receptive field blocks: compress each pyramid level to a common width."""

from dataclasses import dataclass
from typing import Sequence, Tuple

import torch
import torch.nn as nn

from .errors import ConfigError, ShapeError


@dataclass
class RFBConfig:
    in_channels: int = 0
    out_channels: int = 64
    branch_dilations: Tuple[int, ...] = (1, 3, 5, 7)

    def validate(self):
        if self.in_channels <= 0 or self.out_channels <= 0:
            raise ConfigError(
                f"RFB channels must be positive (in={self.in_channels}, out={self.out_channels})",
                field="model.rfb.out_channels",
            )
        if not self.branch_dilations or any(d < 1 for d in self.branch_dilations):
            raise ConfigError("branch_dilations must be positive integers", field="model.rfb.branch_dilations")
        return self


class ConvBN(nn.Sequential):
    def __init__(self, cin, cout, kernel_size, padding=0, dilation=1):
        super().__init__(
            nn.Conv2d(cin, cout, kernel_size, padding=padding, dilation=dilation, bias=False),
            nn.BatchNorm2d(cout),
        )


def _branch(cin, cout, d):
    if d == 1:
        return ConvBN(cin, cout, 1)
    return nn.Sequential(
        ConvBN(cin, cout, 1),
        ConvBN(cout, cout, (1, d), padding=(0, d // 2)),
        ConvBN(cout, cout, (d, 1), padding=(d // 2, 0)),
        ConvBN(cout, cout, 3, padding=d, dilation=d),
    )


class RFB(nn.Module):
    def __init__(self, cfg: RFBConfig):
        super().__init__()
        cfg.validate()
        for d in cfg.branch_dilations:
            if d % 2 == 0:
                raise ConfigError(f"branch dilation {d} must be odd to preserve size", field="model.rfb.branch_dilations")
        self.in_channels = cfg.in_channels
        self.out_channels = cfg.out_channels
        c = cfg.out_channels
        self.branches = nn.ModuleList(_branch(cfg.in_channels, c, d) for d in cfg.branch_dilations)
        self.fuse = ConvBN(c * len(cfg.branch_dilations), c, 3, padding=1)
        self.shortcut = ConvBN(cfg.in_channels, c, 1)
        self.relu = nn.ReLU(inplace=True)

    def forward(self, x):
        cat = torch.cat([b(x) for b in self.branches], dim=1)
        return self.relu(self.fuse(cat) + self.shortcut(x))


def build_rfb(cfg: RFBConfig) -> RFB:
    return RFB(cfg)


def build_rfbs(in_channels: Sequence[int], out_channels=64, branch_dilations=(1, 3, 5, 7)) -> nn.ModuleList:
    return nn.ModuleList(
        build_rfb(RFBConfig(c, out_channels, tuple(branch_dilations))) for c in in_channels
    )


def apply_rfb_pyramid(rfbs, pyramid):
    if len(pyramid) != len(rfbs):
        raise ShapeError(f"expected {len(rfbs)} pyramid levels, got {len(pyramid)}")
    out = []
    for i, (rfb, feat) in enumerate(zip(rfbs, pyramid)):
        if feat.shape[1] != rfb.in_channels:
            raise ShapeError(f"stage {i}: RFB expects {rfb.in_channels} channels, got {feat.shape[1]}")
        out.append(rfb(feat))
    return out
