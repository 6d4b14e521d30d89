"""U-Net decoder with three deep-supervision heads.

Upsampling everywhere is ``F.interpolate(mode="bilinear", align_corners=False)``:
output pixel ``i`` samples the input at ``(i + 0.5) * in / out - 0.5``, clamped
at the borders, with no antialiasing.
"""

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ShapeError

NUM_BLOCKS = 3


@dataclass
class DecoderConfig:
    channels: int = 64
    num_blocks: int = NUM_BLOCKS
    fusion: str = "concat"
    upsample: str = "bilinear"

    def validate(self):
        if self.num_blocks != NUM_BLOCKS:
            raise ConfigError(f"decoder has exactly {NUM_BLOCKS} blocks", field="model.decoder.num_blocks")
        if self.fusion != "concat":
            raise ConfigError(f"unsupported fusion {self.fusion!r}", field="model.decoder.fusion")
        if self.upsample != "bilinear":
            raise ConfigError(f"unsupported upsample {self.upsample!r}", field="model.decoder.upsample")
        if self.channels <= 0:
            raise ConfigError("decoder channels must be positive", field="model.decoder.channels")
        return self


def upsample(x, size):
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)


class ConvBNReLU(nn.Sequential):
    def __init__(self, cin, cout):
        super().__init__(
            nn.Conv2d(cin, cout, 3, padding=1, bias=False),
            nn.BatchNorm2d(cout),
            nn.ReLU(inplace=True),
        )


class DecoderBlock(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.in_channels = 2 * channels
        self.convs = nn.Sequential(ConvBNReLU(2 * channels, channels), ConvBNReLU(channels, channels))

    def forward(self, x, skip):
        x = upsample(x, skip.shape[-2:])
        return self.convs(torch.cat([x, skip], dim=1))


class UNetDecoder(nn.Module):
    def __init__(self, cfg: DecoderConfig = None):
        super().__init__()
        cfg = (cfg or DecoderConfig()).validate()
        self.channels = cfg.channels
        self.blocks = nn.ModuleList(DecoderBlock(cfg.channels) for _ in range(NUM_BLOCKS))
        self.heads = nn.ModuleList(nn.Conv2d(cfg.channels, 1, 1) for _ in range(NUM_BLOCKS))

    def _check(self, pyramid):
        if len(pyramid) != 4:
            raise ShapeError(f"decoder expects 4 pyramid levels, got {len(pyramid)}")
        for i, f in enumerate(pyramid):
            if f.shape[1] != self.channels:
                raise ShapeError(f"level {i}: expected {self.channels} channels, got {f.shape[1]}")
        for i in range(3):
            (h0, w0), (h1, w1) = pyramid[i].shape[-2:], pyramid[i + 1].shape[-2:]
            if (h0, w0) != (2 * h1, 2 * w1):
                raise ShapeError(f"level {i + 1} ({h1}x{w1}) is not half of level {i} ({h0}x{w0})")

    def forward(self, pyramid, input_size=None, raw=False):
        """Returns ``[S_1, S_2, S_3]``; S_1 comes from the stride-4 block.

        With ``raw=True`` the head maps are returned before upsampling.
        """
        self._check(pyramid)
        x = pyramid[3]
        maps = []
        for blk, head, skip in zip(self.blocks, self.heads, reversed(pyramid[:3])):
            x = blk(x, skip)
            maps.append(head(x))
        maps.reverse()
        if raw:
            return maps
        if input_size is None:
            input_size = tuple(4 * s for s in pyramid[0].shape[-2:])
        return [upsample(m, tuple(input_size)) for m in maps]


def decode(decoder, pyramid64, input_size):
    return decoder(pyramid64, input_size)


def predict_mask(outputs):
    """Sigmoid of the highest-resolution head S_1."""
    return torch.sigmoid(outputs[0])
