"""Hierarchical four-stage transformer encoder (Hiera-style).

The encoder turns a (B, 3, H, W) image into four feature maps at strides
4, 8, 16 and 32. Stage transitions pool the attention queries 2x2 and
double the channel width, the way Hiera's multi-scale blocks do.
"""

from dataclasses import asdict, dataclass, replace
from enum import Enum
from typing import List, Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ShapeError

PATCH_STRIDE = 4
TOTAL_STRIDE = 32


@dataclass(frozen=True)
class EncoderConfig:
    stage_channels: Tuple[int, int, int, int]
    stage_depths: Tuple[int, int, int, int]
    num_heads: Tuple[int, int, int, int]
    window_sizes: Tuple[int, int, int, int]
    mlp_ratio: float = 4.0
    pos_grid: int = 16
    patch_stride: int = PATCH_STRIDE

    def validate(self):
        for name in ("stage_channels", "stage_depths", "num_heads", "window_sizes"):
            value = getattr(self, name)
            if len(value) != 4:
                raise ConfigError(f"{name} must have 4 entries, got {len(value)}", field=name)
        if self.patch_stride != PATCH_STRIDE:
            raise ConfigError(f"patch_stride is fixed at {PATCH_STRIDE}", field="patch_stride")
        if any(c <= 0 for c in self.stage_channels):
            raise ConfigError("stage_channels must be positive", field="stage_channels")
        if any(b <= a for a, b in zip(self.stage_channels, self.stage_channels[1:])):
            raise ConfigError("stage_channels must be strictly increasing", field="stage_channels")
        for i, d in enumerate(self.stage_depths):
            if d < 1:
                raise ConfigError(f"stage_depths[{i}] must be >= 1, got {d}", field="stage_depths")
        for i, (c, h) in enumerate(zip(self.stage_channels, self.num_heads)):
            if h < 1 or c % h:
                raise ConfigError(
                    f"num_heads[{i}]={h} does not divide stage_channels[{i}]={c}", field="num_heads"
                )
        for i, w in enumerate(self.window_sizes):
            if w < 0:
                raise ConfigError(f"window_sizes[{i}] must be >= 0", field="window_sizes")
        # transition blocks pool windows of the previous stage by 2
        for i, w in enumerate(self.window_sizes[:3]):
            if w and w % 2:
                raise ConfigError(
                    f"window_sizes[{i}]={w} must be even, it feeds a query-pooling block",
                    field="window_sizes",
                )
        if self.mlp_ratio <= 0:
            raise ConfigError("mlp_ratio must be positive", field="mlp_ratio")
        if self.pos_grid < 1:
            raise ConfigError("pos_grid must be >= 1", field="pos_grid")
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("stage_channels", "stage_depths", "num_heads", "window_sizes"):
            if key in d:
                d[key] = tuple(int(v) for v in d[key])
        return cls(**d)


class BackbonePreset(str, Enum):
    TINY = "tiny"
    SMALL = "small"
    BASE_PLUS = "baseplus"
    LARGE = "large"
    DESK = "desk"
    DESK_TINY = "desktiny"


_PRESETS = {
    BackbonePreset.TINY: EncoderConfig((96, 192, 384, 768), (1, 2, 7, 2), (1, 2, 4, 8), (8, 4, 14, 7), pos_grid=88),
    BackbonePreset.SMALL: EncoderConfig((96, 192, 384, 768), (1, 2, 11, 2), (1, 2, 4, 8), (8, 4, 14, 7), pos_grid=88),
    BackbonePreset.BASE_PLUS: EncoderConfig(
        (112, 224, 448, 896), (2, 3, 16, 3), (2, 4, 8, 16), (8, 4, 14, 7), pos_grid=88
    ),
    BackbonePreset.LARGE: EncoderConfig(
        (144, 288, 576, 1152), (2, 6, 36, 4), (2, 4, 8, 16), (8, 4, 16, 8), pos_grid=88
    ),
    BackbonePreset.DESK: EncoderConfig((32, 64, 128, 256), (1, 1, 2, 1), (1, 2, 4, 8), (8, 4, 0, 0), pos_grid=16),
    BackbonePreset.DESK_TINY: EncoderConfig((16, 32, 64, 128), (1, 1, 1, 1), (1, 1, 2, 4), (8, 4, 0, 0), pos_grid=16),
}


def resolve_preset(name) -> BackbonePreset:
    """Accepts an enum member or a case-insensitive name such as ``"Large"`` or ``"base_plus"``."""
    if isinstance(name, BackbonePreset):
        return name
    key = str(name).strip().lower().replace("_", "").replace("-", "").replace("+", "plus")
    for preset in BackbonePreset:
        if preset.value == key:
            return preset
    valid = ", ".join(p.value for p in BackbonePreset)
    raise ConfigError(f"unknown backbone preset {name!r} (expected one of: {valid})", field="model.preset")


def preset(name, **overrides) -> EncoderConfig:
    cfg = _PRESETS[resolve_preset(name)]
    if overrides:
        cfg = replace(cfg, **overrides)
    return cfg.validate()


def _pool2x2(x):
    # x: (B, H, W, C) channels-last
    x = F.max_pool2d(x.permute(0, 3, 1, 2), kernel_size=2, stride=2)
    return x.permute(0, 2, 3, 1)


def window_partition(x, window_size):
    """(B, H, W, C) -> (B * nW, ws, ws, C), zero-padding H and W up to multiples of ws."""
    B, H, W, C = x.shape
    pad_h = (window_size - H % window_size) % window_size
    pad_w = (window_size - W % window_size) % window_size
    if pad_h or pad_w:
        x = F.pad(x, (0, 0, 0, pad_w, 0, pad_h))
    Hp, Wp = H + pad_h, W + pad_w
    x = x.view(B, Hp // window_size, window_size, Wp // window_size, window_size, C)
    windows = x.permute(0, 1, 3, 2, 4, 5).reshape(-1, window_size, window_size, C)
    return windows, (Hp, Wp)


def window_unpartition(windows, window_size, padded_hw, hw):
    Hp, Wp = padded_hw
    H, W = hw
    B = windows.shape[0] // (Hp * Wp // window_size // window_size)
    x = windows.view(B, Hp // window_size, Wp // window_size, window_size, window_size, -1)
    x = x.permute(0, 1, 3, 2, 4, 5).reshape(B, Hp, Wp, -1)
    return x[:, :H, :W, :].contiguous()


class PoolingAttention(nn.Module):
    def __init__(self, dim, dim_out, num_heads, q_pool=False):
        super().__init__()
        self.num_heads = num_heads
        self.q_pool = q_pool
        self.qkv = nn.Linear(dim, dim_out * 3)
        self.proj = nn.Linear(dim_out, dim_out)

    def forward(self, x):
        B, H, W, _ = x.shape
        qkv = self.qkv(x).reshape(B, H * W, 3, self.num_heads, -1)
        q, k, v = qkv.unbind(2)
        if self.q_pool:
            q = _pool2x2(q.reshape(B, H, W, -1))
            H, W = q.shape[1:3]
            q = q.reshape(B, H * W, self.num_heads, -1)
        out = F.scaled_dot_product_attention(q.transpose(1, 2), k.transpose(1, 2), v.transpose(1, 2))
        out = out.transpose(1, 2).reshape(B, H, W, -1)
        return self.proj(out)


class Mlp(nn.Module):
    def __init__(self, dim, hidden):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class MultiScaleBlock(nn.Module):
    """Pre-norm attention + MLP block on channels-last maps.

    When ``dim != dim_out`` the block is a stage transition: queries and the
    projected shortcut are max-pooled 2x2, halving the spatial size.
    """

    def __init__(self, dim, dim_out, num_heads, window_size=0, mlp_ratio=4.0):
        super().__init__()
        self.dim = dim
        self.dim_out = dim_out
        self.window_size = window_size
        self.pooling = dim != dim_out
        self.norm1 = nn.LayerNorm(dim)
        self.attn = PoolingAttention(dim, dim_out, num_heads, q_pool=self.pooling)
        if self.pooling:
            self.proj = nn.Linear(dim, dim_out)
        self.norm2 = nn.LayerNorm(dim_out)
        self.mlp = Mlp(dim_out, int(dim_out * mlp_ratio))

    def forward(self, x):
        shortcut = x
        x = self.norm1(x)
        if self.pooling:
            shortcut = _pool2x2(self.proj(x))
        H, W = x.shape[1:3]
        ws = self.window_size
        if ws:
            x, padded = window_partition(x, ws)
            x = self.attn(x)
            if self.pooling:
                ws, padded, H, W = ws // 2, (padded[0] // 2, padded[1] // 2), H // 2, W // 2
            x = window_unpartition(x, ws, padded, (H, W))
        else:
            x = self.attn(x)
        x = shortcut + x
        return x + self.mlp(self.norm2(x))


class HieraEncoder(nn.Module):
    def __init__(self, config: EncoderConfig):
        super().__init__()
        config.validate()
        self.config = config
        c1 = config.stage_channels[0]
        self.patch_embed = nn.Conv2d(3, c1, kernel_size=7, stride=PATCH_STRIDE, padding=3)
        self.pos_embed = nn.Parameter(torch.zeros(1, c1, config.pos_grid, config.pos_grid))

        self.blocks = nn.ModuleList()
        self.stage_ends = []
        dim = c1
        for stage, depth in enumerate(config.stage_depths):
            dim_out = config.stage_channels[stage]
            for i in range(depth):
                # the transition block still sees the previous stage's resolution,
                # so it keeps that stage's window size
                window = config.window_sizes[stage - 1] if (i == 0 and stage > 0) else config.window_sizes[stage]
                self.blocks.append(
                    MultiScaleBlock(dim, dim_out, config.num_heads[stage], window, config.mlp_ratio)
                )
                dim = dim_out
            self.stage_ends.append(len(self.blocks) - 1)
        # populated by adapter.insert_adapters
        self.adapters: Optional[nn.ModuleList] = None
        self._init_weights()

    def _init_weights(self):
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        for m in self.modules():
            if isinstance(m, (nn.Linear, nn.Conv2d)):
                nn.init.trunc_normal_(m.weight, std=0.02)
                if m.bias is not None:
                    nn.init.zeros_(m.bias)
            elif isinstance(m, nn.LayerNorm):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)

    @property
    def channels(self):
        return tuple(self.config.stage_channels)

    def block_dims(self) -> List[int]:
        """Token width entering each block (what an adapter in front of it sees)."""
        return [blk.dim for blk in self.blocks]

    def _pos_embed(self, h, w):
        pos = self.pos_embed
        if pos.shape[-2:] != (h, w):
            pos = F.interpolate(pos, size=(h, w), mode="bilinear", align_corners=False)
        return pos.permute(0, 2, 3, 1)

    def forward(self, image) -> List[torch.Tensor]:
        check_input_shape(image)
        x = self.patch_embed(image).permute(0, 2, 3, 1)
        x = x + self._pos_embed(*x.shape[1:3])
        features = []
        for i, blk in enumerate(self.blocks):
            if self.adapters is not None:
                x = x + self.adapters[i](x)
            x = blk(x)
            if i in self.stage_ends:
                features.append(x.permute(0, 3, 1, 2).contiguous())
        return features


def check_input_shape(image):
    if image.dim() != 4 or image.shape[1] != 3:
        raise ShapeError(f"expected image batch of shape (B, 3, H, W), got {tuple(image.shape)}")
    H, W = image.shape[-2:]
    if H % TOTAL_STRIDE or W % TOTAL_STRIDE:
        raise ShapeError(f"H and W must be divisible by {TOTAL_STRIDE}, got {H}x{W}")


def build_encoder(config: EncoderConfig, seed: Optional[int] = None) -> HieraEncoder:
    config.validate()
    if seed is None:
        return HieraEncoder(config)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return HieraEncoder(config)


def encode(encoder: HieraEncoder, image) -> List[torch.Tensor]:
    return encoder(image)


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def expected_pyramid_shapes(config: EncoderConfig, batch: int, height: int, width: int) -> Sequence[tuple]:
    return [
        (batch, c, height // 2 ** (i + 2), width // 2 ** (i + 2)) for i, c in enumerate(config.stage_channels)
    ]
