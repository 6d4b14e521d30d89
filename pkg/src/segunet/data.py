"""Image/mask folder datasets, augmentation, batching and a synthetic corpus.

Layout on disk::

    <root>/images/<stem>.png|.jpg
    <root>/masks/<stem>.png
"""

import math
from collections import namedtuple
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, UnidentifiedImageError

from .errors import ConfigError, DataError

STRIDE = 32
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")
MASK_THRESHOLD = 127

Sample = namedtuple("Sample", "image mask stem")


@dataclass
class DatasetSpec:
    root: str
    image_dir: str = "images"
    mask_dir: str = "masks"
    split: str = "train"
    image_size: int = 352

    @property
    def name(self):
        return Path(self.root).name


@dataclass
class AugmentationConfig:
    hflip_prob: float = 0.5
    vflip_prob: float = 0.5
    multiscale: Tuple[float, ...] = (1.0,)

    def validate(self):
        for k in ("hflip_prob", "vflip_prob"):
            v = getattr(self, k)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{k} must be in [0, 1], got {v}", field=f"data.{k}")
        if not self.multiscale or any(s <= 0 for s in self.multiscale):
            raise ConfigError("multiscale factors must be positive", field="data.multiscale")
        return self


POLYP_AUGMENTATION = AugmentationConfig(multiscale=(1.0, 1.25))


def _files(folder: Path):
    out = {}
    for f in sorted(folder.iterdir()):
        if f.is_file() and f.suffix.lower() in IMAGE_SUFFIXES:
            out.setdefault(f.stem, f)
    return out


def list_pairs(spec: DatasetSpec) -> List[Tuple[str, Path, Path]]:
    root = Path(spec.root)
    img_dir, mask_dir = root / spec.image_dir, root / spec.mask_dir
    for d in (img_dir, mask_dir):
        if not d.is_dir():
            raise DataError(f"missing directory: {d}", items=[str(d)])
    images, masks = _files(img_dir), _files(mask_dir)
    orphans = sorted(set(images) ^ set(masks))
    if orphans:
        raise DataError(f"unmatched stems in {root}: {', '.join(orphans)}", items=orphans)
    if not images:
        raise DataError(f"no image/mask pairs under {root}", items=[str(root)])
    return [(s, images[s], masks[s]) for s in sorted(images)]


def _open(path, mode):
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert(mode))
    except (UnidentifiedImageError, OSError) as e:
        raise DataError(f"unreadable image file {path}: {e}", items=[str(path)]) from e


def load_image(path) -> torch.Tensor:
    """(3, H, W) float32 in [0, 1]."""
    arr = _open(path, "RGB")
    return torch.from_numpy(arr.astype(np.float32) / 255.0).permute(2, 0, 1).contiguous()


def load_mask(path) -> torch.Tensor:
    """(1, H, W) float32 in {0, 1}."""
    arr = _open(path, "L")
    return torch.from_numpy((arr > MASK_THRESHOLD).astype(np.float32))[None]


class FolderDataset:
    """Lazily loaded stem-sorted image/mask pairs at native resolution."""

    def __init__(self, spec: DatasetSpec, cache=True):
        self.spec = spec
        self.pairs = list_pairs(spec)
        self._cache = {} if cache else None

    def __len__(self):
        return len(self.pairs)

    @property
    def stems(self):
        return [s for s, _, _ in self.pairs]

    def __getitem__(self, i) -> Sample:
        if self._cache is not None and i in self._cache:
            return self._cache[i]
        stem, img_path, mask_path = self.pairs[i]
        image, mask = load_image(img_path), load_mask(mask_path)
        if image.shape[-2:] != mask.shape[-2:]:
            raise DataError(
                f"{stem}: image {tuple(image.shape[-2:])} and mask {tuple(mask.shape[-2:])} sizes differ",
                items=[stem],
            )
        sample = Sample(image, mask, stem)
        if self._cache is not None:
            self._cache[i] = sample
        return sample


def load_dataset(spec: DatasetSpec) -> FolderDataset:
    return FolderDataset(spec)


def discover_datasets(root, image_size=352) -> List[DatasetSpec]:
    """``root`` itself if it holds images/ and masks/, otherwise each such subfolder."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"missing directory: {root}", items=[str(root)])
    if (root / "images").is_dir() or (root / "masks").is_dir():
        return [DatasetSpec(str(root), image_size=image_size)]
    found = [
        DatasetSpec(str(d), image_size=image_size)
        for d in sorted(root.iterdir())
        if d.is_dir() and (d / "images").is_dir() and (d / "masks").is_dir()
    ]
    if not found:
        raise DataError(f"no images/ + masks/ dataset under {root}", items=[str(root)])
    return found


# -- transforms --


def augment(sample: Sample, cfg: AugmentationConfig, rng: np.random.Generator) -> Sample:
    """Random horizontal then vertical flip, decided once and applied to image and mask."""
    image, mask = sample.image, sample.mask
    hflip = rng.random() < cfg.hflip_prob
    vflip = rng.random() < cfg.vflip_prob
    if hflip:
        image, mask = image.flip(-1), mask.flip(-1)
    if vflip:
        image, mask = image.flip(-2), mask.flip(-2)
    return Sample(image, mask, sample.stem)


def scaled_size(base: int, scale: float) -> int:
    """``base * scale`` rounded to the nearest multiple of 32 (352 * 1.25 -> 448)."""
    return max(STRIDE, int(math.floor(base * scale / STRIDE + 0.5)) * STRIDE)


def _as_hw(size):
    h, w = (size, size) if isinstance(size, int) else tuple(size)
    if h % STRIDE or w % STRIDE or h <= 0 or w <= 0:
        raise ConfigError(f"resize target {h}x{w} must be positive multiples of {STRIDE}", field="data.image_size")
    return h, w


def resize_image(image, size):
    if tuple(image.shape[-2:]) == tuple(size):
        return image
    return F.interpolate(image[None], size=size, mode="bilinear", align_corners=False)[0]


def resize_pair(sample: Sample, size) -> Sample:
    """Bilinear for the image, nearest for the mask so it stays binary."""
    hw = _as_hw(size)
    image = resize_image(sample.image, hw)
    mask = sample.mask
    if tuple(mask.shape[-2:]) != hw:
        mask = F.interpolate(mask[None], size=hw, mode="nearest")[0]
    return Sample(image, mask, sample.stem)


def iterate_batches(
    dataset,
    batch_size: int,
    image_size: int,
    aug: Optional[AugmentationConfig],
    seed: int,
    epoch: int,
    shuffle=True,
):
    """Yield ``(images, masks)`` batches for one epoch.

    Order, flips and the per-batch scale are drawn from generators keyed by
    (seed, epoch[, batch, sample]) so any loading order gives the same batches.
    """
    n = len(dataset)
    order = np.arange(n)
    if shuffle:
        order = np.random.default_rng([seed, epoch]).permutation(n)
    scales = aug.multiscale if aug is not None else (1.0,)
    for b, start in enumerate(range(0, n, batch_size)):
        idx = order[start : start + batch_size]
        scale = scales[np.random.default_rng([seed, epoch, b, 1]).integers(len(scales))] if len(scales) > 1 else scales[0]
        size = scaled_size(image_size, scale)
        images, masks = [], []
        for i in idx:
            sample = resize_pair(dataset[int(i)], size)
            if aug is not None:
                sample = augment(sample, aug, np.random.default_rng([seed, epoch, int(i), 2]))
            images.append(sample.image)
            masks.append(sample.mask)
        yield torch.stack(images), torch.stack(masks)


# -- synthetic shapes corpus --


@dataclass
class SyntheticShapesConfig:
    n_samples: int = 16
    canvas: int = 128
    shapes_per_image: Tuple[int, int] = (1, 3)
    contrast: float = 0.6
    noise_std: float = 0.03
    seed: int = 7
    min_fraction: float = 0.01
    max_fraction: float = 0.6

    def validate(self):
        if self.n_samples < 1:
            raise ConfigError("n_samples must be >= 1", field="synth.n")
        if self.canvas < 16:
            raise ConfigError("canvas must be >= 16", field="synth.canvas")
        if not 0 < self.contrast <= 1:
            raise ConfigError(f"contrast must be in (0, 1], got {self.contrast}", field="synth.contrast")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be >= 0", field="synth.noise_std")
        lo, hi = self.shapes_per_image
        if not 1 <= lo <= hi:
            raise ConfigError("shapes_per_image must satisfy 1 <= lo <= hi", field="synth.shapes_per_image")
        return self


def _shape_mask(rng, yy, xx, canvas):
    kind = rng.integers(3)
    cy, cx = rng.uniform(0.15, 0.85, size=2) * canvas
    size = rng.uniform(0.08, 0.25) * canvas
    theta = rng.uniform(0, np.pi)
    c, s = np.cos(theta), np.sin(theta)
    u = (xx - cx) * c + (yy - cy) * s
    v = -(xx - cx) * s + (yy - cy) * c
    if kind == 0:
        a, b = size, size * rng.uniform(0.5, 1.0)
        return (u / a) ** 2 + (v / b) ** 2 <= 1.0
    if kind == 1:
        a, b = size, size * rng.uniform(0.4, 1.0)
        return (np.abs(u) <= a) & (np.abs(v) <= b)
    # triangle: intersection of three half-planes around the centre
    inside = np.ones_like(u, dtype=bool)
    for k in range(3):
        ang = 2 * np.pi * k / 3
        inside &= u * np.cos(ang) + v * np.sin(ang) <= size * 0.6
    return inside


def render_synthetic(cfg: SyntheticShapesConfig, index: int):
    """Return ``(image uint8 HxWx3, mask uint8 HxW in {0, 255})`` for one sample."""
    rng = np.random.default_rng([cfg.seed, index])
    n = cfg.canvas
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64) + 0.5
    while True:
        mask = np.zeros((n, n), dtype=bool)
        shapes = []
        for _ in range(rng.integers(cfg.shapes_per_image[0], cfg.shapes_per_image[1] + 1)):
            m = _shape_mask(rng, yy, xx, n)
            shapes.append(m)
            mask |= m
        frac = mask.mean()
        if cfg.min_fraction < frac < cfg.max_fraction:
            break
    bg = rng.uniform(0.25, 0.75, size=3)
    image = np.broadcast_to(bg, (n, n, 3)).copy()
    for m in shapes:
        d = rng.uniform(-1, 1, size=3)
        d /= np.abs(d).max()
        image[m] = np.clip(bg + cfg.contrast * d, 0, 1)
    image += rng.normal(0, cfg.noise_std, size=image.shape)
    image = np.clip(np.rint(image * 255), 0, 255).astype(np.uint8)
    return image, (mask.astype(np.uint8) * 255)


def generate_synthetic(cfg: SyntheticShapesConfig, out_dir) -> DatasetSpec:
    cfg.validate()
    root = Path(out_dir)
    try:
        (root / "images").mkdir(parents=True, exist_ok=True)
        (root / "masks").mkdir(parents=True, exist_ok=True)
        for i in range(cfg.n_samples):
            image, mask = render_synthetic(cfg, i)
            stem = f"synth_{i:04d}"
            Image.fromarray(image, "RGB").save(root / "images" / f"{stem}.png")
            Image.fromarray(mask, "L").save(root / "masks" / f"{stem}.png")
    except OSError as e:
        raise DataError(f"cannot write synthetic corpus to {root}: {e}", items=[str(root)]) from e
    return DatasetSpec(str(root), image_size=scaled_size(cfg.canvas, 1.0))
