"""Binary segmentation metrics used by the SOD/COD/polyp/mirror benchmarks.

All per-image functions take a prediction ``p`` with values in [0, 1] and a
binary mask ``g`` of the same (H, W) shape.

Conventions (they follow the original MATLAB evaluation code):

* ``eps`` is ``np.spacing(1)``.
* S-measure: an all-background mask scores ``1 - mean(p)``, an all-foreground
  mask ``mean(p)``. The centroid is rounded half away from zero in 1-based
  coordinates. A foreground standard deviation over a single pixel is 0, and
  an empty quadrant contributes nothing.
* E-measure: ``p`` is quantised as ``floor(255 p)`` and binarised with
  ``>= t`` for t = 0..255. Scores are normalised by ``N - 1``, so a perfect
  map can exceed 1 by a factor of at most ``N / (N - 1)``.
* Weighted F uses beta^2 = 1 and scores 0 on an all-background mask.
* Adaptive / fixed-threshold F use beta^2 = 0.3 and score 0 when the
  intersection is empty.
* Dice and IoU of two empty masks are 1.
"""

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional

import numpy as np
from scipy import ndimage

from . import kernels
from .errors import DataError, ShapeError

EPS = np.spacing(1)
BETA2 = 0.3
CSV_COLUMNS = ["dataset", "n", "S", "Fadp", "Fw", "Em", "MAE", "mDice", "mIoU", "IoU", "F"]
# MetricReport field for each CSV column
COLUMN_FIELDS = {
    "S": "s_alpha",
    "Fadp": "f_adaptive",
    "Fw": "f_weighted",
    "Em": "e_phi_mean",
    "MAE": "mae",
    "mDice": "mdice",
    "mIoU": "miou",
    "IoU": "iou",
    "F": "f_beta",
}
ALL_METRICS = tuple(COLUMN_FIELDS.values())


def _pair(p, g):
    p = np.asarray(p, dtype=np.float64)
    g = np.asarray(g)
    if p.shape != g.shape or p.ndim != 2:
        raise ShapeError(f"prediction {p.shape} and mask {g.shape} must be equal 2-D shapes")
    return p, g.astype(bool)


def mae(p, g):
    p, g = _pair(p, g)
    return float(np.abs(p - g).mean())


def _dice_iou(p, g, threshold):
    p, g = _pair(p, g)
    pb = p >= threshold
    inter = np.count_nonzero(pb & g)
    sp, sg = np.count_nonzero(pb), np.count_nonzero(g)
    if sp + sg == 0:
        return 1.0, 1.0
    return 2.0 * inter / (sp + sg), inter / (sp + sg - inter)


def mdice(p, g, threshold=0.5):
    return _dice_iou(p, g, threshold)[0]


def miou(p, g, threshold=0.5):
    return _dice_iou(p, g, threshold)[1]


iou = miou


# -- S-measure --


def _round_half_away(x):
    return math.floor(x + 0.5)


def _object_score(values):
    if values.size == 0:
        return 0.0
    x = values.mean()
    sigma = values.std(ddof=1) if values.size > 1 else 0.0
    return 2.0 * x / (x * x + 1.0 + sigma + EPS)


def _s_object(p, g):
    fg = _object_score(p[g])
    bg = _object_score(1.0 - p[~g])
    u = g.mean()
    return u * fg + (1 - u) * bg


def _ssim(p, g):
    n = p.size
    if n == 0:
        return 0.0
    g = g.astype(np.float64)
    # a constant region must get zero variance exactly, or the beta == 0 branch flips on rounding
    x = p.flat[0] if p.min() == p.max() else p.mean()
    y = g.mean()
    dx, dy = p - x, g - y
    sx = (dx * dx).sum() / (n - 1 + EPS)
    sy = (dy * dy).sum() / (n - 1 + EPS)
    sxy = (dx * dy).sum() / (n - 1 + EPS)
    alpha = 4 * x * y * sxy
    beta = (x * x + y * y) * (sx + sy)
    if alpha != 0:
        return alpha / (beta + EPS)
    if beta == 0:
        return 1.0
    return 0.0


def _s_region(p, g):
    h, w = g.shape
    rows, cols = np.nonzero(g)
    # 1-based centroid; the quadrant split is [0:Y) x [0:X)
    X = _round_half_away(cols.mean() + 1)
    Y = _round_half_away(rows.mean() + 1)
    area = h * w
    w1 = X * Y / area
    w2 = (w - X) * Y / area
    w3 = X * (h - Y) / area
    w4 = 1.0 - w1 - w2 - w3
    quads = (
        (w1, np.s_[:Y, :X]),
        (w2, np.s_[:Y, X:]),
        (w3, np.s_[Y:, :X]),
        (w4, np.s_[Y:, X:]),
    )
    return sum(wq * _ssim(p[sl], g[sl]) for wq, sl in quads if wq > 0)


def s_measure(p, g, alpha=0.5):
    p, g = _pair(p, g)
    y = g.mean()
    if y == 0:
        return float(1.0 - p.mean())
    if y == 1:
        return float(p.mean())
    s = alpha * _s_object(p, g) + (1 - alpha) * _s_region(p, g)
    return float(max(0.0, s))


# -- E-measure --


def quantize(p):
    return np.floor(np.asarray(p, dtype=np.float64) * 255).clip(0, 255).astype(np.uint8)


def e_measure_curve(p, g):
    p, g = _pair(p, g)
    return kernels.emeasure_curve(quantize(p), g)


def e_measure_mean(p, g):
    return float(e_measure_curve(p, g).mean())


# -- F-measures --


def _f_at(pb, g, beta2=BETA2):
    inter = np.count_nonzero(pb & g)
    if inter == 0:
        return 0.0
    precision = inter / np.count_nonzero(pb)
    recall = inter / np.count_nonzero(g)
    return (1 + beta2) * precision * recall / (beta2 * precision + recall)


def f_adaptive(p, g):
    p, g = _pair(p, g)
    threshold = min(2 * p.mean(), 1.0)
    return float(_f_at(p >= threshold, g))


def f_beta(p, g, threshold=0.5):
    p, g = _pair(p, g)
    return float(_f_at(p >= threshold, g))


def gaussian_kernel(size=7, sigma=5.0):
    """``fspecial('gaussian', size, sigma)``."""
    m = (size - 1) / 2
    y, x = np.ogrid[-m : m + 1, -m : m + 1]
    h = np.exp(-(x * x + y * y) / (2 * sigma * sigma))
    h[h < np.finfo(h.dtype).eps * h.max()] = 0
    return h / h.sum()


_GAUSS = gaussian_kernel()


def f_weighted(p, g, beta=1.0):
    p, g = _pair(p, g)
    if not g.any():
        return 0.0
    gd = g.astype(np.float64)
    err = np.abs(p - gd)
    dist, rows, cols = kernels.nearest_foreground(g)
    # background pixels take the error of their nearest foreground pixel
    err_t = np.where(g, err, err[rows, cols])
    err_a = ndimage.correlate(err_t, _GAUSS, mode="constant", cval=0.0)
    min_err = np.where(g & (err_a < err), err_a, err)
    importance = np.where(g, 1.0, 2.0 - np.exp(np.log(0.5) / 5 * dist))
    ew = min_err * importance
    tpw = gd.sum() - ew[g].sum()
    fpw = ew[~g].sum()
    recall = 1 - ew[g].mean()
    precision = tpw / (EPS + tpw + fpw)
    return float((1 + beta * beta) * recall * precision / (EPS + recall + beta * precision))


METRIC_FUNCS = {
    "s_alpha": s_measure,
    "f_adaptive": f_adaptive,
    "f_weighted": f_weighted,
    "e_phi_mean": e_measure_mean,
    "mae": mae,
    "mdice": mdice,
    "miou": miou,
    "iou": iou,
    "f_beta": f_beta,
}


def compute_metrics(p, g, metric_set: Iterable[str] = ALL_METRICS) -> Dict[str, float]:
    return {name: METRIC_FUNCS[name](p, g) for name in metric_set}


@dataclass
class MetricReport:
    dataset: str = ""
    n_samples: int = 0
    s_alpha: float = float("nan")
    f_adaptive: float = float("nan")
    f_weighted: float = float("nan")
    e_phi_mean: float = float("nan")
    mae: float = float("nan")
    mdice: float = float("nan")
    miou: float = float("nan")
    iou: float = float("nan")
    f_beta: float = float("nan")
    per_sample: List[Dict[str, float]] = field(default_factory=list, repr=False)

    def row(self):
        out = {"dataset": self.dataset, "n": self.n_samples}
        for col, attr in COLUMN_FIELDS.items():
            v = getattr(self, attr)
            out[col] = "" if v != v else f"{v:.6f}"
        return out

    def values(self):
        return {attr: getattr(self, attr) for attr in ALL_METRICS}


def aggregate(rows: List[Dict[str, float]], dataset="", metric_set=ALL_METRICS) -> MetricReport:
    report = MetricReport(dataset=dataset, n_samples=len(rows), per_sample=list(rows))
    for name in metric_set:
        if rows:
            setattr(report, name, float(np.mean([r[name] for r in rows])))
    return report


def write_csv(reports: Iterable[MetricReport], path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        for r in reports:
            writer.writerow(r.row())
    return path


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def markdown_table(reports: Iterable[MetricReport], columns=("S", "Fadp", "Em", "MAE", "mDice", "mIoU")):
    head = "| dataset | n | " + " | ".join(columns) + " |"
    sep = "|" + "---|" * (len(columns) + 2)
    lines = [head, sep]
    for r in reports:
        row = r.row()
        lines.append(f"| {row['dataset']} | {row['n']} | " + " | ".join(row[c] or "-" for c in columns) + " |")
    return "\n".join(lines)


# -- folder evaluation --

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


def _stems(folder: Path):
    out = {}
    for f in sorted(folder.iterdir()):
        if f.is_file() and f.suffix.lower() in IMAGE_SUFFIXES:
            out.setdefault(f.stem, f)
    return out


def read_gray(path) -> np.ndarray:
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("L"), dtype=np.uint8)
    except (UnidentifiedImageError, OSError) as e:
        raise DataError(f"unreadable image {path}: {e}", items=[str(path)]) from e


def binarize_mask(values) -> np.ndarray:
    return np.asarray(values) > 127


def _resize_prob(p, shape):
    if p.shape == tuple(shape):
        return p
    import torch
    import torch.nn.functional as F

    t = torch.from_numpy(np.ascontiguousarray(p, dtype=np.float64))[None, None]
    return F.interpolate(t, size=tuple(shape), mode="bilinear", align_corners=False)[0, 0].numpy()


def evaluate_folder(pred_dir, gt_dir, metric_set=ALL_METRICS, dataset: Optional[str] = None, allow_missing=False):
    """Score every ``gt_dir/<stem>`` against ``pred_dir/<stem>`` (sorted by stem).

    Predictions are 8-bit maps read as value / 255; masks are binarised at > 127.
    A prediction whose size differs from its mask is resized bilinearly first.
    """
    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    for d in (pred_dir, gt_dir):
        if not d.is_dir():
            raise DataError(f"not a directory: {d}", items=[str(d)])
    preds, gts = _stems(pred_dir), _stems(gt_dir)
    orphans = sorted(set(preds) ^ set(gts))
    if orphans and not allow_missing:
        raise DataError(f"unmatched stems: {', '.join(orphans)}", items=orphans)
    rows = []
    for stem in sorted(set(preds) & set(gts)):
        g = binarize_mask(read_gray(gts[stem]))
        p = read_gray(preds[stem]).astype(np.float64) / 255.0
        rows.append(compute_metrics(_resize_prob(p, g.shape), g, metric_set))
    return aggregate(rows, dataset if dataset is not None else gt_dir.parent.name, metric_set)
