"""Weighted BCE + weighted IoU structure loss with deep supervision.

Pixel weights emphasise boundaries::

    w = 1 + 5 * |avgpool_31x31(G) - G|

The average is taken over the in-image part of each window, so a constant
mask gets w == 1 everywhere, borders included.
"""

from collections import namedtuple

import torch
import torch.nn.functional as F

from .errors import ShapeError

POOL_SIZE = 31
WEIGHT_GAIN = 5.0

LossBreakdown = namedtuple("LossBreakdown", "total l_wbce l_wiou per_head")


def _check_pair(logits, mask):
    if logits.shape != mask.shape:
        raise ShapeError(f"logits {tuple(logits.shape)} and mask {tuple(mask.shape)} differ")
    if logits.dim() != 4 or logits.shape[1] != 1:
        raise ShapeError(f"expected (B, 1, H, W), got {tuple(logits.shape)}")


def weight_map(mask):
    if mask.dim() != 4:
        raise ShapeError(f"expected mask of shape (B, 1, H, W), got {tuple(mask.shape)}")
    if not torch.all((mask == 0) | (mask == 1)):
        raise ValueError("ground-truth mask must be binary {0, 1}")
    local = F.avg_pool2d(mask, POOL_SIZE, stride=1, padding=POOL_SIZE // 2, count_include_pad=False)
    return 1 + WEIGHT_GAIN * torch.abs(local - mask)


def weighted_bce(logits, mask, weight=None):
    _check_pair(logits, mask)
    weight = weight_map(mask) if weight is None else weight
    bce = F.binary_cross_entropy_with_logits(logits, mask, reduction="none")
    per_sample = (weight * bce).sum(dim=(2, 3)) / weight.sum(dim=(2, 3))
    return per_sample.mean()


def weighted_iou_prob(prob, mask, weight):
    inter = (prob * mask * weight).sum(dim=(2, 3))
    union = ((prob + mask) * weight).sum(dim=(2, 3))
    return (1 - (inter + 1) / (union - inter + 1)).mean()


def weighted_iou(logits, mask, weight=None):
    _check_pair(logits, mask)
    weight = weight_map(mask) if weight is None else weight
    return weighted_iou_prob(torch.sigmoid(logits), mask, weight)


def structure_loss(logits, mask, weight=None):
    """Returns ``(l_wbce + l_wiou, l_wbce, l_wiou)`` sharing one weight map."""
    weight = weight_map(mask) if weight is None else weight
    bce = weighted_bce(logits, mask, weight)
    iou = weighted_iou(logits, mask, weight)
    return bce + iou, bce, iou


def total_loss(outputs, mask) -> LossBreakdown:
    if len(outputs) != 3:
        raise ShapeError(f"deep supervision expects 3 heads, got {len(outputs)}")
    weight = weight_map(mask)
    heads = [structure_loss(s, mask, weight) for s in outputs]
    total = heads[0][0] + heads[1][0] + heads[2][0]
    # l_wbce / l_wiou are head means, so l_wiou stays in [0, 1)
    return LossBreakdown(
        total=total,
        l_wbce=sum(h[1] for h in heads) / 3,
        l_wiou=sum(h[2] for h in heads) / 3,
        per_head=tuple(h[0] for h in heads),
    )
