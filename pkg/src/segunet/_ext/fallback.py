"""Pure NumPy implementations of the metric kernels.

Same signatures and results as the Cython module ``_kernels``; used when the
extension is not built or ``SEGUNET_PURE_PYTHON=1`` is set.
"""

import numpy as np

EPS = np.spacing(1)


def emeasure_curve(pred, gt):
    """Enhanced-alignment score for every threshold t = 0..255.

    ``pred`` is uint8 (already quantised as floor(255 * p)), ``gt`` bool.
    Entry t scores the binarisation ``pred >= t``.
    """
    pred = np.asarray(pred, dtype=np.uint8).ravel()
    gt = np.asarray(gt, dtype=bool).ravel()
    n = pred.size
    hist_fg = np.bincount(pred[gt], minlength=256).astype(np.float64)
    hist_bg = np.bincount(pred[~gt], minlength=256).astype(np.float64)
    # counts of pixels with pred >= t
    fg_fg = np.cumsum(hist_fg[::-1])[::-1]
    fg_bg = np.cumsum(hist_bg[::-1])[::-1]
    n_gt = float(gt.sum())
    pred_fg = fg_fg + fg_bg

    if n_gt == 0:
        enhanced = n - pred_fg
    elif n_gt == n:
        enhanced = pred_fg
    else:
        mu_pred = pred_fg / n
        mu_gt = n_gt / n
        parts = (
            (fg_fg, 1 - mu_pred, 1 - mu_gt),
            (fg_bg, 1 - mu_pred, -mu_gt),
            (n_gt - fg_fg, -mu_pred, 1 - mu_gt),
            (n - n_gt - fg_bg, -mu_pred, -mu_gt),
        )
        enhanced = np.zeros(256)
        for count, a, b in parts:
            align = 2 * a * b / (a * a + b * b + EPS)
            enhanced += count * (align + 1) ** 2 / 4
    return enhanced / (n - 1 + EPS)


def nearest_foreground(fg):
    """Exact Euclidean distance to the nearest True pixel, with its coordinates.

    Returns ``(dist, rows, cols)``. Ties go to the smallest column, then the
    smallest row. Requires at least one True pixel.
    """
    fg = np.asarray(fg, dtype=bool)
    H, W = fg.shape
    if not fg.any():
        raise ValueError("nearest_foreground needs at least one foreground pixel")
    r = np.arange(H)[:, None]
    # column pass: nearest foreground row within each column, upper one on ties
    up = np.maximum.accumulate(np.where(fg, r, -1), axis=0)
    down = np.minimum.accumulate(np.where(fg, r, H + W + H)[::-1], axis=0)[::-1]
    d_up = np.where(up >= 0, r - up, np.iinfo(np.int64).max // 4)
    d_down = down - r
    near_row = np.where(d_up <= d_down, up, down)
    has = near_row <= H - 1
    has &= near_row >= 0
    g2 = np.where(has, (r - near_row).astype(np.float64) ** 2, np.inf)

    q = np.arange(W)
    dx2 = (q[:, None] - q[None, :]).astype(np.float64) ** 2
    dist2 = np.empty((H, W))
    cols = np.empty((H, W), dtype=np.int64)
    for y in range(H):
        cost = dx2 + g2[y][None, :]
        best = np.argmin(cost, axis=1)
        cols[y] = best
        dist2[y] = cost[q, best]
    rows = near_row[np.arange(H)[:, None], cols]
    return np.sqrt(dist2), rows.astype(np.int64), cols
