"""Slow, loop-based reference implementations used as test oracles.

Each one is a line-by-line transliteration of the original MATLAB evaluation
code (StructureMeasure.m, Emeasure.m, WFb.m, adaptive-F from the COD toolbox)
into plain Python, written without reusing anything from ``segunet.metrics``.
"""

import math
from fractions import Fraction

EPS = 2.220446049250313e-16  # MATLAB eps


def _cells(a):
    return [[float(v) for v in row] for row in a]


def _mean(xs):
    # exact rational mean, rounded once; a constant list returns its value
    return float(sum(Fraction(v) for v in xs) / len(xs))


def _std1(xs):
    # MATLAB std: normalised by n - 1, and 0 for a single element
    if len(xs) < 2:
        return 0.0
    m = _mean(xs)
    return math.sqrt(sum((x - m) ** 2 for x in xs) / (len(xs) - 1))


def _mround(x):
    return math.floor(x + 0.5) if x >= 0 else -math.floor(-x + 0.5)


# ---------------------------------------------------------------- S-measure


def _object(pred, gt):
    vals = [pred[i][j] for i in range(len(gt)) for j in range(len(gt[0])) if gt[i][j]]
    if not vals:
        return 0.0
    x = _mean(vals)
    return 2.0 * x / (x * x + 1.0 + _std1(vals) + EPS)


def _s_object(pred, gt):
    H, W = len(gt), len(gt[0])
    fg = [[pred[i][j] if gt[i][j] else 0.0 for j in range(W)] for i in range(H)]
    bg = [[0.0 if gt[i][j] else 1.0 - pred[i][j] for j in range(W)] for i in range(H)]
    notgt = [[not gt[i][j] for j in range(W)] for i in range(H)]
    u = sum(sum(1 for v in row if v) for row in gt) / (H * W)
    return u * _object(fg, gt) + (1 - u) * _object(bg, notgt)


def _ssim(pred, gt):
    vals_p = [v for row in pred for v in row]
    vals_g = [1.0 if v else 0.0 for row in gt for v in row]
    N = len(vals_p)
    if N == 0:
        return 0.0
    x, y = _mean(vals_p), _mean(vals_g)
    sx = sum((a - x) ** 2 for a in vals_p) / (N - 1 + EPS)
    sy = sum((b - y) ** 2 for b in vals_g) / (N - 1 + EPS)
    sxy = sum((a - x) * (b - y) for a, b in zip(vals_p, vals_g)) / (N - 1 + EPS)
    alpha = 4 * x * y * sxy
    beta = (x * x + y * y) * (sx + sy)
    if alpha != 0:
        return alpha / (beta + EPS)
    if alpha == 0 and beta == 0:
        return 1.0
    return 0.0


def _s_region(pred, gt):
    H, W = len(gt), len(gt[0])
    total = sum(1 for row in gt for v in row if v)
    # 1-based centroid, MATLAB round
    X = _mround(sum((j + 1) for i in range(H) for j in range(W) if gt[i][j]) / total)
    Y = _mround(sum((i + 1) for i in range(H) for j in range(W) if gt[i][j]) / total)
    area = W * H
    w1 = X * Y / area
    w2 = (W - X) * Y / area
    w3 = X * (H - Y) / area
    w4 = 1.0 - w1 - w2 - w3

    def crop(a, r0, r1, c0, c1):
        return [row[c0:c1] for row in a[r0:r1]]

    parts = [
        (w1, (0, Y, 0, X)),
        (w2, (0, Y, X, W)),
        (w3, (Y, H, 0, X)),
        (w4, (Y, H, X, W)),
    ]
    q = 0.0
    for w, box in parts:
        if w > 0:
            q += w * _ssim(crop(pred, *box), crop(gt, *box))
    return q


def s_measure(pred, gt, alpha=0.5):
    pred = _cells(pred)
    gt = [[bool(v) for v in row] for row in gt]
    H, W = len(gt), len(gt[0])
    y = sum(1 for row in gt for v in row if v) / (H * W)
    if y == 0:
        return 1.0 - _mean([v for row in pred for v in row])
    if y == 1:
        return _mean([v for row in pred for v in row])
    q = alpha * _s_object(pred, gt) + (1 - alpha) * _s_region(pred, gt)
    return max(q, 0.0)


# ---------------------------------------------------------------- E-measure


def enhanced_measure(fm, gt):
    """E-measure of a binary foreground map ``fm`` against ``gt`` (Emeasure.m)."""
    H, W = len(gt), len(gt[0])
    dfm = [1.0 if fm[i][j] else 0.0 for i in range(H) for j in range(W)]
    dgt = [1.0 if gt[i][j] else 0.0 for i in range(H) for j in range(W)]
    if sum(dgt) == 0:
        enhanced = [1.0 - v for v in dfm]
    elif sum(1 for v in dgt if v == 0) == 0:
        enhanced = dfm
    else:
        mu_fm, mu_gt = _mean(dfm), _mean(dgt)
        enhanced = []
        for a, b in zip(dfm, dgt):
            af, ag = a - mu_fm, b - mu_gt
            align = 2.0 * (ag * af) / (ag * ag + af * af + EPS)
            enhanced.append((align + 1) ** 2 / 4)
    return sum(enhanced) / (W * H - 1 + EPS)


def e_measure_mean(pred, gt):
    pred = _cells(pred)
    gt = [[bool(v) for v in row] for row in gt]
    scores = []
    for t in range(256):
        fm = [[pred[i][j] * 255 >= t for j in range(len(pred[0]))] for i in range(len(pred))]
        scores.append(enhanced_measure(fm, gt))
    return sum(scores) / 256


# ---------------------------------------------------------------- F-measures


def f_adaptive(pred, gt, beta2=0.3):
    pred = _cells(pred)
    gt = [[bool(v) for v in row] for row in gt]
    flat = [v for row in pred for v in row]
    thr = 2 * _mean(flat)
    if thr > 1:
        thr = 1.0
    num_rec = num_and = num_obj = 0
    for i in range(len(gt)):
        for j in range(len(gt[0])):
            lab = pred[i][j] >= thr
            num_rec += lab
            num_obj += gt[i][j]
            num_and += lab and gt[i][j]
    if num_and == 0:
        return 0.0
    pre, rec = num_and / num_rec, num_and / num_obj
    return (1 + beta2) * pre * rec / (beta2 * pre + rec)


def fspecial_gaussian(size=7, sigma=5.0):
    m = (size - 1) // 2
    h = [[math.exp(-(x * x + y * y) / (2 * sigma * sigma)) for x in range(-m, m + 1)] for y in range(-m, m + 1)]
    hmax = max(max(r) for r in h)
    h = [[0.0 if v < EPS * hmax else v for v in r] for r in h]
    s = sum(sum(r) for r in h)
    return [[v / s for v in r] for r in h]


def imfilter_zero(img, k):
    """Correlation with zero padding, output the same size as ``img``."""
    H, W = len(img), len(img[0])
    m = len(k) // 2
    out = [[0.0] * W for _ in range(H)]
    for i in range(H):
        for j in range(W):
            acc = 0.0
            for di in range(-m, m + 1):
                for dj in range(-m, m + 1):
                    ii, jj = i + di, j + dj
                    if 0 <= ii < H and 0 <= jj < W:
                        acc += k[di + m][dj + m] * img[ii][jj]
            out[i][j] = acc
    return out


def bwdist_bruteforce(gt):
    """Distance to, and location of, the nearest True pixel; ties -> smallest (col, row)."""
    H, W = len(gt), len(gt[0])
    fg = [(j, i) for j in range(W) for i in range(H) if gt[i][j]]
    dist = [[0.0] * W for _ in range(H)]
    idx = [[None] * W for _ in range(H)]
    for i in range(H):
        for j in range(W):
            best = None
            for (c, r) in fg:  # iterated in (col, row) order, strict < keeps the first
                d2 = (i - r) ** 2 + (j - c) ** 2
                if best is None or d2 < best[0]:
                    best = (d2, r, c)
            dist[i][j] = math.sqrt(best[0])
            idx[i][j] = (best[1], best[2])
    return dist, idx


def f_weighted(pred, gt, beta=1.0):
    pred = _cells(pred)
    gt = [[bool(v) for v in row] for row in gt]
    H, W = len(gt), len(gt[0])
    if not any(v for row in gt for v in row):
        return 0.0
    E = [[abs(pred[i][j] - (1.0 if gt[i][j] else 0.0)) for j in range(W)] for i in range(H)]
    dst, idx = bwdist_bruteforce(gt)
    Et = [[E[i][j] if gt[i][j] else E[idx[i][j][0]][idx[i][j][1]] for j in range(W)] for i in range(H)]
    EA = imfilter_zero(Et, fspecial_gaussian(7, 5.0))
    tpw, fpw, ew_fg = 0.0, 0.0, []
    n_fg = 0
    for i in range(H):
        for j in range(W):
            m = EA[i][j] if (gt[i][j] and EA[i][j] < E[i][j]) else E[i][j]
            b = 1.0 if gt[i][j] else 2 - 1 * math.exp(math.log(1 - 0.5) / 5 * dst[i][j])
            ew = m * b
            if gt[i][j]:
                ew_fg.append(ew)
                n_fg += 1
            else:
                fpw += ew
    tpw = n_fg - sum(ew_fg)
    R = 1 - _mean(ew_fg)
    P = tpw / (EPS + tpw + fpw)
    return (1 + beta ** 2) * (R * P) / (EPS + R + beta * P)


# ---------------------------------------------------------------- counting


def dice_iou_counts(pb, gb):
    inter = sum(1 for a, b in zip(pb, gb) if a and b)
    sp, sg = sum(pb), sum(gb)
    union = sp + sg - inter
    dice = 1.0 if sp + sg == 0 else 2 * inter / (sp + sg)
    iou = 1.0 if union == 0 else inter / union
    return dice, iou


# ---------------------------------------------------------------- loss


def sliding_average(mask, k=31):
    """Average over the in-image part of a k x k window centred at each pixel."""
    H, W = len(mask), len(mask[0])
    r = k // 2
    out = [[0.0] * W for _ in range(H)]
    for i in range(H):
        for j in range(W):
            vals = [mask[a][b] for a in range(max(0, i - r), min(H, i + r + 1)) for b in range(max(0, j - r), min(W, j + r + 1))]
            out[i][j] = sum(vals) / len(vals)
    return out


def structure_loss_scalar(logits, mask):
    """Single-sample weighted BCE and weighted IoU with scalar loops."""
    avg = sliding_average(mask)
    H, W = len(mask), len(mask[0])
    sw = swb = inter = union = 0.0
    for i in range(H):
        for j in range(W):
            x, g = logits[i][j], mask[i][j]
            w = 1 + 5 * abs(avg[i][j] - g)
            # log(1 + e^x) - g x, stable form
            bce = max(x, 0.0) - x * g + math.log1p(math.exp(-abs(x)))
            p = 1 / (1 + math.exp(-x))
            sw += w
            swb += w * bce
            inter += w * p * g
            union += w * (p + g)
    wbce = swb / sw
    wiou = 1 - (inter + 1) / (union - inter + 1)
    return wbce, wiou


# ---------------------------------------------------------------- parameter counts


def linear_count(d_in, d_out, bias=True):
    return d_in * d_out + (d_out if bias else 0)


def adapter_count(d, b):
    return linear_count(d, b) + linear_count(b, d)


def hiera_count(channels, depths, mlp_ratio=4.0, pos_grid=16):
    """Closed-form count for the channels-last hierarchical encoder, block by block."""
    c1 = channels[0]
    total = 3 * c1 * 7 * 7 + c1 + c1 * pos_grid * pos_grid
    dim = c1
    for stage, depth in enumerate(depths):
        out = channels[stage]
        for _ in range(depth):
            hidden = int(out * mlp_ratio)
            total += 2 * dim  # norm1
            total += linear_count(dim, 3 * out) + linear_count(out, out)
            if dim != out:
                total += linear_count(dim, out)  # shortcut projection
            total += 2 * out  # norm2
            total += linear_count(out, hidden) + linear_count(hidden, out)
            dim = out
    return total
