# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled metric kernels. Must stay result-identical to ``fallback.py``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, INFINITY

cnp.import_array()

cdef double EPS = np.spacing(1)


def emeasure_curve(pred, gt):
    cdef const cnp.uint8_t[::1] p = np.ascontiguousarray(pred, dtype=np.uint8).ravel()
    cdef const cnp.uint8_t[::1] g = np.ascontiguousarray(gt, dtype=bool).ravel().view(np.uint8)
    cdef Py_ssize_t n = p.shape[0], i
    cdef int t
    cdef double hist_fg[256]
    cdef double hist_bg[256]
    for t in range(256):
        hist_fg[t] = 0
        hist_bg[t] = 0
    for i in range(n):
        if g[i]:
            hist_fg[p[i]] += 1
        else:
            hist_bg[p[i]] += 1
    cdef double n_gt = 0
    for t in range(256):
        n_gt += hist_fg[t]

    out = np.empty(256, dtype=np.float64)
    cdef double[::1] o = out
    cdef double fg_fg = 0, fg_bg = 0, pred_fg, mu_p, mu_g, total, nn = <double>n
    cdef double a_f, a_b, b_f, b_b
    for t in range(255, -1, -1):
        fg_fg += hist_fg[t]
        fg_bg += hist_bg[t]
        pred_fg = fg_fg + fg_bg
        if n_gt == 0:
            total = nn - pred_fg
        elif n_gt == nn:
            total = pred_fg
        else:
            mu_p = pred_fg / nn
            mu_g = n_gt / nn
            a_f = 1 - mu_p
            a_b = -mu_p
            b_f = 1 - mu_g
            b_b = -mu_g
            total = (fg_fg * _enhanced(a_f, b_f) + fg_bg * _enhanced(a_f, b_b)
                     + (n_gt - fg_fg) * _enhanced(a_b, b_f) + (nn - n_gt - fg_bg) * _enhanced(a_b, b_b))
        o[t] = total / (nn - 1 + EPS)
    return out


cdef inline double _enhanced(double a, double b) nogil:
    cdef double align = 2 * a * b / (a * a + b * b + EPS)
    return (align + 1) * (align + 1) / 4


def nearest_foreground(fg):
    mask = np.ascontiguousarray(fg, dtype=bool)
    if not mask.any():
        raise ValueError("nearest_foreground needs at least one foreground pixel")
    cdef const cnp.uint8_t[:, ::1] m = mask.view(np.uint8)
    cdef Py_ssize_t H = m.shape[0], W = m.shape[1], y, x, q, last
    near = np.full((H, W), -1, dtype=np.int64)
    cdef cnp.int64_t[:, ::1] nr = near
    g2_arr = np.empty((H, W), dtype=np.float64)
    cdef double[:, ::1] g2 = g2_arr

    # column pass, upper pixel wins ties
    for x in range(W):
        last = -1
        for y in range(H):
            if m[y, x]:
                last = y
            nr[y, x] = last
        last = -1
        for y in range(H - 1, -1, -1):
            if m[y, x]:
                last = y
            if last >= 0 and (nr[y, x] < 0 or last - y < y - nr[y, x]):
                nr[y, x] = last
        for y in range(H):
            if nr[y, x] >= 0:
                g2[y, x] = <double>((y - nr[y, x]) * (y - nr[y, x]))
            else:
                g2[y, x] = INFINITY

    dist = np.empty((H, W), dtype=np.float64)
    rows = np.empty((H, W), dtype=np.int64)
    cols = np.empty((H, W), dtype=np.int64)
    cdef double[:, ::1] d = dist
    cdef cnp.int64_t[:, ::1] rr = rows
    cdef cnp.int64_t[:, ::1] cc = cols
    env_arr = np.empty(W, dtype=np.int64)
    z_arr = np.empty(W + 1, dtype=np.float64)
    cdef cnp.int64_t[::1] env = env_arr
    cdef double[::1] z = z_arr
    cdef Py_ssize_t k, v
    cdef double s
    # row pass: lower envelope of parabolas (x - q)^2 + g2[q]. At an exact
    # crossing the earlier (smaller) column is kept, matching argmin order.
    for y in range(H):
        k = -1
        for q in range(W):
            if g2[y, q] == INFINITY:
                continue
            while k >= 0:
                v = env[k]
                s = ((g2[y, q] + q * q) - (g2[y, v] + v * v)) / (2.0 * (q - v))
                if s <= z[k]:
                    k -= 1
                else:
                    break
            k += 1
            env[k] = q
            z[k] = -INFINITY if k == 0 else s
            z[k + 1] = INFINITY
        if k < 0:
            continue
        k = 0
        for x in range(W):
            while z[k + 1] < x:
                k += 1
            q = env[k]
            d[y, x] = sqrt((x - q) * (x - q) + g2[y, q])
            cc[y, x] = q
            rr[y, x] = nr[y, q]
    return dist, rows, cols
