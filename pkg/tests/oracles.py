"""Naive reference implementations used as independent oracles.

Everything here is written as literal loops over the mathematical
definitions. Deliberately slow; only ever run on small shapes.
"""

import math

import numpy as np


def direct_conv2d(x, w, b, stride, pad, dilation):
    """Septuple-loop cross-correlation. x: NCHW, w: OIHW."""
    n, ci, h, wd = x.shape
    co, _, kh, kw = w.shape
    sh, sw = stride
    ph, pw = pad
    dh, dw = dilation
    oh = (h + 2 * ph - dh * (kh - 1) - 1) // sh + 1
    ow = (wd + 2 * pw - dw * (kw - 1) - 1) // sw + 1
    y = np.zeros((n, co, oh, ow), dtype=x.dtype)
    for ni in range(n):
        for oc in range(co):
            for r in range(oh):
                for c in range(ow):
                    acc = 0.0
                    for ic in range(ci):
                        for i in range(kh):
                            for j in range(kw):
                                rr = r * sh - ph + i * dh
                                cc = c * sw - pw + j * dw
                                if 0 <= rr < h and 0 <= cc < wd:
                                    acc += x[ni, ic, rr, cc] * w[oc, ic, i, j]
                    y[ni, oc, r, c] = acc + (b[oc] if b is not None else 0.0)
    return y


def direct_maxpool2x2(x):
    """Window-scan max pool with explicit row-major tie-break."""
    n, c, h, w = x.shape
    y = np.zeros((n, c, h // 2, w // 2), dtype=x.dtype)
    for ni in range(n):
        for ci in range(c):
            for r in range(h // 2):
                for cc in range(w // 2):
                    best = -math.inf
                    for i in range(2):
                        for j in range(2):
                            v = x[ni, ci, 2 * r + i, 2 * cc + j]
                            if v > best:
                                best = v
                    y[ni, ci, r, cc] = best
    return y


def direct_spatial_conv(x, kernel, direction):
    """Literal row recurrence: x'[i,j,k] = relu(sum_m sum_n x'[m,j+-1,k+n-off]*K[m,i,n]) + x[i,j,k].

    kernel: (C, C, w) indexed [source channel m, target channel i, tap n];
    the first/last row is copied unchanged and the recurrence consumes the
    already-updated neighbour row. Zero padding at the horizontal borders.
    """
    n, c, h, wd = x.shape
    cw = kernel.shape[2]
    off = cw // 2
    y = x.astype(np.float64).copy()
    rows = range(1, h) if direction == "down" else range(h - 2, -1, -1)
    prev_of = (lambda j: j - 1) if direction == "down" else (lambda j: j + 1)
    for ni in range(n):
        for j in rows:
            jp = prev_of(j)
            new_row = np.zeros((c, wd))
            for i in range(c):
                for k in range(wd):
                    acc = 0.0
                    for m in range(c):
                        for t in range(cw):
                            kk = k + t - off
                            if 0 <= kk < wd:
                                acc += y[ni, m, jp, kk] * kernel[m, i, t]
                    new_row[i, k] = max(acc, 0.0) + x[ni, i, j, k]
            y[ni, :, j, :] = new_row
    return y


def point_segment_dist_sq(px, py, ax, ay, bx, by):
    """Squared distance from point p to segment ab (scalar math)."""
    dx = bx - ax
    dy = by - ay
    dd = dx * dx + dy * dy
    if dd == 0.0:
        ex = px - ax
        ey = py - ay
        return ex * ex + ey * ey
    t = ((px - ax) * dx + (py - ay) * dy) / dd
    if t < 0.0:
        t = 0.0
    elif t > 1.0:
        t = 1.0
    ex = px - (ax + t * dx)
    ey = py - (ay + t * dy)
    return ex * ex + ey * ey


def direct_stroke_mask(points, h, w, width):
    """Per-pixel brute force: pixel (r, c) set iff dist((c, r), polyline) <= width/2."""
    rad_sq = (width / 2.0) ** 2
    mask = np.zeros((h, w), dtype=bool)
    for r in range(h):
        for c in range(w):
            for (ax, ay), (bx, by) in zip(points[:-1], points[1:]):
                if point_segment_dist_sq(float(c), float(r), ax, ay, bx, by) <= rad_sq:
                    mask[r, c] = True
                    break
    return mask
