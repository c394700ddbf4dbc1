"""Polyline stroke rasterization by exact point-to-segment distance.

The contract: pixel (r, c) — its center taken at coordinates (x=c, y=r) — is
inside the stroke iff its Euclidean distance to the polyline (the union of its
segments) is at most width/2. The per-segment bounding-box optimization below
evaluates the same IEEE double expressions as a scalar per-pixel loop, so the
result is pixel-exact against a brute-force oracle.
"""

from __future__ import annotations

import numpy as np


def stroke_mask(points: np.ndarray, h: int, w: int, width: float) -> np.ndarray:
    """points: (k, 2) array of (x, y); returns (h, w) bool mask."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] < 2 or pts.shape[1] != 2:
        raise ValueError(f"polyline needs at least 2 (x, y) points, got shape {pts.shape}")
    rad = width / 2.0
    rad_sq = rad * rad
    mask = np.zeros((h, w), dtype=bool)
    for (ax, ay), (bx, by) in zip(pts[:-1], pts[1:]):
        c0 = max(0, int(np.floor(min(ax, bx) - rad)))
        c1 = min(w - 1, int(np.ceil(max(ax, bx) + rad)))
        r0 = max(0, int(np.floor(min(ay, by) - rad)))
        r1 = min(h - 1, int(np.ceil(max(ay, by) + rad)))
        if c0 > c1 or r0 > r1:
            continue
        px = np.arange(c0, c1 + 1, dtype=np.float64)[None, :]
        py = np.arange(r0, r1 + 1, dtype=np.float64)[:, None]
        dx = bx - ax
        dy = by - ay
        dd = dx * dx + dy * dy
        if dd == 0.0:
            ex = px - ax
            ey = py - ay
            d_sq = ex * ex + ey * ey
        else:
            t = np.clip(((px - ax) * dx + (py - ay) * dy) / dd, 0.0, 1.0)
            ex = px - (ax + t * dx)
            ey = py - (ay + t * dy)
            d_sq = ex * ex + ey * ey
        mask[r0:r1 + 1, c0:c1 + 1] |= d_sq <= rad_sq
    return mask


def point_to_polyline_distance(x: float, y: float, points: np.ndarray) -> float:
    """Exact distance from a point to the polyline."""
    pts = np.asarray(points, dtype=np.float64)
    best = np.inf
    for (ax, ay), (bx, by) in zip(pts[:-1], pts[1:]):
        dx = bx - ax
        dy = by - ay
        dd = dx * dx + dy * dy
        if dd == 0.0:
            t = 0.0
        else:
            t = min(1.0, max(0.0, ((x - ax) * dx + (y - ay) * dy) / dd))
        ex = x - (ax + t * dx)
        ey = y - (ay + t * dy)
        best = min(best, ex * ex + ey * ey)
    return float(np.sqrt(best))
