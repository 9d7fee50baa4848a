"""Independent reference computations used only by the tests."""

from __future__ import annotations

import numpy as np


def scanline_intervals(vertices, ys: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Left/right x of a convex polygon at each scanline ``ys`` (nan where empty)."""
    v = np.asarray(vertices, dtype=float)
    xl = np.full(ys.shape, np.inf)
    xr = np.full(ys.shape, -np.inf)
    for (x0, y0), (x1, y1) in zip(v, np.roll(v, -1, axis=0)):
        if y0 == y1:
            continue
        lo, hi = min(y0, y1), max(y0, y1)
        hit = (ys >= lo) & (ys < hi)
        xs = x0 + (ys[hit] - y0) * (x1 - x0) / (y1 - y0)
        xl[hit] = np.minimum(xl[hit], xs)
        xr[hit] = np.maximum(xr[hit], xs)
    empty = xl > xr
    xl[empty] = np.nan
    xr[empty] = np.nan
    return xl, xr


def _count(xl, xr, lo, h, n):
    with np.errstate(invalid="ignore"):
        jmin = np.ceil((xl - lo) / h - 0.5)
        jmax = np.floor((xr - lo) / h - 0.5)
    jmin = np.clip(jmin, 0, n - 1)
    jmax = np.clip(jmax, 0, n - 1)
    c = jmax - jmin + 1
    c = np.where(np.isnan(c) | (xr < xl) | np.isnan(xl), 0, c)
    # centers beyond the grid are clipped above, so guard intervals fully outside
    c = np.where((xr < lo + 0.5 * h) | (xl > lo + (n - 0.5) * h), 0, c)
    return np.maximum(c, 0)


def raster_areas(a, b, n: int = 1000, lo: float = 0.0, hi: float = 1.0) -> tuple[float, float, float]:
    """Cell-center counts (scaled to area) of convex polygons a, b and a∩b on an n x n grid."""
    h = (hi - lo) / n
    ys = lo + (np.arange(n) + 0.5) * h
    al, ar = scanline_intervals(a, ys)
    bl, br = scanline_intervals(b, ys)
    ca = _count(al, ar, lo, h, n).sum()
    cb = _count(bl, br, lo, h, n).sum()
    il, ir = np.fmax(al, bl), np.fmin(ar, br)
    both = ~(np.isnan(al) | np.isnan(bl))
    il = np.where(both, il, np.nan)
    ir = np.where(both, ir, np.nan)
    ci = _count(il, ir, lo, h, n).sum()
    cell = h * h
    return ca * cell, cb * cell, ci * cell


def raster_iou(a, b, n: int = 1000, lo: float = 0.0, hi: float = 1.0) -> float:
    aa, ab, ai = raster_areas(a, b, n, lo, hi)
    union = aa + ab - ai
    return 0.0 if union == 0 else ai / union


def hbb_iou_ref(a, b) -> float:
    ax0, ay0, ax1, ay1 = a
    bx0, by0, bx1, by1 = b
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return inter / union if union > 0 else 0.0


def greedy_match_ref(preds, gts, tau, iou=hbb_iou_ref):
    """preds: list of (confidence, box); returns TP flags aligned with ``preds``."""
    mat = [[iou(p[1], g) for g in gts] for p in preds]
    ranked = sorted(range(len(preds)), key=lambda i: (-preds[i][0], i))
    used: set[int] = set()
    flags = [False] * len(preds)
    for i in ranked:
        cands = [(mat[i][j], -j) for j in range(len(gts)) if j not in used]
        if not cands:
            continue
        best_iou, neg_j = max(cands)
        if best_iou >= tau:
            used.add(-neg_j)
            flags[i] = True
    return flags


def ap_ref(images, tau, iou=hbb_iou_ref) -> float:
    """images: list of (preds, gts) with preds [(confidence, box), ...].

    AP as the sum over true positives (in global rank order) of
    1/n_gt times the best precision reached at that rank or later.
    """
    rows = []
    pos = 0
    n_gt = sum(len(g) for _, g in images)
    for preds, gts in images:
        flags = greedy_match_ref(preds, gts, tau, iou)
        for (conf, _), f in zip(preds, flags):
            rows.append((conf, pos, f))
            pos += 1
    rows.sort(key=lambda r: (-r[0], r[1]))
    precisions = []
    tp = 0
    for k, (_, _, f) in enumerate(rows, start=1):
        tp += f
        precisions.append(tp / k)
    total = 0.0
    for k, (_, _, f) in enumerate(rows):
        if f:
            total += max(precisions[k:]) / n_gt
    return total
