"""Box overlap and distance primitives.

Scalar functions take :class:`~graphloc.scene.BBox` (or any 4-sequence
``x1, y1, x2, y2``); the ``*_matrix`` variants take ``(n, 4)`` arrays and
return all pairwise values.
"""
from __future__ import annotations

import math

import numpy as np

from .scene import BBox


def _xyxy(b) -> tuple[float, float, float, float]:
    if isinstance(b, BBox):
        return b.as_tuple()
    x1, y1, x2, y2 = b
    return float(x1), float(y1), float(x2), float(y2)


def _enclosing(a, b):
    ax1, ay1, ax2, ay2 = a
    bx1, by1, bx2, by2 = b
    x0, y0 = min(ax1, bx1), min(ay1, by1)
    return x0, y0, max(ax2, bx2) - x0, max(ay2, by2) - y0


def iou(a, b) -> float:
    a, b = _xyxy(a), _xyxy(b)
    x0, y0, ew, eh = _enclosing(a, b)
    if ew <= 0 or eh <= 0:
        return 0.0
    # IoU is invariant to per-axis scaling; working in the enclosing box's
    # unit frame keeps tiny boxes from underflowing to zero area
    ax1, ax2, bx1, bx2 = ((v - x0) / ew for v in (a[0], a[2], b[0], b[2]))
    ay1, ay2, by1, by2 = ((v - y0) / eh for v in (a[1], a[3], b[1], b[3]))
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / union if union > 0 else 0.0


def ciou(a, b) -> float:
    """Complete IoU: IoU minus centre-distance and aspect-ratio penalties."""
    a, b = _xyxy(a), _xyxy(b)
    ax1, ay1, ax2, ay2 = a
    bx1, by1, bx2, by2 = b
    u = iou(a, b)
    _, _, ew, eh = _enclosing(a, b)
    s = max(ew, eh)
    rho2 = (((ax1 + ax2) - (bx1 + bx2)) / s) ** 2 / 4.0 + (((ay1 + ay2) - (by1 + by2)) / s) ** 2 / 4.0
    c2 = (ew / s) ** 2 + (eh / s) ** 2
    v = (4.0 / math.pi**2) * (
        math.atan((ax2 - ax1) / (ay2 - ay1)) - math.atan((bx2 - bx1) / (by2 - by1))
    ) ** 2
    denom = (1.0 - u) + v
    alpha = v / denom if denom > 0 else 0.0
    return u - rho2 / c2 - alpha * v


def center_distance(a, b) -> float:
    ax1, ay1, ax2, ay2 = _xyxy(a)
    bx1, by1, bx2, by2 = _xyxy(b)
    return math.hypot(0.5 * (ax1 + ax2) - 0.5 * (bx1 + bx2), 0.5 * (ay1 + ay2) - 0.5 * (by1 + by2))


def _pairwise_frame(A, B):
    x0 = np.minimum(A[:, None, 0], B[None, :, 0])
    y0 = np.minimum(A[:, None, 1], B[None, :, 1])
    ew = np.maximum(A[:, None, 2], B[None, :, 2]) - x0
    eh = np.maximum(A[:, None, 3], B[None, :, 3]) - y0
    return x0, y0, ew, eh


def iou_matrix(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    A = np.asarray(A, dtype=np.float64).reshape(-1, 4)
    B = np.asarray(B, dtype=np.float64).reshape(-1, 4)
    x0, y0, ew, eh = _pairwise_frame(A, B)
    ok = (ew > 0) & (eh > 0)
    ew, eh = np.where(ok, ew, 1.0), np.where(ok, eh, 1.0)
    ax1, ax2 = (A[:, None, 0] - x0) / ew, (A[:, None, 2] - x0) / ew
    bx1, bx2 = (B[None, :, 0] - x0) / ew, (B[None, :, 2] - x0) / ew
    ay1, ay2 = (A[:, None, 1] - y0) / eh, (A[:, None, 3] - y0) / eh
    by1, by2 = (B[None, :, 1] - y0) / eh, (B[None, :, 3] - y0) / eh
    iw = np.clip(np.minimum(ax2, bx2) - np.maximum(ax1, bx1), 0, None)
    ih = np.clip(np.minimum(ay2, by2) - np.maximum(ay1, by1), 0, None)
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return np.divide(inter, union, out=np.zeros_like(inter), where=ok & (union > 0))


def ciou_matrix(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    A = np.asarray(A, dtype=np.float64).reshape(-1, 4)
    B = np.asarray(B, dtype=np.float64).reshape(-1, 4)
    u = iou_matrix(A, B)
    _, _, ew, eh = _pairwise_frame(A, B)
    s = np.maximum(ew, eh)
    sa = (A[:, :2] + A[:, 2:])
    sb = (B[:, :2] + B[:, 2:])
    d = (sa[:, None, :] - sb[None, :, :]) / s[..., None]
    rho2 = (d**2).sum(-1) / 4.0
    c2 = (ew / s) ** 2 + (eh / s) ** 2
    ata = np.arctan((A[:, 2] - A[:, 0]) / (A[:, 3] - A[:, 1]))
    atb = np.arctan((B[:, 2] - B[:, 0]) / (B[:, 3] - B[:, 1]))
    v = (4.0 / np.pi**2) * (ata[:, None] - atb[None, :]) ** 2
    denom = (1.0 - u) + v
    alpha = np.divide(v, denom, out=np.zeros_like(v), where=denom > 0)
    return u - rho2 / c2 - alpha * v


def center_distance_matrix(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    A = np.asarray(A, dtype=np.float64).reshape(-1, 4)
    B = np.asarray(B, dtype=np.float64).reshape(-1, 4)
    ca = 0.5 * (A[:, :2] + A[:, 2:])
    cb = 0.5 * (B[:, :2] + B[:, 2:])
    return np.sqrt(((ca[:, None, :] - cb[None, :, :]) ** 2).sum(-1))
