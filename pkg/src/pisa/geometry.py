"""Box arithmetic: IoU, regression-offset codecs, smooth-L1, clipping.

Boxes use the corner ``(x1, y1, x2, y2)`` convention throughout; conversion
to center/size form happens only inside the offset codecs. All functions
accept a single box (shape ``(4,)``) or a stack of boxes (``(N, 4)``) and
vectorize over the leading dimension.
"""

from __future__ import annotations

import math

import numpy as np

from pisa._kernels import pairwise_iou

__all__ = [
    "LOG_EXTENT_CLAMP",
    "apply_delta",
    "box_area",
    "clip_boxes",
    "elementwise_iou",
    "encode_delta",
    "iou",
    "pairwise_iou",
    "smooth_l1",
    "smooth_l1_grad",
]

# exp() guard for predicted log-scale offsets, common detection practice
LOG_EXTENT_CLAMP = math.log(1000.0 / 16.0)


def box_area(boxes: np.ndarray) -> np.ndarray:
    """Area of each box; degenerate boxes clamp to 0."""
    boxes = np.asarray(boxes, dtype=np.float64)
    w = np.maximum(0.0, boxes[..., 2] - boxes[..., 0])
    h = np.maximum(0.0, boxes[..., 3] - boxes[..., 1])
    return w * h


def iou(a, b) -> float:
    """Intersection-over-union of two single boxes.

    Symmetric, in [0, 1]; zero-area boxes are legal and give 0.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    union = box_area(a) + box_area(b) - inter
    if union <= 0.0:
        return 0.0
    return float(inter / union)


def elementwise_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-by-row IoU of two aligned (N, 4) box arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.maximum(0.0, np.minimum(a[:, 2], b[:, 2]) - np.maximum(a[:, 0], b[:, 0]))
    ih = np.maximum(0.0, np.minimum(a[:, 3], b[:, 3]) - np.maximum(a[:, 1], b[:, 1]))
    inter = iw * ih
    union = box_area(a) + box_area(b) - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0.0)
    return out


def _to_center_form(boxes: np.ndarray):
    w = boxes[..., 2] - boxes[..., 0]
    h = boxes[..., 3] - boxes[..., 1]
    cx = boxes[..., 0] + 0.5 * w
    cy = boxes[..., 1] + 0.5 * h
    return cx, cy, w, h


def encode_delta(src, target) -> np.ndarray:
    """Encode ``target`` relative to ``src`` as (dx, dy, dw, dh) offsets.

    dx, dy are center shifts normalized by the source width/height; dw, dh
    are log size ratios. Inverse of :func:`apply_delta`. Both boxes must have
    strictly positive extent.
    """
    src = np.asarray(src, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    scx, scy, sw, sh = _to_center_form(src)
    tcx, tcy, tw, th = _to_center_form(target)
    if np.any(sw <= 0.0) or np.any(sh <= 0.0):
        raise ValueError("encode_delta requires source boxes with positive extent")
    if np.any(tw <= 0.0) or np.any(th <= 0.0):
        raise ValueError("encode_delta requires target boxes with positive extent")
    dx = (tcx - scx) / sw
    dy = (tcy - scy) / sh
    dw = np.log(tw / sw)
    dh = np.log(th / sh)
    return np.stack([dx, dy, dw, dh], axis=-1)


def apply_delta(src, delta, clamp: float = LOG_EXTENT_CLAMP) -> np.ndarray:
    """Decode (dx, dy, dw, dh) offsets on top of ``src`` boxes.

    dw/dh are clamped to ``clamp`` before exponentiation so that extreme
    regression outputs stay finite.
    """
    src = np.asarray(src, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    scx, scy, sw, sh = _to_center_form(src)
    if np.any(sw <= 0.0) or np.any(sh <= 0.0):
        raise ValueError("apply_delta requires source boxes with positive extent")
    dx, dy = delta[..., 0], delta[..., 1]
    dw = np.minimum(delta[..., 2], clamp)
    dh = np.minimum(delta[..., 3], clamp)
    cx = scx + dx * sw
    cy = scy + dy * sh
    w = sw * np.exp(dw)
    h = sh * np.exp(dh)
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=-1)


def smooth_l1(x) -> np.ndarray:
    """Smooth-L1: 0.5 x^2 for |x| < 1, |x| - 0.5 otherwise."""
    x = np.asarray(x, dtype=np.float64)
    ax = np.abs(x)
    return np.where(ax < 1.0, 0.5 * x * x, ax - 0.5)


def smooth_l1_grad(x) -> np.ndarray:
    """Derivative of smooth-L1; continuous at |x| = 1."""
    x = np.asarray(x, dtype=np.float64)
    return np.clip(x, -1.0, 1.0)


def clip_boxes(boxes, width: float, height: float) -> np.ndarray:
    """Clip box coordinates to the image extent [0, width] x [0, height]."""
    boxes = np.asarray(boxes, dtype=np.float64)
    out = boxes.copy()
    out[..., 0::2] = np.clip(out[..., 0::2], 0.0, float(width))
    out[..., 1::2] = np.clip(out[..., 1::2], 0.0, float(height))
    return out
