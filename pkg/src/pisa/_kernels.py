"""Hot numeric kernels: pairwise IoU and greedy NMS with suppressor tracking.

Both kernels exist in two variants: a pure-numpy implementation and a
numba ``@njit`` version. The active variant is chosen at import time by the
``PISA_NUMBA`` environment variable ("0"/"false" forces the numpy path;
anything else uses numba when it is importable). ``benchmarks/bench_kernels.py``
times the two paths against each other.

The two variants perform the same floating-point operations in the same
order, so they produce bit-identical results.
"""

from __future__ import annotations

import os

import numpy as np


def numba_requested() -> bool:
    flag = os.environ.get("PISA_NUMBA", "1").strip().lower()
    return flag not in ("0", "false", "off", "no")


def pairwise_iou_numpy(boxes1: np.ndarray, boxes2: np.ndarray) -> np.ndarray:
    """IoU matrix of shape (N, M) for two corner-format box arrays.

    Degenerate (zero-area) boxes yield IoU 0 against everything.
    """
    boxes1 = np.asarray(boxes1, dtype=np.float64).reshape(-1, 4)
    boxes2 = np.asarray(boxes2, dtype=np.float64).reshape(-1, 4)

    area1 = (boxes1[:, 2] - boxes1[:, 0]) * (boxes1[:, 3] - boxes1[:, 1])
    area2 = (boxes2[:, 2] - boxes2[:, 0]) * (boxes2[:, 3] - boxes2[:, 1])

    ix1 = np.maximum(boxes1[:, None, 0], boxes2[None, :, 0])
    iy1 = np.maximum(boxes1[:, None, 1], boxes2[None, :, 1])
    ix2 = np.minimum(boxes1[:, None, 2], boxes2[None, :, 2])
    iy2 = np.minimum(boxes1[:, None, 3], boxes2[None, :, 3])

    iw = np.maximum(0.0, ix2 - ix1)
    ih = np.maximum(0.0, iy2 - iy1)
    inter = iw * ih
    union = area1[:, None] + area2[None, :] - inter

    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0.0)
    return out


def nms_suppress_numpy(boxes: np.ndarray, scores: np.ndarray, iou_thr: float) -> np.ndarray:
    """Greedy NMS that records which kept box suppressed each input box.

    Boxes are visited in descending score order (ties broken by lower index).
    A box is suppressed when its IoU with an already kept box is strictly
    greater than ``iou_thr``.

    Returns an int64 array ``suppressor`` of length N: ``suppressor[i] == i``
    for kept boxes, otherwise the index of the kept box that removed box i.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    n = boxes.shape[0]
    order = np.argsort(-scores, kind="stable")

    x1, y1, x2, y2 = boxes[:, 0], boxes[:, 1], boxes[:, 2], boxes[:, 3]
    areas = (x2 - x1) * (y2 - y1)

    suppressor = np.full(n, -1, dtype=np.int64)
    for oi in range(n):
        i = order[oi]
        if suppressor[i] != -1:
            continue
        suppressor[i] = i
        rest = order[oi + 1:]
        rest = rest[suppressor[rest] == -1]
        if rest.size == 0:
            continue
        iw = np.maximum(0.0, np.minimum(x2[i], x2[rest]) - np.maximum(x1[i], x1[rest]))
        ih = np.maximum(0.0, np.minimum(y2[i], y2[rest]) - np.maximum(y1[i], y1[rest]))
        inter = iw * ih
        union = areas[i] + areas[rest] - inter
        iou = np.zeros_like(inter)
        np.divide(inter, union, out=iou, where=union > 0.0)
        suppressor[rest[iou > iou_thr]] = i
    return suppressor


def _build_numba_kernels():
    from numba import njit

    @njit(cache=True)
    def _pairwise_iou(boxes1, boxes2):
        n = boxes1.shape[0]
        m = boxes2.shape[0]
        out = np.zeros((n, m), dtype=np.float64)
        for i in range(n):
            a1 = (boxes1[i, 2] - boxes1[i, 0]) * (boxes1[i, 3] - boxes1[i, 1])
            for j in range(m):
                iw = min(boxes1[i, 2], boxes2[j, 2]) - max(boxes1[i, 0], boxes2[j, 0])
                if iw <= 0.0:
                    continue
                ih = min(boxes1[i, 3], boxes2[j, 3]) - max(boxes1[i, 1], boxes2[j, 1])
                if ih <= 0.0:
                    continue
                inter = iw * ih
                a2 = (boxes2[j, 2] - boxes2[j, 0]) * (boxes2[j, 3] - boxes2[j, 1])
                union = a1 + a2 - inter
                if union > 0.0:
                    out[i, j] = inter / union
        return out

    @njit(cache=True)
    def _nms_suppress(boxes, scores, iou_thr):
        n = boxes.shape[0]
        order = np.argsort(-scores, kind="mergesort")
        areas = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
        suppressor = np.full(n, -1, dtype=np.int64)
        for oi in range(n):
            i = order[oi]
            if suppressor[i] != -1:
                continue
            suppressor[i] = i
            for oj in range(oi + 1, n):
                j = order[oj]
                if suppressor[j] != -1:
                    continue
                iw = min(boxes[i, 2], boxes[j, 2]) - max(boxes[i, 0], boxes[j, 0])
                if iw <= 0.0:
                    continue
                ih = min(boxes[i, 3], boxes[j, 3]) - max(boxes[i, 1], boxes[j, 1])
                if ih <= 0.0:
                    continue
                inter = iw * ih
                union = areas[i] + areas[j] - inter
                if union > 0.0 and inter / union > iou_thr:
                    suppressor[j] = i
        return suppressor

    def pairwise_iou_numba(boxes1, boxes2):
        b1 = np.ascontiguousarray(np.asarray(boxes1, dtype=np.float64).reshape(-1, 4))
        b2 = np.ascontiguousarray(np.asarray(boxes2, dtype=np.float64).reshape(-1, 4))
        return _pairwise_iou(b1, b2)

    def nms_suppress_numba(boxes, scores, iou_thr):
        b = np.ascontiguousarray(np.asarray(boxes, dtype=np.float64).reshape(-1, 4))
        s = np.ascontiguousarray(np.asarray(scores, dtype=np.float64).reshape(-1))
        return _nms_suppress(b, s, float(iou_thr))

    return pairwise_iou_numba, nms_suppress_numba


NUMBA_ACTIVE = False
if numba_requested():
    try:
        pairwise_iou, nms_suppress = _build_numba_kernels()
        NUMBA_ACTIVE = True
    except ImportError:
        pairwise_iou = pairwise_iou_numpy
        nms_suppress = nms_suppress_numpy
else:
    pairwise_iou = pairwise_iou_numpy
    nms_suppress = nms_suppress_numpy
