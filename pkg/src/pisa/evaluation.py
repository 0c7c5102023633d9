"""COCO-style detection evaluation: TP/FP matching, PR curves, AP, and mAP.

Detections are matched greedily in descending score order; a detection is a
true positive when its IoU with the best still-unmatched ground truth reaches
the threshold, and each ground truth can validate at most one detection. AP
uses the 101-point interpolated precision-recall integral, and mAP averages
over classes and the 0.50:0.05:0.95 threshold grid.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from pisa._kernels import nms_suppress, pairwise_iou

__all__ = [
    "DEFAULT_THETAS",
    "EvalReport",
    "ImageResult",
    "average_precision",
    "coco_map",
    "match",
    "nms",
]

DEFAULT_THETAS = tuple(np.round(np.arange(0.5, 0.951, 0.05), 2))
_RECALL_GRID = np.linspace(0.0, 1.0, 101)


def match(det_boxes: np.ndarray, det_scores: np.ndarray, gt_boxes: np.ndarray, theta: float) -> np.ndarray:
    """TP/FP flags for one class in one image at IoU threshold ``theta``.

    Detections are visited by descending score (ties by lower index); each is
    matched to the unmatched ground truth with the highest IoU and flagged TP
    when that IoU is >= ``theta``.
    """
    det_boxes = np.asarray(det_boxes, dtype=np.float64).reshape(-1, 4)
    det_scores = np.asarray(det_scores, dtype=np.float64).reshape(-1)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    n_det, n_gt = det_boxes.shape[0], gt_boxes.shape[0]
    flags = np.zeros(n_det, dtype=bool)
    if n_det == 0 or n_gt == 0:
        return flags

    ious = pairwise_iou(det_boxes, gt_boxes)
    unmatched = np.ones(n_gt, dtype=bool)
    for i in np.argsort(-det_scores, kind="stable"):
        candidates = np.flatnonzero(unmatched)
        if candidates.size == 0:
            break
        best = candidates[np.argmax(ious[i, candidates])]
        if ious[i, best] >= theta:
            flags[i] = True
            unmatched[best] = False
    return flags


def average_precision(flags: np.ndarray, scores: np.ndarray, n_gt: int):
    """101-point interpolated AP from TP/FP flags and detection scores.

    Returns ``None`` when the class has no ground truth and no detections
    (skipped, not counted in any mean). No ground truth with detections
    present scores 0; ground truth with no detections also scores 0.
    """
    flags = np.asarray(flags, dtype=bool).reshape(-1)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if flags.shape != scores.shape:
        raise ValueError("flags and scores must be aligned")
    if n_gt < 0:
        raise ValueError("n_gt must be >= 0")
    if n_gt == 0:
        return None if flags.size == 0 else 0.0
    if flags.size == 0:
        return 0.0

    order = np.argsort(-scores, kind="stable")
    tp = flags[order].astype(np.float64)
    cum_tp = np.cumsum(tp)
    cum_fp = np.cumsum(1.0 - tp)
    recall = cum_tp / n_gt
    precision = cum_tp / (cum_tp + cum_fp)

    # right-to-left envelope gives the interpolated precision max at each recall
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, _RECALL_GRID, side="left")
    interp = np.where(idx < recall.size, envelope[np.minimum(idx, recall.size - 1)], 0.0)
    return float(interp.mean())


def pr_curve(flags: np.ndarray, scores: np.ndarray, n_gt: int):
    """Raw precision/recall arrays swept by descending score."""
    flags = np.asarray(flags, dtype=bool).reshape(-1)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    order = np.argsort(-scores, kind="stable")
    tp = flags[order].astype(np.float64)
    cum_tp = np.cumsum(tp)
    cum_fp = np.cumsum(1.0 - tp)
    recall = cum_tp / n_gt if n_gt > 0 else np.zeros_like(cum_tp)
    precision = np.divide(cum_tp, cum_tp + cum_fp,
                          out=np.zeros_like(cum_tp), where=(cum_tp + cum_fp) > 0)
    return precision, recall


def nms(boxes: np.ndarray, scores: np.ndarray, iou_thr: float = 0.5) -> np.ndarray:
    """Greedy single-class NMS; returns kept indices in descending score order."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if boxes.shape[0] == 0:
        return np.empty(0, dtype=np.int64)
    suppressor = nms_suppress(boxes, scores, iou_thr)
    kept = np.flatnonzero(suppressor == np.arange(boxes.shape[0]))
    return kept[np.argsort(-scores[kept], kind="stable")]


@dataclass
class ImageResult:
    """Ground truths and detections of one image."""

    image_id: int | str
    gt_boxes: np.ndarray
    gt_classes: np.ndarray
    det_boxes: np.ndarray
    det_classes: np.ndarray
    det_scores: np.ndarray

    @classmethod
    def empty(cls, image_id) -> "ImageResult":
        return cls(
            image_id=image_id,
            gt_boxes=np.empty((0, 4), np.float64),
            gt_classes=np.empty(0, np.int64),
            det_boxes=np.empty((0, 4), np.float64),
            det_classes=np.empty(0, np.int64),
            det_scores=np.empty(0, np.float64),
        )


@dataclass
class EvalReport:
    """AP per (class, IoU threshold) plus the aggregated mAP.

    ``aps`` uses NaN for skipped cells (classes without ground truth);
    ``mean_ap`` is None when nothing was evaluable at all. ``curves`` maps
    ``(class_id, theta)`` to (precision, recall) arrays when kept.
    """

    thetas: tuple
    class_ids: tuple
    aps: np.ndarray                 # (n_classes, n_thetas), NaN = skipped
    mean_ap: float | None
    mean_ap_per_theta: np.ndarray   # (n_thetas,), NaN where undefined
    curves: dict = field(default_factory=dict, repr=False)

    def ap_at(self, theta: float) -> float:
        """Mean AP over classes at one IoU threshold."""
        j = self.thetas.index(theta)
        return float(self.mean_ap_per_theta[j])

    def to_dict(self) -> dict:
        return {
            "thetas": [float(t) for t in self.thetas],
            "class_ids": [int(c) for c in self.class_ids],
            "aps": [[None if np.isnan(v) else round(float(v), 12) for v in row] for row in self.aps],
            "mean_ap": None if self.mean_ap is None else round(float(self.mean_ap), 12),
            "mean_ap_per_theta": [None if np.isnan(v) else round(float(v), 12)
                                  for v in self.mean_ap_per_theta],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        aps = np.array([[np.nan if v is None else v for v in row] for row in d["aps"]],
                       dtype=np.float64).reshape(len(d["class_ids"]), len(d["thetas"]))
        per_theta = np.array([np.nan if v is None else v for v in d["mean_ap_per_theta"]],
                             dtype=np.float64)
        return cls(
            thetas=tuple(d["thetas"]),
            class_ids=tuple(d["class_ids"]),
            aps=aps,
            mean_ap=d["mean_ap"],
            mean_ap_per_theta=per_theta,
        )


def coco_map(
    images: list[ImageResult],
    thetas: tuple = DEFAULT_THETAS,
    class_ids: tuple | None = None,
    keep_curves: bool = False,
) -> EvalReport:
    """Multi-class multi-image evaluation over an IoU threshold grid.

    Detections are pooled per class across images and matched per image.
    Classes without any ground truth are skipped; with no ground truth at all
    the report carries ``mean_ap = None``.
    """
    if class_ids is None:
        present = set()
        for img in images:
            present.update(int(c) for c in np.asarray(img.gt_classes).reshape(-1))
            present.update(int(c) for c in np.asarray(img.det_classes).reshape(-1))
        class_ids = tuple(sorted(present))
    thetas = tuple(float(t) for t in thetas)

    aps = np.full((len(class_ids), len(thetas)), np.nan)
    curves: dict = {}
    for ci, cls in enumerate(class_ids):
        per_image = []
        n_gt = 0
        for img in images:
            gt_mask = np.asarray(img.gt_classes).reshape(-1) == cls
            det_mask = np.asarray(img.det_classes).reshape(-1) == cls
            gts = np.asarray(img.gt_boxes, dtype=np.float64).reshape(-1, 4)[gt_mask]
            dets = np.asarray(img.det_boxes, dtype=np.float64).reshape(-1, 4)[det_mask]
            det_scores = np.asarray(img.det_scores, dtype=np.float64).reshape(-1)[det_mask]
            n_gt += gts.shape[0]
            per_image.append((dets, det_scores, gts))
        n_det = sum(d.shape[0] for d, _, _ in per_image)
        if n_gt == 0 and n_det == 0:
            continue
        for ti, theta in enumerate(thetas):
            flags = np.concatenate([match(d, s, g, theta) for d, s, g in per_image]) \
                if n_det else np.empty(0, dtype=bool)
            scores = np.concatenate([s for _, s, _ in per_image]) \
                if n_det else np.empty(0, dtype=np.float64)
            ap = average_precision(flags, scores, n_gt)
            aps[ci, ti] = np.nan if ap is None else ap
            if keep_curves and ap is not None:
                curves[(cls, theta)] = pr_curve(flags, scores, n_gt)

    evaluable = ~np.isnan(aps)
    mean_ap = float(aps[evaluable].mean()) if evaluable.any() else None
    with np.errstate(invalid="ignore"):
        per_theta = np.array([
            aps[evaluable[:, t], t].mean() if evaluable[:, t].any() else np.nan
            for t in range(len(thetas))
        ])
    return EvalReport(
        thetas=thetas,
        class_ids=tuple(int(c) for c in class_ids),
        aps=aps,
        mean_ap=mean_ap,
        mean_ap_per_theta=per_theta,
        curves=curves,
    )
