"""Proposal-to-ground-truth matching and the R/H sampling baselines.

``assign`` is a standard max-IoU matcher. ``sample_random`` draws a fixed
positive:negative quota uniformly; ``sample_hard`` fills the same quota with
the highest-loss candidates (the hard-mining comparator).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from pisa._kernels import pairwise_iou

POSITIVE = 1
NEGATIVE = 0
IGNORED = -1


@dataclass
class Assignment:
    """Per-proposal match against the ground-truth set.

    ``matched_gt`` is -1 where no ground truth exists. ``target_class`` is the
    matched ground-truth class for positives and ``num_classes`` (background)
    for everything else.
    """

    matched_gt: np.ndarray   # (N,) int64, -1 when there is no ground truth
    max_iou: np.ndarray      # (N,) float64
    labels: np.ndarray       # (N,) int8: POSITIVE / NEGATIVE / IGNORED
    target_class: np.ndarray  # (N,) int64, num_classes = background
    num_classes: int

    @property
    def pos_indices(self) -> np.ndarray:
        return np.flatnonzero(self.labels == POSITIVE)

    @property
    def neg_indices(self) -> np.ndarray:
        return np.flatnonzero(self.labels == NEGATIVE)

    def subset(self, indices: np.ndarray) -> "Assignment":
        indices = np.asarray(indices, dtype=np.int64)
        return Assignment(
            matched_gt=self.matched_gt[indices],
            max_iou=self.max_iou[indices],
            labels=self.labels[indices],
            target_class=self.target_class[indices],
            num_classes=self.num_classes,
        )


def assign(
    proposals: np.ndarray,
    gt_boxes: np.ndarray,
    gt_classes: np.ndarray,
    num_classes: int,
    pos_thr: float = 0.5,
    neg_thr: float = 0.5,
) -> Assignment:
    """Match each proposal to its max-IoU ground truth and label it.

    IoU >= ``pos_thr`` makes a positive, IoU < ``neg_thr`` a negative, and
    anything in between is ignored. With no ground truths every proposal is
    a negative.
    """
    if not (0.0 < neg_thr <= pos_thr <= 1.0):
        raise ValueError(f"require 0 < neg_thr <= pos_thr <= 1, got {neg_thr}, {pos_thr}")
    proposals = np.asarray(proposals, dtype=np.float64).reshape(-1, 4)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    gt_classes = np.asarray(gt_classes, dtype=np.int64).reshape(-1)
    n = proposals.shape[0]

    if gt_boxes.shape[0] == 0:
        return Assignment(
            matched_gt=np.full(n, -1, dtype=np.int64),
            max_iou=np.zeros(n, dtype=np.float64),
            labels=np.full(n, NEGATIVE, dtype=np.int8),
            target_class=np.full(n, num_classes, dtype=np.int64),
            num_classes=num_classes,
        )
    if gt_classes.max(initial=-1) >= num_classes:
        raise ValueError("gt class id out of range")

    ious = pairwise_iou(proposals, gt_boxes)
    matched = ious.argmax(axis=1)
    max_iou = ious[np.arange(n), matched]

    labels = np.full(n, IGNORED, dtype=np.int8)
    labels[max_iou >= pos_thr] = POSITIVE
    labels[max_iou < neg_thr] = NEGATIVE

    target_class = np.full(n, num_classes, dtype=np.int64)
    pos = labels == POSITIVE
    target_class[pos] = gt_classes[matched[pos]]

    return Assignment(
        matched_gt=matched.astype(np.int64),
        max_iou=max_iou,
        labels=labels,
        target_class=target_class,
        num_classes=num_classes,
    )


@dataclass
class SampleBatch:
    """The unit that ranking and losses operate on.

    Holds the proposals of one mini-batch (possibly pooled over several
    images), their assignment, the model's current class probabilities and
    regression outputs, and the decoded (regressed) boxes.
    """

    proposals: np.ndarray        # (N, 4)
    assignment: Assignment
    gt_boxes: np.ndarray         # (G, 4) referenced by assignment.matched_gt
    gt_classes: np.ndarray       # (G,)
    class_scores: np.ndarray     # (N, C+1) probabilities, rows sum to 1
    reg_deltas: np.ndarray       # (N, 4)
    regressed_boxes: np.ndarray  # (N, 4) = apply_delta(proposals, reg_deltas)
    reg_targets: np.ndarray      # (N, 4), meaningful only on positive rows
    image_ids: np.ndarray = field(default=None)  # (N,) int64

    def __post_init__(self):
        if self.image_ids is None:
            self.image_ids = np.zeros(self.num_samples, dtype=np.int64)

    @property
    def num_samples(self) -> int:
        return self.proposals.shape[0]

    @property
    def num_classes(self) -> int:
        return self.assignment.num_classes

    def validate(self, atol: float = 1e-6) -> None:
        n = self.num_samples
        for name in ("class_scores", "reg_deltas", "regressed_boxes", "reg_targets", "image_ids"):
            if getattr(self, name).shape[0] != n:
                raise ValueError(f"{name} not aligned with proposals")
        if self.class_scores.shape[1] != self.num_classes + 1:
            raise ValueError("class_scores must have C+1 columns")
        sums = self.class_scores.sum(axis=1)
        if n and np.max(np.abs(sums - 1.0)) > atol:
            raise ValueError("class score rows must sum to 1")

    def subset(self, indices: np.ndarray) -> "SampleBatch":
        indices = np.asarray(indices, dtype=np.int64)
        return SampleBatch(
            proposals=self.proposals[indices],
            assignment=self.assignment.subset(indices),
            gt_boxes=self.gt_boxes,
            gt_classes=self.gt_classes,
            class_scores=self.class_scores[indices],
            reg_deltas=self.reg_deltas[indices],
            regressed_boxes=self.regressed_boxes[indices],
            reg_targets=self.reg_targets[indices],
            image_ids=self.image_ids[indices],
        )


def _as_rng(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def _quotas(n_total: int, pos_fraction: float, n_pos_avail: int, n_neg_avail: int):
    if n_total <= 0:
        raise ValueError("n_total must be positive")
    pos_quota = int(round(pos_fraction * n_total))
    n_pos = min(pos_quota, n_pos_avail)
    n_neg = min(n_total - n_pos, n_neg_avail)
    return n_pos, n_neg


def sample_random(batch: SampleBatch, n_total: int, pos_fraction: float, rng) -> np.ndarray:
    """Uniformly sample up to ``pos_fraction * n_total`` positives and fill the
    remainder with negatives. Deterministic given the seed; returns sorted
    batch indices without duplicates.
    """
    rng = _as_rng(rng)
    pos = batch.assignment.pos_indices
    neg = batch.assignment.neg_indices
    n_pos, n_neg = _quotas(n_total, pos_fraction, pos.size, neg.size)
    take_pos = rng.choice(pos, size=n_pos, replace=False) if n_pos else np.empty(0, np.int64)
    take_neg = rng.choice(neg, size=n_neg, replace=False) if n_neg else np.empty(0, np.int64)
    return np.sort(np.concatenate([take_pos, take_neg]).astype(np.int64))


def top_loss_indices(candidates: np.ndarray, losses: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` highest-loss candidates, ties broken by lower index."""
    if k <= 0 or candidates.size == 0:
        return np.empty(0, np.int64)
    order = np.argsort(-losses[candidates], kind="stable")
    return candidates[order[:k]]


def sample_hard(
    batch: SampleBatch,
    per_sample_cls_loss: np.ndarray,
    n_total: int,
    pos_fraction: float,
) -> np.ndarray:
    """Hard-mining sampler: same quotas as :func:`sample_random`, but picks the
    top classification-loss positives and negatives instead of a uniform draw.
    """
    losses = np.asarray(per_sample_cls_loss, dtype=np.float64).reshape(-1)
    if losses.shape[0] != batch.num_samples:
        raise ValueError("loss vector must align with the batch")
    pos = batch.assignment.pos_indices
    neg = batch.assignment.neg_indices
    n_pos, n_neg = _quotas(n_total, pos_fraction, pos.size, neg.size)
    take_pos = top_loss_indices(pos, losses, n_pos)
    take_neg = top_loss_indices(neg, losses, n_neg)
    return np.sort(np.concatenate([take_pos, take_neg]).astype(np.int64))
