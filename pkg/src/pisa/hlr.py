"""Hierarchical local ranking of training samples.

Positives are grouped by their matched ground truth and ranked by the IoU of
their *regressed* box with it (IoU-HLR); negatives are grouped by greedy-NMS
clusters of their regressed boxes and ranked by their maximum foreground
score (Score-HLR). Both rankings are built in two steps:

1. sort each group by key descending -> local rank within the group;
2. concatenate the local-rank-0 samples of all groups sorted by key
   descending, then the local-rank-1 samples, and so on.

The position in that concatenation is the hierarchical rank: rank 0 is the
best sample of the batch. Ties always break by ascending sample index so the
ranking is total and deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from pisa._kernels import nms_suppress
from pisa.assignment import SampleBatch
from pisa.geometry import elementwise_iou

__all__ = ["HlrResult", "NegClustering", "hierarchical_rank", "iou_hlr", "nms_cluster", "score_hlr"]


@dataclass
class HlrResult:
    """Ranking of one sample subset (the positives or the negatives).

    All arrays are aligned; ``indices`` maps rows back to batch positions.
    ``hlr`` is a permutation of 0..K-1 with 0 the most important sample.
    ``key`` is the regressed IoU for positives and the max foreground score
    for negatives.
    """

    indices: np.ndarray     # (K,) batch indices
    group_id: np.ndarray    # (K,)
    local_rank: np.ndarray  # (K,)
    hlr: np.ndarray         # (K,)
    key: np.ndarray         # (K,)

    @property
    def size(self) -> int:
        return self.indices.shape[0]

    def ordered_indices(self) -> np.ndarray:
        """Batch indices sorted by hierarchical rank (most important first)."""
        return self.indices[np.argsort(self.hlr)]

    def rows(self):
        """(sample_id, group_id, local_rank, hlr, key) tuples, by sample."""
        return [
            (int(self.indices[i]), int(self.group_id[i]), int(self.local_rank[i]),
             int(self.hlr[i]), float(self.key[i]))
            for i in range(self.size)
        ]


def _empty_result() -> HlrResult:
    z = np.empty(0, dtype=np.int64)
    return HlrResult(z, z.copy(), z.copy(), z.copy(), np.empty(0, dtype=np.float64))


def hierarchical_rank(indices: np.ndarray, group_id: np.ndarray, key: np.ndarray) -> HlrResult:
    """Two-step rank of samples given their group ids and sort keys."""
    indices = np.asarray(indices, dtype=np.int64)
    group_id = np.asarray(group_id, dtype=np.int64)
    key = np.asarray(key, dtype=np.float64)
    k = indices.shape[0]
    if k == 0:
        return _empty_result()

    # local rank: position within the group under (key desc, index asc)
    local_rank = np.empty(k, dtype=np.int64)
    for g in np.unique(group_id):
        members = np.flatnonzero(group_id == g)
        order = members[np.argsort(-key[members], kind="stable")]
        local_rank[order] = np.arange(order.size)

    # hierarchical rank: (local rank asc, key desc, index asc)
    order = np.lexsort((indices, -key, local_rank))
    hlr = np.empty(k, dtype=np.int64)
    hlr[order] = np.arange(k)
    return HlrResult(indices=indices, group_id=group_id, local_rank=local_rank, hlr=hlr, key=key)


def iou_hlr(batch: SampleBatch) -> HlrResult:
    """IoU-HLR over the batch positives.

    Groups are the matched ground truths; the key is the IoU between each
    sample's regressed box and its ground truth, since the evaluation metric
    sees the regressed positions. Returns an empty result when the batch has
    no positives.
    """
    pos = batch.assignment.pos_indices
    if pos.size == 0:
        return _empty_result()
    gt_idx = batch.assignment.matched_gt[pos]
    ious = elementwise_iou(batch.regressed_boxes[pos], batch.gt_boxes[gt_idx])
    return hierarchical_rank(pos, gt_idx, ious)


@dataclass
class NegClustering:
    """NMS clustering of the negatives; the representative of each cluster is
    its highest-scored (kept) box."""

    indices: np.ndarray         # (M,) batch indices of negatives
    cluster_id: np.ndarray      # (M,)
    representative: np.ndarray  # (n_clusters,) batch index of the kept box

    @property
    def num_clusters(self) -> int:
        return self.representative.shape[0]


def nms_cluster(batch: SampleBatch, iou_thr: float = 0.7) -> NegClustering:
    """Group the negatives into clusters with greedy NMS on their regressed
    boxes, scored by maximum foreground probability. Every suppressed box
    joins the cluster of the kept box that removed it; mutually disjoint
    boxes end up in singleton clusters.
    """
    neg = batch.assignment.neg_indices
    if neg.size == 0:
        return NegClustering(
            indices=np.empty(0, np.int64),
            cluster_id=np.empty(0, np.int64),
            representative=np.empty(0, np.int64),
        )
    scores = _max_foreground_score(batch, neg)
    suppressor = nms_suppress(batch.regressed_boxes[neg], scores, iou_thr)

    kept_local = np.flatnonzero(suppressor == np.arange(neg.size))
    # number clusters by descending representative score for a stable layout
    kept_order = kept_local[np.argsort(-scores[kept_local], kind="stable")]
    cluster_of_kept = np.empty(neg.size, dtype=np.int64)
    cluster_of_kept[kept_order] = np.arange(kept_order.size)
    cluster_id = cluster_of_kept[suppressor]
    return NegClustering(
        indices=neg,
        cluster_id=cluster_id,
        representative=neg[kept_order],
    )


def _max_foreground_score(batch: SampleBatch, indices: np.ndarray) -> np.ndarray:
    return batch.class_scores[indices, : batch.num_classes].max(axis=1)


def score_hlr(batch: SampleBatch, clustering: NegClustering) -> HlrResult:
    """Score-HLR over the batch negatives: the same two-step ranking as
    :func:`iou_hlr` with NMS clusters as groups and the max foreground score
    as key. Returns an empty result when there are no negatives.
    """
    if clustering.indices.size == 0:
        return _empty_result()
    scores = _max_foreground_score(batch, clustering.indices)
    return hierarchical_rank(clustering.indices, clustering.cluster_id, scores)
