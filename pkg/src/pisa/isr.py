"""Importance-based sample reweighting: ranks -> importance -> loss weights.

The per-class hierarchical ranks are mapped linearly to an importance value
``u = (n_max - r) / n_max`` where ``n_max`` is the largest class population,
so samples at the same rank in different classes get the same importance.
An exponential transform ``w = ((1-beta) u + beta)^gamma`` turns importance
into a raw weight, and the weights are rescaled so that the total
cross-entropy of the set is unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from pisa.assignment import IGNORED, SampleBatch
from pisa.hlr import HlrResult

__all__ = [
    "WeightSet",
    "compute_batch_weights",
    "importance_to_weight",
    "normalize_weights",
    "per_class_ranks",
    "rank_to_importance",
]


def rank_to_importance(ranks_by_class: Mapping[int, np.ndarray]) -> dict[int, np.ndarray]:
    """Linear map from per-class ranks to importance values in (0, 1].

    ``ranks_by_class[j]`` must hold the ranks 0..n_j-1 of the n_j samples of
    class j. ``n_max`` is taken over all classes in the mapping.
    """
    if not ranks_by_class:
        return {}
    cleaned = {}
    n_max = 0
    for cls, ranks in ranks_by_class.items():
        ranks = np.asarray(ranks, dtype=np.int64)
        if ranks.size and (ranks.min() < 0 or ranks.max() >= ranks.size):
            raise ValueError(f"class {cls}: ranks must lie in 0..n_j-1")
        cleaned[cls] = ranks
        n_max = max(n_max, ranks.size)
    if n_max == 0:
        return {cls: np.empty(0, dtype=np.float64) for cls in cleaned}
    return {cls: (n_max - ranks) / float(n_max) for cls, ranks in cleaned.items()}


def importance_to_weight(u: np.ndarray, gamma: float, beta: float) -> np.ndarray:
    """Exponential importance-to-weight transform, monotone in ``u``.

    ``gamma`` steers how strongly top samples are preferred; ``beta`` sets the
    weight floor. ``gamma == 0`` is allowed and yields all-equal weights (the
    uniform limit used to recover the unweighted baseline).
    """
    if gamma < 0.0:
        raise ValueError("gamma must be >= 0")
    if not 0.0 <= beta < 1.0:
        raise ValueError("beta must lie in [0, 1)")
    u = np.asarray(u, dtype=np.float64)
    if u.size and (u.min() < 0.0 or u.max() > 1.0):
        raise ValueError("importance values must lie in [0, 1]")
    return ((1.0 - beta) * u + beta) ** gamma


def normalize_weights(w: np.ndarray, ce_losses: np.ndarray) -> np.ndarray:
    """Rescale weights so the weighted cross-entropy total matches the
    unweighted one. Callers apply this separately to the positive and the
    negative set. A degenerate all-zero-loss set returns ``w`` unchanged.
    """
    w = np.asarray(w, dtype=np.float64)
    ce = np.asarray(ce_losses, dtype=np.float64)
    if w.shape != ce.shape:
        raise ValueError("weights and losses must be aligned")
    if np.any(ce < 0.0):
        raise ValueError("cross-entropy losses must be non-negative")
    denom = float(np.sum(w * ce))
    if denom == 0.0:
        return w.copy()
    return w * (float(np.sum(ce)) / denom)


def per_class_ranks(hlr_result: HlrResult, class_ids: np.ndarray) -> dict[int, np.ndarray]:
    """Split one hierarchical ranking into per-class rank lists.

    ``class_ids`` gives the class of each ranked sample. Within a class the
    samples are re-ranked 0..n_j-1 by their global hierarchical rank, which
    preserves the (local rank, key) order of the original ranking.
    """
    class_ids = np.asarray(class_ids, dtype=np.int64)
    out: dict[int, np.ndarray] = {}
    for cls in np.unique(class_ids):
        members = np.flatnonzero(class_ids == cls)
        order = np.argsort(hlr_result.hlr[members], kind="stable")
        ranks = np.empty(members.size, dtype=np.int64)
        ranks[order] = np.arange(members.size)
        out[int(cls)] = ranks
    return out


@dataclass
class WeightSet:
    """Per-sample importance and loss weights, aligned with the batch.

    Rows outside the ranked sets keep ``u = w = w_norm = 1``; ignored samples
    get ``w_norm = 0`` so they contribute no loss. ``class_id`` is the class
    the rank was computed in (C = background).
    """

    u: np.ndarray
    w: np.ndarray
    w_norm: np.ndarray
    class_id: np.ndarray


def compute_batch_weights(
    batch: SampleBatch,
    pos_hlr: HlrResult,
    neg_hlr: HlrResult,
    ce_losses: np.ndarray,
    *,
    gamma_pos: float = 2.0,
    beta_pos: float = 0.0,
    gamma_neg: float = 0.5,
    beta_neg: float = 0.0,
    enable_pos: bool = True,
    enable_neg: bool = True,
) -> WeightSet:
    """Full reweighting pipeline for one mini-batch.

    Positives are ranked per foreground class (by IoU-HLR), negatives form
    the single background class (by Score-HLR), and one joint ``n_max`` over
    all C+1 classes feeds the linear importance map. Normalization keeps the
    positive and negative cross-entropy totals unchanged. A disabled side
    keeps uniform weights.
    """
    n = batch.num_samples
    background = batch.num_classes
    ce = np.asarray(ce_losses, dtype=np.float64).reshape(-1)
    if ce.shape[0] != n:
        raise ValueError("ce_losses must align with the batch")

    u = np.ones(n, dtype=np.float64)
    w = np.ones(n, dtype=np.float64)
    w_norm = np.ones(n, dtype=np.float64)
    class_id = batch.assignment.target_class.copy()

    ranks_by_class: dict[int, np.ndarray] = {}
    members_by_class: dict[int, np.ndarray] = {}
    if pos_hlr.size:
        pos_classes = batch.assignment.target_class[pos_hlr.indices]
        for cls, ranks in per_class_ranks(pos_hlr, pos_classes).items():
            ranks_by_class[cls] = ranks
            members_by_class[cls] = pos_hlr.indices[pos_classes == cls]
    if neg_hlr.size:
        ranks_by_class[background] = neg_hlr.hlr
        members_by_class[background] = neg_hlr.indices

    importance = rank_to_importance(ranks_by_class)
    for cls, u_cls in importance.items():
        members = members_by_class[cls]
        u[members] = u_cls
        if cls == background:
            w[members] = importance_to_weight(u_cls, gamma_neg, beta_neg)
        else:
            w[members] = importance_to_weight(u_cls, gamma_pos, beta_pos)

    pos = batch.assignment.pos_indices
    neg = batch.assignment.neg_indices
    if enable_pos and pos.size:
        w_norm[pos] = normalize_weights(w[pos], ce[pos])
    if enable_neg and neg.size:
        w_norm[neg] = normalize_weights(w[neg], ce[neg])
    w_norm[batch.assignment.labels == IGNORED] = 0.0
    return WeightSet(u=u, w=w, w_norm=w_norm, class_id=class_id)
