"""Sample-importance analyses on a trained batch: the budgeted score-boost
simulation and the random/hard/prime distribution reports."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from pisa.assignment import NEGATIVE, POSITIVE, SampleBatch, top_loss_indices
from pisa.config import EvalSettings, ExperimentConfig
from pisa.evaluation import ImageResult, coco_map
from pisa.harness import DetectorHead, PreparedScene, build_batch, detections_from_scores
from pisa.hlr import HlrResult, iou_hlr, nms_cluster, score_hlr
from pisa.losses import cross_entropy
from pisa.synthetic import SyntheticScene

__all__ = ["BoostOutcome", "boost_scores", "distribution_report", "simulate_boost"]


def boost_scores(scores: np.ndarray, targets: np.ndarray, chosen: np.ndarray,
                 magnitude: float) -> np.ndarray:
    """Raise the target-class probability of the chosen rows by a shared
    magnitude, ``p' = p + m (1 - p)``, rescaling the other entries so each
    row stays a probability vector. ``magnitude`` = 1 makes them perfect."""
    out = scores.copy()
    for i in chosen:
        t = targets[i]
        p = scores[i, t]
        rest = 1.0 - p
        if rest <= 0.0:
            continue
        p_new = p + magnitude * rest
        out[i] *= (1.0 - p_new) / rest
        out[i, t] = p_new
    return out


@dataclass
class BoostOutcome:
    """Per-threshold mAP before and after a budgeted score boost."""

    thetas: tuple
    baseline_ap: np.ndarray
    boosted_ap: np.ndarray
    requested_reduction: float
    achieved_reduction: float
    reachable: bool
    magnitude: float
    chosen: np.ndarray

    @property
    def delta_ap(self) -> np.ndarray:
        return self.boosted_ap - self.baseline_ap


def _total_ce(batch: SampleBatch, scores: np.ndarray) -> float:
    active = batch.assignment.labels != -1
    ce = cross_entropy(scores, batch.assignment.target_class)
    return float(ce[active].sum())


def _evaluate_scores(
    batch: SampleBatch,
    scores: np.ndarray,
    scenes: list[SyntheticScene],
    eval_cfg: EvalSettings,
    num_classes: int,
) -> np.ndarray:
    images = []
    for scene in scenes:
        rows = np.flatnonzero(batch.image_ids == scene.image_id)
        det = detections_from_scores(
            batch.regressed_boxes[rows], scores[rows], eval_cfg, num_classes)
        images.append(ImageResult(
            image_id=scene.image_id,
            gt_boxes=scene.gt_boxes,
            gt_classes=scene.gt_classes,
            det_boxes=det[0], det_classes=det[1], det_scores=det[2],
        ))
    report = coco_map(images, tuple(eval_cfg.thetas), class_ids=tuple(range(num_classes)))
    return report.mean_ap_per_theta


def simulate_boost(
    scenes: list[SyntheticScene],
    head: DetectorHead,
    config: ExperimentConfig,
    k: int,
    budget: float,
    select: str = "top",
    seed: int = 0,
    tol: float = 1e-4,
) -> BoostOutcome:
    """Boost the scores of ``k`` positives until the batch classification
    loss drops by ``budget`` (a fraction), then re-evaluate mAP per IoU
    threshold.

    ``select`` picks the top-k positives by IoU-HLR ("top") or k uniformly
    random positives ("random"). The shared boost magnitude is found by
    bisection; an unreachable budget reports the maximum achievable
    reduction instead of failing.
    """
    if not 0.0 <= budget < 1.0:
        raise ValueError("budget must lie in [0, 1)")
    num_classes = config.data.classes
    prepared = [PreparedScene.from_scene(s, num_classes) for s in scenes]
    batch, _ = build_batch(prepared, head)
    targets = batch.assignment.target_class

    ranking = iou_hlr(batch)
    if select == "top":
        chosen = ranking.ordered_indices()[:k]
    elif select == "random":
        rng = np.random.default_rng([seed, 17])
        pos = batch.assignment.pos_indices
        chosen = rng.choice(pos, size=min(k, pos.size), replace=False)
    else:
        raise ValueError(f"unknown selection '{select}'")

    base_total = _total_ce(batch, batch.class_scores)
    baseline_ap = _evaluate_scores(batch, batch.class_scores, scenes, config.eval, num_classes)

    def reduction(magnitude: float) -> float:
        boosted = boost_scores(batch.class_scores, targets, chosen, magnitude)
        return 1.0 - _total_ce(batch, boosted) / base_total

    max_reduction = reduction(1.0)
    if budget <= 0.0:
        magnitude, achieved, reachable = 0.0, 0.0, True
    elif budget >= max_reduction:
        magnitude, achieved, reachable = 1.0, max_reduction, False
    else:
        lo, hi = 0.0, 1.0
        for _ in range(80):
            mid = 0.5 * (lo + hi)
            if reduction(mid) < budget:
                lo = mid
            else:
                hi = mid
        magnitude = 0.5 * (lo + hi)
        achieved = reduction(magnitude)
        reachable = abs(achieved - budget) <= tol * max(budget, 1e-12)

    boosted = boost_scores(batch.class_scores, targets, chosen, magnitude)
    boosted_ap = _evaluate_scores(batch, boosted, scenes, config.eval, num_classes)
    return BoostOutcome(
        thetas=tuple(config.eval.thetas),
        baseline_ap=baseline_ap,
        boosted_ap=boosted_ap,
        requested_reduction=budget,
        achieved_reduction=achieved,
        reachable=reachable,
        magnitude=magnitude,
        chosen=np.asarray(chosen, dtype=np.int64),
    )


def distribution_report(
    batch: SampleBatch,
    ce_losses: np.ndarray,
    pos_hlr: HlrResult | None = None,
    neg_hlr: HlrResult | None = None,
    seed: int = 0,
    top_n: int = 3,
    hlr_bucket: int = 5,
    iou_bin: float = 0.1,
    cluster_iou: float = 0.7,
) -> dict:
    """Tabulate where random, hard, and prime samples live.

    Produces three row lists: ``samples`` holds per-sample (IoU, loss, score)
    scatter rows for the three categories (hard = top-``top_n`` loss per
    image, prime = top-``top_n`` hierarchical rank per image, random = a
    uniform per-image draw); ``score_by_hlr`` averages scores over rank
    buckets; ``score_by_iou`` averages positive scores over IoU intervals.
    Empty sides produce empty tables.
    """
    ce_losses = np.asarray(ce_losses, dtype=np.float64).reshape(-1)
    if pos_hlr is None:
        pos_hlr = iou_hlr(batch)
    if neg_hlr is None:
        neg_hlr = score_hlr(batch, nms_cluster(batch, cluster_iou))
    rng = np.random.default_rng([seed, 23])

    n = batch.num_samples
    hlr_of = np.full(n, -1, dtype=np.int64)
    key_of = np.full(n, np.nan)
    for res in (pos_hlr, neg_hlr):
        hlr_of[res.indices] = res.hlr
        key_of[res.indices] = res.key

    fg = batch.num_classes
    score_of = np.where(
        batch.assignment.labels == POSITIVE,
        batch.class_scores[np.arange(n), batch.assignment.target_class],
        batch.class_scores[:, :fg].max(axis=1) if n else np.zeros(0),
    )
    iou_of = np.where(batch.assignment.labels == POSITIVE, key_of, batch.assignment.max_iou)

    samples = []
    for image_id in np.unique(batch.image_ids):
        img_rows = np.flatnonzero(batch.image_ids == image_id)
        for kind, label in (("pos", POSITIVE), ("neg", NEGATIVE)):
            members = img_rows[batch.assignment.labels[img_rows] == label]
            if members.size == 0:
                continue
            ranked = members[hlr_of[members] >= 0]
            prime = ranked[np.argsort(hlr_of[ranked], kind="stable")][:top_n]
            hard = top_loss_indices(members, ce_losses, min(top_n, members.size))
            random_draw = rng.choice(members, size=min(top_n, members.size), replace=False)
            for category, rows in (("random", random_draw), ("hard", hard), ("prime", prime)):
                for i in rows:
                    samples.append({
                        "image_id": int(image_id),
                        "sample_id": int(i),
                        "kind": kind,
                        "category": category,
                        "iou": float(iou_of[i]),
                        "cls_loss": float(ce_losses[i]),
                        "score": float(score_of[i]),
                    })

    score_by_hlr = []
    for kind, res in (("pos", pos_hlr), ("neg", neg_hlr)):
        for lo in range(0, res.size, hlr_bucket):
            rows = res.indices[(res.hlr >= lo) & (res.hlr < lo + hlr_bucket)]
            score_by_hlr.append({
                "kind": kind,
                "hlr_lo": lo,
                "hlr_hi": min(lo + hlr_bucket, res.size),
                "mean_score": float(score_of[rows].mean()),
                "count": int(rows.size),
            })

    score_by_iou = []
    if pos_hlr.size:
        edges = np.arange(0.0, 1.0 + 1e-9, iou_bin)
        ious = pos_hlr.key
        for lo, hi in zip(edges[:-1], edges[1:]):
            upper = ious <= hi if hi >= 1.0 - 1e-9 else ious < hi
            in_bin = pos_hlr.indices[(ious >= lo) & upper]
            if in_bin.size == 0:
                continue
            score_by_iou.append({
                "iou_lo": round(float(lo), 6),
                "iou_hi": round(float(hi), 6),
                "mean_score": float(score_of[in_bin].mean()),
                "count": int(in_bin.size),
            })

    return {"samples": samples, "score_by_hlr": score_by_hlr, "score_by_iou": score_by_iou}
