"""Deterministic synthetic detection scenes for the desk-scale harness.

Each scene carries randomly placed ground-truth boxes, proposals formed by
jittering those boxes at several scales plus uniform background boxes, and a
per-proposal feature vector a linear head can learn from:

* ``classes`` noisy class-evidence channels, where the channel of the
  nearest ground truth's class carries its IoU (so scores correlate with
  overlap);
* ``classes`` alignment channels carrying a signal only precisely placed
  boxes have (quadratic in IoU above the positive threshold). The classifier
  faces a real trade-off: leaning on alignment sharpens the score ordering
  among well-placed boxes but injects noise into the many mediocre
  positives, so the sample weighting of the loss decides how strongly
  scores track localization quality;
* four localization cues equal to the true regression offsets corrupted by
  noise that grows with offset magnitude (so regression quality degrades for
  poorly placed proposals, as it does for real detectors);
* a constant bias channel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from pisa._kernels import pairwise_iou
from pisa.config import DataConfig
from pisa.errors import ConfigError
from pisa.geometry import clip_boxes, encode_delta

__all__ = ["SyntheticScene", "feature_dim", "gen_scenes"]

# relative corner-jitter multipliers cycled over each ground truth's proposals
JITTER_SCALES = (0.3, 0.6, 1.0, 1.6)
COVERAGE_IOU = 0.7
_DELTA_CLIP = 4.0
# alignment signal starts where positives start
_ALIGN_KNEE = 0.5
# regression-cue noise floor relative to the offset-proportional part
_LOC_NOISE_FLOOR = 0.2


@dataclass
class SyntheticScene:
    image_id: int
    width: float
    height: float
    gt_boxes: np.ndarray    # (M, 4)
    gt_classes: np.ndarray  # (M,)
    proposals: np.ndarray   # (P, 4)
    features: np.ndarray    # (P, F)


def feature_dim(classes: int) -> int:
    return 2 * classes + 5


def _random_boxes(rng: np.random.Generator, n: int, cfg: DataConfig) -> np.ndarray:
    w = rng.uniform(cfg.min_gt_size, cfg.max_gt_size, size=n)
    h = rng.uniform(cfg.min_gt_size, cfg.max_gt_size, size=n)
    x1 = rng.uniform(0.0, cfg.image_size - w)
    y1 = rng.uniform(0.0, cfg.image_size - h)
    return np.stack([x1, y1, x1 + w, y1 + h], axis=1)


def _jitter(rng: np.random.Generator, box: np.ndarray, scale: float, cfg: DataConfig) -> np.ndarray:
    side = 0.5 * ((box[2] - box[0]) + (box[3] - box[1]))
    noise = rng.normal(0.0, cfg.jitter * scale * side, size=4)
    out = clip_boxes(box + noise, cfg.image_size, cfg.image_size)
    # keep at least a sliver of extent so the box stays usable downstream
    if out[2] - out[0] < 1.0:
        cx = min(max(0.5 * (out[0] + out[2]), 0.5), cfg.image_size - 0.5)
        out[0], out[2] = cx - 0.5, cx + 0.5
    if out[3] - out[1] < 1.0:
        cy = min(max(0.5 * (out[1] + out[3]), 0.5), cfg.image_size - 0.5)
        out[1], out[3] = cy - 0.5, cy + 0.5
    return out


def _proposals_for_gt(rng: np.random.Generator, box: np.ndarray, cfg: DataConfig) -> np.ndarray:
    out = np.empty((cfg.proposals_per_gt, 4))
    # first proposal guarantees coverage: retry small jitters, else copy the box
    cover = None
    for _ in range(20):
        cand = _jitter(rng, box, JITTER_SCALES[0], cfg)
        if pairwise_iou(cand[None, :], box[None, :])[0, 0] >= COVERAGE_IOU:
            cover = cand
            break
    out[0] = box.copy() if cover is None else cover
    for i in range(1, cfg.proposals_per_gt):
        scale = JITTER_SCALES[i % len(JITTER_SCALES)]
        out[i] = _jitter(rng, box, scale, cfg)
    return out


def _features(
    rng: np.random.Generator,
    proposals: np.ndarray,
    gt_boxes: np.ndarray,
    gt_classes: np.ndarray,
    cfg: DataConfig,
) -> np.ndarray:
    n = proposals.shape[0]
    c = cfg.classes
    feats = np.zeros((n, feature_dim(c)))
    feats[:, -1] = 1.0

    evidence = rng.normal(0.0, cfg.feature_noise, size=(n, c))
    alignment = rng.normal(0.0, cfg.align_noise, size=(n, c))
    loc_noise = rng.normal(0.0, 1.0, size=(n, 4))
    if gt_boxes.shape[0]:
        ious = pairwise_iou(proposals, gt_boxes)
        nearest = ious.argmax(axis=1)
        max_iou = ious[np.arange(n), nearest]
        rows = np.arange(n)
        evidence[rows, gt_classes[nearest]] += max_iou
        precision_signal = np.maximum(0.0, (max_iou - _ALIGN_KNEE) / (1.0 - _ALIGN_KNEE)) ** 2
        alignment[rows, gt_classes[nearest]] += precision_signal
        deltas = np.clip(encode_delta(proposals, gt_boxes[nearest]), -_DELTA_CLIP, _DELTA_CLIP)
        spread = cfg.loc_noise * (_LOC_NOISE_FLOOR + np.abs(deltas))
        feats[:, 2 * c:2 * c + 4] = deltas + spread * loc_noise
    feats[:, :c] = evidence
    feats[:, c:2 * c] = alignment
    return feats


def gen_scenes(cfg: DataConfig, seed, n_scenes: int, first_id: int = 0) -> list[SyntheticScene]:
    """Generate ``n_scenes`` scenes, bit-identical for a given (cfg, seed).

    Every ground truth is covered by at least one proposal with IoU >= 0.7.
    """
    cfg.validate()
    if cfg.min_gt_size > cfg.image_size:
        raise ConfigError("boxes cannot fit the image extent")
    rng = np.random.default_rng(seed)
    scenes = []
    for i in range(n_scenes):
        gt_boxes = _random_boxes(rng, cfg.gts_per_image, cfg)
        gt_classes = rng.integers(0, cfg.classes, size=cfg.gts_per_image)
        proposals = np.concatenate(
            [_proposals_for_gt(rng, gt_boxes[g], cfg) for g in range(cfg.gts_per_image)]
            + [_random_boxes(rng, cfg.background_per_image, cfg)]
        )
        features = _features(rng, proposals, gt_boxes, gt_classes, cfg)
        scenes.append(SyntheticScene(
            image_id=first_id + i,
            width=cfg.image_size,
            height=cfg.image_size,
            gt_boxes=gt_boxes,
            gt_classes=gt_classes.astype(np.int64),
            proposals=proposals,
            features=features,
        ))
    return scenes


def scene_to_dict(scene: SyntheticScene) -> dict:
    return {
        "image_id": int(scene.image_id),
        "width": float(scene.width),
        "height": float(scene.height),
        "gt_boxes": scene.gt_boxes.tolist(),
        "gt_classes": scene.gt_classes.tolist(),
        "proposals": scene.proposals.tolist(),
        "features": scene.features.tolist(),
    }


def scene_from_dict(d: dict) -> SyntheticScene:
    return SyntheticScene(
        image_id=d["image_id"],
        width=d["width"],
        height=d["height"],
        gt_boxes=np.asarray(d["gt_boxes"], dtype=np.float64).reshape(-1, 4),
        gt_classes=np.asarray(d["gt_classes"], dtype=np.int64),
        proposals=np.asarray(d["proposals"], dtype=np.float64).reshape(-1, 4),
        features=np.asarray(d["features"], dtype=np.float64),
    )
