"""Desk-scale training harness: a linear detector head with manual gradients,
strategy-controlled sampling, and deterministic experiment records.

Everything is a pure function of (config, seed). Scenes are generated from
seed-derived streams shared across strategies so that runs with different
sampling settings train on identical data.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from pisa.assignment import (
    POSITIVE,
    Assignment,
    SampleBatch,
    assign,
    top_loss_indices,
)
from pisa.config import ExperimentConfig, EvalSettings, canonical_json
from pisa.errors import NumericalError
from pisa.evaluation import EvalReport, ImageResult, coco_map, nms
from pisa.geometry import apply_delta, clip_boxes, encode_delta
from pisa.hlr import iou_hlr, nms_cluster, score_hlr
from pisa.isr import compute_batch_weights
from pisa.losses import LossSettings, cross_entropy, softmax, total_loss
from pisa.synthetic import SyntheticScene, feature_dim, gen_scenes

__all__ = [
    "DetectorHead",
    "RunRecord",
    "TABLE3_ROWS",
    "TABLE4_ROWS",
    "build_batch",
    "component_config",
    "evaluate_head",
    "run_experiment",
    "strategy_config",
    "train",
]

# stream tags for seed derivation
_STREAM_TRAIN_DATA = 0
_STREAM_EVAL_DATA = 1
_STREAM_TRAIN_LOOP = 2
_STREAM_HEAD_INIT = 3

TABLE3_ROWS = (("R", "R"), ("H", "R"), ("P", "R"), ("R", "H"), ("R", "P"), ("H", "H"), ("P", "P"))
TABLE4_ROWS = (
    (False, False, False),
    (True, False, False),
    (False, True, False),
    (False, False, True),
    (True, True, False),
    (True, False, True),
    (True, True, True),
)


def strategy_config(base: ExperimentConfig, pos: str, neg: str) -> ExperimentConfig:
    """Config for one sampling-strategy grid row; soft components follow the letters."""
    return base.with_overrides({
        "sampling.pos": pos,
        "sampling.neg": neg,
        "isr.enable_pos": None,
        "isr.enable_neg": None,
        "carl.enable": None,
    })


def component_config(base: ExperimentConfig, isr_p: bool, isr_n: bool, carl_on: bool) -> ExperimentConfig:
    """Config for one component-ablation row. A side switches to soft (keep
    all, reweight) sampling exactly when one of its components is on."""
    return base.with_overrides({
        "sampling.pos": "P" if (isr_p or carl_on) else "R",
        "sampling.neg": "P" if isr_n else "R",
        "isr.enable_pos": isr_p,
        "isr.enable_neg": isr_n,
        "carl.enable": carl_on,
    })


@dataclass
class DetectorHead:
    """Linear classification and class-agnostic regression head."""

    w_cls: np.ndarray  # (F, C+1)
    b_cls: np.ndarray  # (C+1,)
    w_reg: np.ndarray  # (F, 4)
    b_reg: np.ndarray  # (4,)

    @classmethod
    def init(cls, n_features: int, n_classes: int, rng: np.random.Generator,
             scale: float = 0.01) -> "DetectorHead":
        return cls(
            w_cls=rng.normal(0.0, scale, size=(n_features, n_classes + 1)),
            b_cls=np.zeros(n_classes + 1),
            w_reg=rng.normal(0.0, scale, size=(n_features, 4)),
            b_reg=np.zeros(4),
        )

    def forward(self, features: np.ndarray):
        logits = features @ self.w_cls + self.b_cls
        deltas = features @ self.w_reg + self.b_reg
        return logits, deltas

    def params(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in (self.w_cls, self.b_cls, self.w_reg, self.b_reg)])

    def set_params(self, flat: np.ndarray) -> None:
        offset = 0
        for p in (self.w_cls, self.b_cls, self.w_reg, self.b_reg):
            p[...] = flat[offset:offset + p.size].reshape(p.shape)
            offset += p.size


@dataclass
class PreparedScene:
    """Scene with its fixed assignment and regression targets precomputed;
    proposals never move during training, so this is done once."""

    scene: SyntheticScene
    assignment: Assignment
    reg_targets: np.ndarray

    @classmethod
    def from_scene(cls, scene: SyntheticScene, num_classes: int) -> "PreparedScene":
        a = assign(scene.proposals, scene.gt_boxes, scene.gt_classes, num_classes)
        targets = np.zeros((scene.proposals.shape[0], 4))
        pos = a.pos_indices
        if pos.size:
            targets[pos] = encode_delta(scene.proposals[pos], scene.gt_boxes[a.matched_gt[pos]])
        return cls(scene=scene, assignment=a, reg_targets=targets)


def build_batch(prepared: list[PreparedScene], head: DetectorHead):
    """Pool scenes into one SampleBatch under the current head.

    Returns ``(batch, features)``; ground-truth indices are offset so the
    pooled assignment stays valid.
    """
    proposals, features, image_ids = [], [], []
    gt_boxes, gt_classes = [], []
    matched, max_iou, labels, target_class = [], [], [], []
    offset = 0
    for ps in prepared:
        n = ps.scene.proposals.shape[0]
        proposals.append(ps.scene.proposals)
        features.append(ps.scene.features)
        image_ids.append(np.full(n, ps.scene.image_id, dtype=np.int64))
        gt_boxes.append(ps.scene.gt_boxes)
        gt_classes.append(ps.scene.gt_classes)
        m = ps.assignment.matched_gt.copy()
        m[m >= 0] += offset
        matched.append(m)
        max_iou.append(ps.assignment.max_iou)
        labels.append(ps.assignment.labels)
        target_class.append(ps.assignment.target_class)
        offset += ps.scene.gt_boxes.shape[0]

    features = np.concatenate(features)
    proposals = np.concatenate(proposals)
    assignment = Assignment(
        matched_gt=np.concatenate(matched),
        max_iou=np.concatenate(max_iou),
        labels=np.concatenate(labels),
        target_class=np.concatenate(target_class),
        num_classes=prepared[0].assignment.num_classes,
    )
    logits, deltas = head.forward(features)
    if not np.all(np.isfinite(logits)) or not np.all(np.isfinite(deltas)):
        raise NumericalError("non-finite head outputs")
    batch = SampleBatch(
        proposals=proposals,
        assignment=assignment,
        gt_boxes=np.concatenate(gt_boxes),
        gt_classes=np.concatenate(gt_classes),
        class_scores=softmax(logits),
        reg_deltas=deltas,
        regressed_boxes=apply_delta(proposals, deltas),
        reg_targets=np.concatenate([ps.reg_targets for ps in prepared]),
        image_ids=np.concatenate(image_ids),
    )
    return batch, features


def select_training_samples(
    batch: SampleBatch,
    ce_losses: np.ndarray,
    config: ExperimentConfig,
    rng: np.random.Generator,
    n_images: int,
) -> np.ndarray:
    """Pick the samples entering the loss, per-side strategy letters.

    R draws uniformly under quota, H takes the top-loss candidates, P keeps
    the whole side (soft sampling; reweighting happens downstream). Unused
    positive quota is transferred to negatives.
    """
    s = config.sampling
    n_total = s.samples_per_image * n_images
    pos_quota = int(round(s.pos_fraction * n_total))
    pos = batch.assignment.pos_indices
    neg = batch.assignment.neg_indices

    def pick(kind: str, cands: np.ndarray, quota: int) -> np.ndarray:
        if kind == "P":
            return cands
        quota = min(quota, cands.size)
        if kind == "R":
            return rng.choice(cands, size=quota, replace=False) if quota else np.empty(0, np.int64)
        return top_loss_indices(cands, ce_losses, quota)

    take_pos = pick(s.pos, pos, pos_quota)
    neg_quota = n_total - min(take_pos.size, pos_quota)
    take_neg = pick(s.neg, neg, neg_quota)
    return np.sort(np.concatenate([take_pos, take_neg]).astype(np.int64))


def batch_weights_for_config(batch: SampleBatch, config: ExperimentConfig) -> np.ndarray:
    """ISR weight vector for a (sub-)batch under the resolved config toggles."""
    enable_pos = config.isr_pos_enabled()
    enable_neg = config.isr_neg_enabled()
    if not (enable_pos or enable_neg):
        return np.ones(batch.num_samples)
    pos_hlr = iou_hlr(batch)
    neg_hlr = score_hlr(batch, nms_cluster(batch, config.isr.cluster_iou))
    ce = cross_entropy(batch.class_scores, batch.assignment.target_class)
    ws = compute_batch_weights(
        batch, pos_hlr, neg_hlr, ce,
        gamma_pos=config.isr.gamma_pos, beta_pos=config.isr.beta_pos,
        gamma_neg=config.isr.gamma_neg, beta_neg=config.isr.beta_neg,
        enable_pos=enable_pos, enable_neg=enable_neg,
    )
    return ws.w_norm


def loss_settings(config: ExperimentConfig) -> LossSettings:
    return LossSettings(
        carl_enable=config.carl_enabled(),
        carl_k=config.carl.k,
        carl_b=config.carl.b,
        carl_weight=config.carl.weight,
    )


def _clip_gradients(grads: list[np.ndarray], max_norm: float) -> None:
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if total > max_norm:
        scale = max_norm / total
        for g in grads:
            g *= scale


def train_step(
    head: DetectorHead,
    prepared: list[PreparedScene],
    config: ExperimentConfig,
    rng: np.random.Generator,
    settings: LossSettings,
):
    """One SGD step over a pooled scene mini-batch; returns the loss bundle."""
    batch, features = build_batch(prepared, head)
    ce_all = cross_entropy(batch.class_scores, batch.assignment.target_class)
    sel = select_training_samples(batch, ce_all, config, rng, len(prepared))
    sub = batch.subset(sel)
    sub_features = features[sel]

    w_norm = batch_weights_for_config(sub, config)
    bundle = total_loss(sub, w_norm, settings)
    if not np.isfinite(bundle.total):
        raise NumericalError(f"diverged: loss={bundle.total!r}")

    grads = [
        sub_features.T @ bundle.grad_scores,
        bundle.grad_scores.sum(axis=0),
        sub_features.T @ bundle.grad_deltas,
        bundle.grad_deltas.sum(axis=0),
    ]
    _clip_gradients(grads, config.train.grad_clip)
    lr = config.train.lr
    head.w_cls -= lr * grads[0]
    head.b_cls -= lr * grads[1]
    head.w_reg -= lr * grads[2]
    head.b_reg -= lr * grads[3]
    return bundle


@dataclass
class RunRecord:
    """Everything one training run produced.

    ``wall_time`` is measurement metadata and is excluded from the canonical
    payload so that identical (config, seed) runs serialize byte-identically.
    """

    config: dict
    seed: int
    strategy: str
    epoch_losses: list
    eval_report: dict
    wall_time: float | None = field(default=None, compare=False)

    def to_payload(self) -> dict:
        return {
            "config": self.config,
            "seed": self.seed,
            "strategy": self.strategy,
            "epoch_losses": self.epoch_losses,
            "eval_report": self.eval_report,
        }

    def to_json(self) -> str:
        import json

        return json.dumps(self.to_payload(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_payload(cls, payload: dict) -> "RunRecord":
        return cls(
            config=payload["config"],
            seed=payload["seed"],
            strategy=payload["strategy"],
            epoch_losses=payload["epoch_losses"],
            eval_report=payload["eval_report"],
        )

    @property
    def mean_ap(self) -> float | None:
        return self.eval_report["mean_ap"]

    def ap_at(self, theta: float) -> float:
        report = EvalReport.from_dict(self.eval_report)
        return report.ap_at(theta)


def train(
    train_scenes: list[SyntheticScene],
    eval_scenes: list[SyntheticScene],
    config: ExperimentConfig,
    seed: int,
) -> RunRecord:
    """Mini-batch SGD over the linear head with the configured strategy.

    Deterministic given (scenes, config, seed); aborts with NumericalError on
    a non-finite loss.
    """
    config.validate()
    start = time.perf_counter()
    num_classes = config.data.classes
    rng = np.random.default_rng([seed, _STREAM_TRAIN_LOOP])
    head = DetectorHead.init(
        feature_dim(num_classes), num_classes,
        np.random.default_rng([seed, _STREAM_HEAD_INIT]), config.model.init_scale,
    )
    prepared = [PreparedScene.from_scene(s, num_classes) for s in train_scenes]
    settings = loss_settings(config)

    epoch_losses = []
    bs = config.train.batch_scenes
    for epoch in range(config.train.epochs):
        order = rng.permutation(len(prepared))
        terms = np.zeros(3)
        n_steps = 0
        for lo in range(0, len(order), bs):
            chunk = [prepared[i] for i in order[lo:lo + bs]]
            bundle = train_step(head, chunk, config, rng, settings)
            terms += (bundle.cls_loss, bundle.reg_loss, bundle.carl_loss)
            n_steps += 1
        mean = terms / max(n_steps, 1)
        epoch_losses.append({
            "epoch": epoch,
            "cls": round(float(mean[0]), 10),
            "reg": round(float(mean[1]), 10),
            "carl": round(float(mean[2]), 10),
            "total": round(float(mean.sum()), 10),
        })

    report, _ = evaluate_head(head, eval_scenes, config.eval, num_classes)
    record = RunRecord(
        config=config.to_dict(),
        seed=seed,
        strategy=f"{config.sampling.pos}/{config.sampling.neg}",
        epoch_losses=epoch_losses,
        eval_report=report.to_dict(),
        wall_time=time.perf_counter() - start,
    )
    return record


def run_experiment(config: ExperimentConfig, seed: int) -> RunRecord:
    """Generate seed-derived scenes and train. Scene streams depend only on
    the seed (and the data section), so different strategies at the same seed
    see identical data."""
    config.validate()
    train_scenes = gen_scenes(config.data, [seed, _STREAM_TRAIN_DATA], config.data.n_train_scenes)
    eval_scenes = gen_scenes(config.data, [seed, _STREAM_EVAL_DATA], config.data.n_eval_scenes,
                             first_id=config.data.n_train_scenes)
    return train(train_scenes, eval_scenes, config, seed)


def detections_from_scores(
    boxes: np.ndarray,
    scores: np.ndarray,
    eval_cfg: EvalSettings,
    num_classes: int,
):
    """Per-class score threshold + NMS + top-k cap over one image's proposals."""
    det_boxes, det_classes, det_scores = [], [], []
    for c in range(num_classes):
        sc = scores[:, c]
        cand = np.flatnonzero(sc >= eval_cfg.score_thr)
        if cand.size == 0:
            continue
        kept = cand[nms(boxes[cand], sc[cand], eval_cfg.nms_thr)]
        det_boxes.append(boxes[kept])
        det_classes.append(np.full(kept.size, c, dtype=np.int64))
        det_scores.append(sc[kept])
    if not det_boxes:
        return (np.empty((0, 4)), np.empty(0, np.int64), np.empty(0))
    det_boxes = np.concatenate(det_boxes)
    det_classes = np.concatenate(det_classes)
    det_scores = np.concatenate(det_scores)
    if det_scores.size > eval_cfg.max_dets:
        top = np.argsort(-det_scores, kind="stable")[:eval_cfg.max_dets]
        det_boxes, det_classes, det_scores = det_boxes[top], det_classes[top], det_scores[top]
    return det_boxes, det_classes, det_scores


def evaluate_head(
    head: DetectorHead,
    scenes: list[SyntheticScene],
    eval_cfg: EvalSettings,
    num_classes: int,
):
    """Run inference on held-out scenes and evaluate; returns (report, images)."""
    images = []
    for scene in scenes:
        logits, deltas = head.forward(scene.features)
        scores = softmax(logits)
        boxes = clip_boxes(apply_delta(scene.proposals, deltas), scene.width, scene.height)
        det_boxes, det_classes, det_scores = detections_from_scores(
            boxes, scores, eval_cfg, num_classes)
        images.append(ImageResult(
            image_id=scene.image_id,
            gt_boxes=scene.gt_boxes,
            gt_classes=scene.gt_classes,
            det_boxes=det_boxes,
            det_classes=det_classes,
            det_scores=det_scores,
        ))
    report = coco_map(images, tuple(eval_cfg.thetas), class_ids=tuple(range(num_classes)))
    return report, images


def run_key(config: ExperimentConfig, seed: int) -> str:
    """Stable identity of a run for caching and directory naming."""
    import hashlib

    return hashlib.sha256(
        (canonical_json(config.to_dict()) + f"#{seed}").encode()).hexdigest()[:12]
