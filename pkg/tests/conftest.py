import numpy as np
import pytest

from pisa.assignment import SampleBatch, assign
from pisa.losses import softmax


def random_batch(rng: np.random.Generator, n_samples=32, n_gts=4, num_classes=3,
                 extent=100.0, logit_scale=1.5) -> SampleBatch:
    """Random but internally consistent SampleBatch for fuzz tests."""
    gt_sizes = rng.uniform(10, 30, size=(n_gts, 2))
    gt_xy = rng.uniform(0, extent - 30, size=(n_gts, 2))
    gt_boxes = np.concatenate([gt_xy, gt_xy + gt_sizes], axis=1)
    gt_classes = rng.integers(0, num_classes, size=n_gts)

    # half the proposals jitter a ground truth, half are background
    jittered = gt_boxes[rng.integers(0, n_gts, size=n_samples // 2)]
    jittered = jittered + rng.normal(0, 6, size=(n_samples // 2, 4))
    bg_xy = rng.uniform(0, extent - 20, size=(n_samples - n_samples // 2, 2))
    bg_wh = rng.uniform(5, 20, size=(n_samples - n_samples // 2, 2))
    background = np.concatenate([bg_xy, bg_xy + bg_wh], axis=1)
    proposals = np.concatenate([jittered, background])
    proposals[:, 2] = np.maximum(proposals[:, 2], proposals[:, 0] + 1.0)
    proposals[:, 3] = np.maximum(proposals[:, 3], proposals[:, 1] + 1.0)

    assignment = assign(proposals, gt_boxes, gt_classes, num_classes)
    scores = softmax(rng.normal(0, logit_scale, size=(n_samples, num_classes + 1)))
    deltas = rng.normal(0, 0.1, size=(n_samples, 4))

    from pisa.geometry import apply_delta, encode_delta

    regressed = apply_delta(proposals, deltas)
    targets = np.zeros((n_samples, 4))
    pos = assignment.pos_indices
    if pos.size:
        targets[pos] = encode_delta(proposals[pos], gt_boxes[assignment.matched_gt[pos]])
    return SampleBatch(
        proposals=proposals,
        assignment=assignment,
        gt_boxes=gt_boxes,
        gt_classes=gt_classes,
        class_scores=scores,
        reg_deltas=deltas,
        regressed_boxes=regressed,
        reg_targets=targets,
        image_ids=rng.integers(0, 3, size=n_samples),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
