"""Weighted cross-entropy, smooth-L1 regression, and the classification-aware
regression loss (CARL), all with exact analytic gradients.

CARL couples the two branches: each positive's regression loss is scaled by
``c_i = v_i / mean(v)`` with ``v_i = ((1-b) p_i + b)^k`` and ``p_i`` the
predicted probability of its ground-truth class. The gradient with respect
to ``p_i`` is the exact derivative, including the cross terms through
``S = sum(v)``:

    dL/dv_i = (n/S) * (L_i - (1/S) * sum_j v_j L_j)
    dv_i/dp_i = (1-b) * k * ((1-b) p_i + b)^(k-1)

The large-batch approximation ``dL/dp_i ~= (n/S) * dv_i/dp_i * L_i`` is kept
only as a validation target (:func:`carl_grad_approx`); the exact form is
what ships.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from pisa.assignment import IGNORED, SampleBatch
from pisa.geometry import smooth_l1, smooth_l1_grad

__all__ = [
    "CarlResult",
    "LossBundle",
    "LossSettings",
    "carl",
    "carl_grad_approx",
    "cross_entropy",
    "softmax",
    "total_loss",
    "weighted_ce",
]

_TINY = 1e-12


def softmax(logits: np.ndarray) -> np.ndarray:
    """Numerically stable softmax over the last axis."""
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(scores: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Per-sample cross-entropy -log p(target) from probability rows."""
    scores = np.asarray(scores, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    p = scores[np.arange(scores.shape[0]), targets]
    return -np.log(np.maximum(p, _TINY))


def weighted_ce(scores: np.ndarray, targets: np.ndarray, w_norm: np.ndarray):
    """Weighted cross-entropy sum and its gradient with respect to logits.

    ``scores`` must be softmax probabilities; the per-sample weights are
    treated as constants, so the gradient row is ``w_i * (s_i - onehot_i)``.
    Returns ``(loss, grad_logits)``.
    """
    scores = np.asarray(scores, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    w = np.asarray(w_norm, dtype=np.float64)
    if not (np.all(np.isfinite(scores)) and np.all(np.isfinite(w))):
        raise ValueError("weighted_ce requires finite scores and weights")
    ce = cross_entropy(scores, targets)
    loss = float(np.sum(w * ce))
    grad = scores.copy()
    grad[np.arange(scores.shape[0]), targets] -= 1.0
    grad *= w[:, None]
    return loss, grad


@dataclass
class CarlResult:
    """CARL loss with its exact gradients.

    ``grad_reg_losses`` is the derivative with respect to each per-sample
    regression loss (the coefficients ``c``); callers chain it through the
    smooth-L1 derivative to reach the raw regression outputs.
    """

    loss: float
    coeffs: np.ndarray          # c_i, mean exactly 1
    v: np.ndarray
    grad_p: np.ndarray          # exact dL/dp_i
    grad_reg_losses: np.ndarray  # dL/dL_i = c_i
    dv_dp: np.ndarray
    v_total: float              # S = sum(v)
    reg_losses: np.ndarray = field(repr=False, default=None)

    def grad_p_first_term(self) -> np.ndarray:
        """First (dominant) term of the exact gradient, (n/S) dv/dp L_i."""
        n = self.v.shape[0]
        if n == 0:
            return np.empty(0, dtype=np.float64)
        return (n / self.v_total) * self.dv_dp * self.reg_losses


def _check_carl_params(p: np.ndarray, k: float, b: float) -> None:
    if k <= 0.0:
        raise ValueError("k must be > 0")
    if not 0.0 <= b < 1.0:
        raise ValueError("b must lie in [0, 1)")
    if p.size and (p.min() < 0.0 or p.max() > 1.0):
        raise ValueError("probabilities must lie in [0, 1]")


def carl(p: np.ndarray, reg_losses: np.ndarray, k: float = 1.0, b: float = 0.2) -> CarlResult:
    """Classification-aware regression loss over the positives.

    ``p`` holds each positive's predicted ground-truth-class probability and
    ``reg_losses`` its smooth-L1 regression loss. An empty input yields zero
    loss and empty gradients.
    """
    p = np.asarray(p, dtype=np.float64).reshape(-1)
    reg = np.asarray(reg_losses, dtype=np.float64).reshape(-1)
    if p.shape != reg.shape:
        raise ValueError("p and reg_losses must be aligned")
    _check_carl_params(p, k, b)
    n = p.shape[0]
    if n == 0:
        empty = np.empty(0, dtype=np.float64)
        return CarlResult(0.0, empty, empty.copy(), empty.copy(), empty.copy(),
                          empty.copy(), 0.0, reg_losses=empty.copy())

    base = (1.0 - b) * p + b
    v = base ** k
    s_total = float(np.sum(v))
    coeffs = n * v / s_total
    loss = float(np.sum(coeffs * reg))

    dv_dp = (1.0 - b) * k * base ** (k - 1.0)
    weighted_mean = float(np.sum(v * reg)) / s_total
    grad_p = (n / s_total) * (reg - weighted_mean) * dv_dp
    return CarlResult(
        loss=loss,
        coeffs=coeffs,
        v=v,
        grad_p=grad_p,
        grad_reg_losses=coeffs.copy(),
        dv_dp=dv_dp,
        v_total=s_total,
        reg_losses=reg.copy(),
    )


def carl_grad_approx(p: np.ndarray, reg_losses: np.ndarray, k: float = 1.0, b: float = 0.2) -> np.ndarray:
    """Large-batch approximation of the CARL gradient, (n/S) dv/dp L_i.

    Valid only when every ``v_i`` is small against ``S``; a single-sample
    input (where ``v_1 == S``) is rejected rather than silently returned.
    """
    p = np.asarray(p, dtype=np.float64).reshape(-1)
    reg = np.asarray(reg_losses, dtype=np.float64).reshape(-1)
    _check_carl_params(p, k, b)
    n = p.shape[0]
    if n <= 1:
        raise ValueError("approximation degenerates for n <= 1 (v_1 == S)")
    base = (1.0 - b) * p + b
    v = base ** k
    s_total = float(np.sum(v))
    dv_dp = (1.0 - b) * k * base ** (k - 1.0)
    return (n / s_total) * dv_dp * reg


@dataclass
class LossSettings:
    """Loss-term configuration for :func:`total_loss`."""

    carl_enable: bool = False
    carl_k: float = 1.0
    carl_b: float = 0.2
    cls_weight: float = 1.0
    reg_weight: float = 1.0
    carl_weight: float = 1.0


@dataclass
class LossBundle:
    """Scalar loss terms plus per-sample gradients.

    ``grad_scores`` is the gradient with respect to the classification
    logits; ``grad_deltas`` with respect to the raw regression outputs.
    """

    cls_loss: float
    reg_loss: float
    carl_loss: float
    grad_scores: np.ndarray  # (N, C+1)
    grad_deltas: np.ndarray  # (N, 4)

    @property
    def total(self) -> float:
        return self.cls_loss + self.reg_loss + self.carl_loss


def total_loss(batch: SampleBatch, w_norm: np.ndarray, settings: LossSettings) -> LossBundle:
    """Combined loss over a batch whose ignored rows carry zero weight.

    Normalization: classification is averaged over the non-ignored count,
    regression and CARL over the positive count. With uniform weights and
    CARL disabled this reduces to the plain unweighted baseline; the
    weight-normalization identity keeps the classification value unchanged
    when reweighting turns on.
    """
    batch.validate()
    n = batch.num_samples
    labels = batch.assignment.labels
    active = np.flatnonzero(labels != IGNORED)
    pos = batch.assignment.pos_indices
    n_active = active.size
    n_pos = pos.size

    grad_scores = np.zeros_like(batch.class_scores)
    grad_deltas = np.zeros((n, 4), dtype=np.float64)

    w = np.asarray(w_norm, dtype=np.float64).reshape(-1)
    if w.shape[0] != n:
        raise ValueError("w_norm must align with the batch")

    cls_loss = 0.0
    if n_active:
        targets = batch.assignment.target_class[active]
        loss_sum, grad = weighted_ce(batch.class_scores[active], targets, w[active])
        scale = settings.cls_weight / n_active
        cls_loss = scale * loss_sum
        grad_scores[active] = scale * grad

    reg_loss = 0.0
    carl_loss = 0.0
    if n_pos:
        diff = batch.reg_deltas[pos] - batch.reg_targets[pos]
        per_coord = smooth_l1(diff)
        per_sample = per_coord.sum(axis=1)
        reg_scale = settings.reg_weight / n_pos
        reg_loss = reg_scale * float(per_sample.sum())
        dgrad = reg_scale * smooth_l1_grad(diff)

        if settings.carl_enable:
            targets = batch.assignment.target_class[pos]
            p = batch.class_scores[pos, targets]
            result = carl(p, per_sample, k=settings.carl_k, b=settings.carl_b)
            carl_scale = settings.carl_weight / n_pos
            carl_loss = carl_scale * result.loss
            dgrad = dgrad + carl_scale * result.coeffs[:, None] * smooth_l1_grad(diff)
            # chain dL/dp through the softmax row: dp/dz_j = p (1[j=t] - s_j)
            coeff = carl_scale * result.grad_p * p
            onehot = np.zeros_like(batch.class_scores[pos])
            onehot[np.arange(n_pos), targets] = 1.0
            grad_scores[pos] += coeff[:, None] * (onehot - batch.class_scores[pos])
        grad_deltas[pos] = dgrad

    if not (np.isfinite(cls_loss) and np.isfinite(reg_loss) and np.isfinite(carl_loss)):
        raise ValueError("non-finite loss")
    return LossBundle(
        cls_loss=cls_loss,
        reg_loss=reg_loss,
        carl_loss=carl_loss,
        grad_scores=grad_scores,
        grad_deltas=grad_deltas,
    )
