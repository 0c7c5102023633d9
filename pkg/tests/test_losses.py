import dataclasses
import json
from pathlib import Path

import numpy as np
import pytest

from pisa.losses import (
    LossSettings,
    carl,
    carl_grad_approx,
    cross_entropy,
    softmax,
    total_loss,
    weighted_ce,
)

from conftest import random_batch

GOLDEN_PATH = Path(__file__).parent / "data" / "total_loss_golden.json"


def ce_loss_of_logits(logits, targets, w):
    scores = softmax(logits)
    return float(np.sum(w * cross_entropy(scores, targets)))


class TestWeightedCe:
    def test_perfect_prediction_zero_loss(self):
        scores = np.array([[1.0, 0.0, 0.0]])
        loss, _ = weighted_ce(scores, np.array([0]), np.ones(1))
        assert loss == 0.0

    def test_uniform_weights_equal_plain_ce(self, rng):
        scores = softmax(rng.normal(size=(16, 4)))
        targets = rng.integers(0, 4, size=16)
        loss, _ = weighted_ce(scores, targets, np.ones(16))
        assert loss == pytest.approx(float(cross_entropy(scores, targets).sum()))

    def test_gradient_matches_finite_differences(self, rng):
        n, c = 12, 4
        logits = rng.normal(0, 1.5, size=(n, c))
        targets = rng.integers(0, c, size=n)
        w = rng.uniform(0.2, 2.0, size=n)
        _, grad = weighted_ce(softmax(logits), targets, w)
        h = 1e-6
        for i in range(n):
            for j in range(c):
                bump = np.zeros_like(logits)
                bump[i, j] = h
                fd = (ce_loss_of_logits(logits + bump, targets, w)
                      - ce_loss_of_logits(logits - bump, targets, w)) / (2 * h)
                assert abs(fd - grad[i, j]) <= 1e-5 * max(1.0, abs(fd))

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            weighted_ce(np.array([[np.nan, 1.0]]), np.array([0]), np.ones(1))


class TestCarl:
    def test_equal_probabilities_all_coeffs_one(self):
        res = carl(np.full(4, 0.7), np.array([1.0, 2.0, 3.0, 4.0]))
        assert np.allclose(res.coeffs, 1.0)
        assert res.loss == pytest.approx(10.0)

    def test_hand_example(self):
        # n=2, k=1, b=0.2, p=[1,0], L=[1,2]: v=[1,0.2], c=[5/3,1/3]
        res = carl(np.array([1.0, 0.0]), np.array([1.0, 2.0]), k=1.0, b=0.2)
        assert np.allclose(res.v, [1.0, 0.2])
        assert np.allclose(res.coeffs, [5 / 3, 1 / 3])
        assert res.loss == pytest.approx(7 / 3)

    def test_coeffs_sum_to_n(self, rng):
        for _ in range(100):
            n = int(rng.integers(1, 64))
            res = carl(rng.uniform(0, 1, size=n), rng.uniform(0, 3, size=n),
                       k=rng.uniform(0.5, 2), b=rng.uniform(0, 0.5))
            assert abs(res.coeffs.sum() - n) < 1e-9

    def test_empty_input(self):
        res = carl(np.empty(0), np.empty(0))
        assert res.loss == 0.0
        assert res.grad_p.size == 0

    def test_grad_p_matches_finite_differences(self, rng):
        for _ in range(20):
            n = int(rng.integers(2, 32))
            p = rng.uniform(0.05, 0.95, size=n)
            L = rng.uniform(0.01, 3, size=n)
            k = float(rng.uniform(0.5, 2.0))
            b = float(rng.uniform(0.0, 0.5))
            res = carl(p, L, k=k, b=b)
            h = 1e-6
            for i in range(n):
                pp, pm = p.copy(), p.copy()
                pp[i] += h
                pm[i] -= h
                fd = (carl(pp, L, k=k, b=b).loss - carl(pm, L, k=k, b=b).loss) / (2 * h)
                denom = max(abs(fd), 1e-9)
                assert abs(fd - res.grad_p[i]) / denom < 1e-6 or abs(fd - res.grad_p[i]) < 1e-9

    def test_grad_reg_is_coefficient(self, rng):
        res = carl(rng.uniform(0, 1, size=8), rng.uniform(0, 2, size=8))
        assert np.array_equal(res.grad_reg_losses, res.coeffs)

    def test_rejects_bad_params(self):
        with pytest.raises(ValueError):
            carl(np.array([0.5]), np.array([1.0]), k=0.0)
        with pytest.raises(ValueError):
            carl(np.array([0.5]), np.array([1.0]), b=1.0)
        with pytest.raises(ValueError):
            carl(np.array([1.5]), np.array([1.0]))


class TestCarlApprox:
    def test_matches_diagonal_term_for_small_v_ratio(self, rng):
        # per-sample deviation from the diagonal exact term is exactly v_i/S
        n = 512
        p = rng.uniform(0.05, 0.95, size=n)
        L = rng.uniform(0.01, 2.0, size=n)
        res = carl(p, L, k=1.0, b=0.2)
        ratio = res.v / res.v_total
        assert ratio.max() < 0.01
        approx = carl_grad_approx(p, L, k=1.0, b=0.2)
        diag = (n / res.v_total) * (1.0 - ratio) * res.dv_dp * L
        rel = np.abs(approx - diag) / np.maximum(np.abs(diag), 1e-12)
        assert np.all(rel <= ratio / (1.0 - ratio) + 1e-12)
        assert rel.max() < 0.02

    def test_equals_first_term_of_exact_expansion(self, rng):
        n = 64
        p = rng.uniform(0.1, 0.9, size=n)
        L = rng.uniform(0.1, 2.0, size=n)
        res = carl(p, L, k=1.3, b=0.1)
        assert np.allclose(carl_grad_approx(p, L, k=1.3, b=0.1), res.grad_p_first_term())

    def test_single_sample_is_flagged(self):
        with pytest.raises(ValueError):
            carl_grad_approx(np.array([0.5]), np.array([1.0]))

    def test_k1_closed_form(self, rng):
        # k = 1: approx gradient is n (1-b) / S times the regression loss
        n, b = 32, 0.2
        p = rng.uniform(0, 1, size=n)
        L = rng.uniform(0, 2, size=n)
        v = (1 - b) * p + b
        expected = n * (1 - b) / v.sum() * L
        assert np.allclose(carl_grad_approx(p, L, k=1.0, b=b), expected)


class TestCarlGradientStructure:
    def test_negative_only_below_weighted_mean(self, rng):
        for _ in range(50):
            n = int(rng.integers(2, 40))
            res = carl(rng.uniform(0.05, 0.95, size=n), rng.uniform(0, 3, size=n))
            wm = float(np.sum(res.v * res.reg_losses) / res.v_total)
            neg = res.grad_p < 0
            assert np.all(res.reg_losses[neg] < wm + 1e-12)

    def test_strictly_increasing_in_reg_loss(self, rng):
        # evaluate the exact gradient at two loss values for the same sample
        for _ in range(200):
            n = int(rng.integers(2, 32))
            p = rng.uniform(0.05, 0.95, size=n)
            L = rng.uniform(0.01, 3, size=n)
            k = float(rng.uniform(0.5, 2))
            b = float(rng.uniform(0, 0.5))
            i = int(rng.integers(0, n))
            L2 = L.copy()
            L2[i] += rng.uniform(0.1, 2.0)
            g1 = carl(p, L, k=k, b=b).grad_p[i]
            g2 = carl(p, L2, k=k, b=b).grad_p[i]
            assert g2 > g1

    def test_affine_slope_with_v_fixed(self, rng):
        # holding every v (and the weighted mean term) fixed, the gradient is
        # affine in L_i with slope (n/S) dv_i/dp_i
        n = 16
        p = rng.uniform(0.1, 0.9, size=n)
        L = rng.uniform(0.1, 2, size=n)
        res = carl(p, L)
        slope = (n / res.v_total) * res.dv_dp
        assert np.all(slope > 0)
        wm = float(np.sum(res.v * L) / res.v_total)
        reconstructed = slope * (L - wm)
        assert np.allclose(reconstructed, res.grad_p)


class TestTotalLoss:
    def _settings(self, carl_on=False):
        return LossSettings(carl_enable=carl_on)

    def test_disabled_components_give_plain_baseline(self, rng):
        batch = random_batch(rng)
        bundle = total_loss(batch, np.ones(batch.num_samples), self._settings())
        active = batch.assignment.labels != -1
        ce = cross_entropy(batch.class_scores[active],
                           batch.assignment.target_class[active])
        assert bundle.cls_loss == pytest.approx(float(ce.mean()))
        assert bundle.carl_loss == 0.0

    def test_isr_normalization_keeps_cls_value(self, rng):
        from pisa.harness import batch_weights_for_config
        from pisa.config import ExperimentConfig

        batch = random_batch(rng)
        cfg = ExperimentConfig.from_dict(
            {"isr": {"enable_pos": True, "enable_neg": True}})
        w = batch_weights_for_config(batch, cfg)
        plain = total_loss(batch, np.ones(batch.num_samples), self._settings())
        weighted = total_loss(batch, w, self._settings())
        assert weighted.cls_loss == pytest.approx(plain.cls_loss, abs=1e-9)
        assert not np.allclose(weighted.grad_scores, plain.grad_scores)

    def test_full_gradients_match_finite_differences(self, rng):
        batch = random_batch(rng, n_samples=10)
        settings = self._settings(carl_on=True)
        w = np.ones(batch.num_samples)
        logits = np.log(np.maximum(batch.class_scores, 1e-12))

        def loss_at(logits_x, deltas_x):
            b2 = dataclasses.replace(batch, class_scores=softmax(logits_x), reg_deltas=deltas_x)
            return total_loss(b2, w, settings).total

        bundle = total_loss(batch, w, settings)
        h = 1e-6
        for i in range(batch.num_samples):
            for j in range(batch.num_classes + 1):
                bump = np.zeros_like(logits)
                bump[i, j] = h
                fd = (loss_at(logits + bump, batch.reg_deltas)
                      - loss_at(logits - bump, batch.reg_deltas)) / (2 * h)
                assert abs(fd - bundle.grad_scores[i, j]) <= 1e-4 * max(1.0, abs(fd))
        for i in range(batch.num_samples):
            for j in range(4):
                bump = np.zeros_like(batch.reg_deltas)
                bump[i, j] = h
                fd = (loss_at(logits, batch.reg_deltas + bump)
                      - loss_at(logits, batch.reg_deltas - bump)) / (2 * h)
                assert abs(fd - bundle.grad_deltas[i, j]) <= 1e-4 * max(1.0, abs(fd))

    def test_golden_values(self):
        golden = json.loads(GOLDEN_PATH.read_text())
        batch = random_batch(np.random.default_rng(20240), n_samples=24)
        w = np.ones(batch.num_samples)
        bundle = total_loss(batch, w, LossSettings(carl_enable=True))
        assert bundle.cls_loss == pytest.approx(golden["cls_loss"], abs=1e-10)
        assert bundle.reg_loss == pytest.approx(golden["reg_loss"], abs=1e-10)
        assert bundle.carl_loss == pytest.approx(golden["carl_loss"], abs=1e-10)
        assert np.sum(np.abs(bundle.grad_scores)) == pytest.approx(
            golden["grad_scores_l1"], abs=1e-9)
        assert np.sum(np.abs(bundle.grad_deltas)) == pytest.approx(
            golden["grad_deltas_l1"], abs=1e-9)
