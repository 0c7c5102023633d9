import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pisa.geometry import (
    LOG_EXTENT_CLAMP,
    apply_delta,
    box_area,
    clip_boxes,
    elementwise_iou,
    encode_delta,
    iou,
    pairwise_iou,
    smooth_l1,
    smooth_l1_grad,
)

coord = st.floats(0, 100, allow_nan=False, allow_infinity=False)


def box_strategy(min_side=0.5):
    return st.tuples(coord, coord, st.floats(min_side, 50), st.floats(min_side, 50)).map(
        lambda t: np.array([t[0], t[1], t[0] + t[2], t[1] + t[3]])
    )


class TestIou:
    def test_identical(self):
        assert iou([0, 0, 10, 10], [0, 0, 10, 10]) == 1.0

    def test_disjoint(self):
        assert iou([0, 0, 2, 2], [4, 4, 6, 6]) == 0.0

    def test_partial_overlap(self):
        # intersection 1, union 4 + 4 - 1 = 7
        assert iou([0, 0, 2, 2], [1, 1, 3, 3]) == pytest.approx(1 / 7, abs=1e-12)

    def test_zero_area_box_is_legal(self):
        assert iou([5, 5, 5, 5], [0, 0, 10, 10]) == 0.0

    @given(a=box_strategy(), b=box_strategy())
    @settings(max_examples=200, deadline=None)
    def test_symmetric_and_bounded(self, a, b):
        v = iou(a, b)
        assert v == iou(b, a)
        assert 0.0 <= v <= 1.0

    def test_pairwise_matches_scalar(self, rng):
        a = rng.uniform(0, 50, size=(12, 2))
        boxes1 = np.concatenate([a, a + rng.uniform(1, 30, size=(12, 2))], axis=1)
        b = rng.uniform(0, 50, size=(7, 2))
        boxes2 = np.concatenate([b, b + rng.uniform(1, 30, size=(7, 2))], axis=1)
        mat = pairwise_iou(boxes1, boxes2)
        for i in range(12):
            for j in range(7):
                assert mat[i, j] == pytest.approx(iou(boxes1[i], boxes2[j]), abs=1e-12)
        diag = elementwise_iou(boxes1[:7], boxes2)
        assert np.allclose(diag, mat[np.arange(7), np.arange(7)])


class TestDeltaCodec:
    def test_identity(self):
        d = encode_delta([3, 4, 9, 11], [3, 4, 9, 11])
        assert np.allclose(d, 0.0)

    def test_double_size(self):
        d = encode_delta([0, 0, 2, 2], [0, 0, 4, 4])
        assert d[0] == pytest.approx(0.5)
        assert d[1] == pytest.approx(0.5)
        assert d[2] == pytest.approx(np.log(2))
        assert d[3] == pytest.approx(np.log(2))

    def test_zero_delta_is_noop(self):
        src = np.array([2.0, 3.0, 8.0, 9.0])
        assert np.allclose(apply_delta(src, np.zeros(4)), src)

    def test_round_trip_random_pairs(self, rng):
        # size ratios stay below the decode clamp of 1000/16
        n = 1000
        xy = rng.uniform(0, 80, size=(n, 2))
        wh = rng.uniform(1.0, 40, size=(n, 2))
        src = np.concatenate([xy, xy + wh], axis=1)
        xy2 = rng.uniform(0, 80, size=(n, 2))
        wh2 = rng.uniform(1.0, 40, size=(n, 2))
        target = np.concatenate([xy2, xy2 + wh2], axis=1)
        decoded = apply_delta(src, encode_delta(src, target))
        assert np.max(np.abs(decoded - target)) < 1e-9

    def test_large_dw_is_clamped(self):
        out = apply_delta([0, 0, 2, 2], [0, 0, 80.0, 0])
        assert np.all(np.isfinite(out))
        assert out[2] - out[0] == pytest.approx(2.0 * np.exp(LOG_EXTENT_CLAMP))

    def test_rejects_zero_extent_source(self):
        with pytest.raises(ValueError):
            encode_delta([0, 0, 0, 2], [0, 0, 2, 2])
        with pytest.raises(ValueError):
            apply_delta([0, 0, 2, 0], np.zeros(4))


class TestSmoothL1:
    @pytest.mark.parametrize("x,expected", [(0.0, 0.0), (0.5, 0.125), (2.0, 1.5), (-2.0, 1.5)])
    def test_values(self, x, expected):
        assert smooth_l1(x) == pytest.approx(expected)

    def test_even_and_monotone(self, rng):
        x = rng.uniform(0, 5, size=200)
        assert np.allclose(smooth_l1(x), smooth_l1(-x))
        xs = np.sort(x)
        assert np.all(np.diff(smooth_l1(xs)) >= 0)

    def test_derivative_continuous_at_one(self):
        h = 1e-7
        for x0 in (1.0, -1.0):
            fd = (smooth_l1(x0 + h) - smooth_l1(x0 - h)) / (2 * h)
            assert fd == pytest.approx(smooth_l1_grad(x0), abs=1e-6)

    def test_grad_matches_finite_difference(self, rng):
        x = rng.uniform(-3, 3, size=100)
        h = 1e-6
        fd = (smooth_l1(x + h) - smooth_l1(x - h)) / (2 * h)
        assert np.max(np.abs(fd - smooth_l1_grad(x))) < 1e-6


def test_box_area_and_clip():
    assert box_area([0, 0, 3, 4]) == 12.0
    assert box_area([5, 5, 2, 8]) == 0.0  # inverted extent clamps to zero
    clipped = clip_boxes(np.array([[-5.0, -1.0, 150.0, 60.0]]), 100, 50)
    assert np.allclose(clipped, [[0, 0, 100, 50]])
