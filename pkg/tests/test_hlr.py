import numpy as np
import pytest

from pisa.assignment import NEGATIVE, POSITIVE
from pisa.geometry import elementwise_iou, iou
from pisa.hlr import hierarchical_rank, iou_hlr, nms_cluster, score_hlr

from conftest import random_batch


def brute_force_hlr(group_id, key):
    """Independent two-step construction: sort each group explicitly, then lay
    out rank-0 samples of all groups by key descending, then rank-1, etc."""
    n = len(key)
    groups = {}
    for i in range(n):
        groups.setdefault(group_id[i], []).append(i)
    local = {}
    for g, members in groups.items():
        ordered = sorted(members, key=lambda i: (-key[i], i))
        for r, i in enumerate(ordered):
            local[i] = r
    sequence = []
    max_rank = max(local.values())
    for r in range(max_rank + 1):
        block = [i for i in range(n) if local[i] == r]
        block.sort(key=lambda i: (-key[i], i))
        sequence.extend(block)
    hlr = {i: pos for pos, i in enumerate(sequence)}
    return local, hlr


def brute_force_nms_clusters(boxes, scores, thr):
    """Greedy NMS oracle: repeatedly keep the top-score box, move everything
    with IoU > thr into its cluster."""
    remaining = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    cluster = {}
    reps = []
    while remaining:
        head = remaining.pop(0)
        reps.append(head)
        cluster[head] = head
        still = []
        for j in remaining:
            if iou(boxes[head], boxes[j]) > thr:
                cluster[j] = head
            else:
                still.append(j)
        remaining = still
    return cluster, reps


class TestHierarchicalRank:
    def test_single_group_is_plain_sort(self):
        r = hierarchical_rank([0, 1, 2], [7, 7, 7], [0.9, 0.6, 0.3])
        assert np.array_equal(r.hlr, [0, 1, 2])
        assert np.array_equal(r.local_rank, [0, 1, 2])

    def test_two_group_interleaving(self):
        # groups A: [0.9, 0.6], B: [0.8, 0.7] -> sequence 0.9, 0.8, 0.7, 0.6
        r = hierarchical_rank([10, 11, 12, 13], [0, 0, 1, 1], [0.9, 0.6, 0.8, 0.7])
        by_rank = r.key[np.argsort(r.hlr)]
        assert np.allclose(by_rank, [0.9, 0.8, 0.7, 0.6])

    def test_top_block_is_exactly_the_group_leaders(self, rng):
        for _ in range(20):
            n = int(rng.integers(4, 40))
            groups = rng.integers(0, 5, size=n)
            keys = rng.uniform(0, 1, size=n)
            r = hierarchical_rank(np.arange(n), groups, keys)
            n_groups = len(np.unique(groups))
            top = set(np.argsort(r.hlr)[:n_groups].tolist())
            leaders = set(np.flatnonzero(r.local_rank == 0).tolist())
            assert top == leaders

    def test_ties_break_by_index(self):
        r = hierarchical_rank([0, 1, 2, 3], [0, 0, 1, 1], [0.5, 0.5, 0.5, 0.5])
        assert np.array_equal(np.argsort(r.hlr), [0, 2, 1, 3])

    def test_matches_brute_force(self, rng):
        for _ in range(200):
            n = int(rng.integers(1, 64))
            groups = rng.integers(0, 8, size=n)
            keys = np.round(rng.uniform(0, 1, size=n), 2)  # induce ties
            r = hierarchical_rank(np.arange(n), groups, keys)
            local, hlr = brute_force_hlr(groups, keys)
            for i in range(n):
                assert r.local_rank[i] == local[i]
                assert r.hlr[i] == hlr[i]

    def test_permutation_property(self, rng):
        for _ in range(20):
            n = int(rng.integers(1, 50))
            r = hierarchical_rank(np.arange(n), rng.integers(0, 6, size=n), rng.uniform(size=n))
            assert np.array_equal(np.sort(r.hlr), np.arange(n))


class TestIouHlr:
    def test_empty_positives_gives_empty_result(self, rng):
        batch = random_batch(rng)
        batch.assignment.labels[:] = NEGATIVE
        r = iou_hlr(batch)
        assert r.size == 0

    def test_keys_are_regressed_ious(self, rng):
        batch = random_batch(rng)
        r = iou_hlr(batch)
        pos = batch.assignment.pos_indices
        expected = elementwise_iou(
            batch.regressed_boxes[pos], batch.gt_boxes[batch.assignment.matched_gt[pos]])
        assert np.allclose(r.key, expected)

    def test_ignores_proposal_coordinates(self, rng):
        # perturbing pre-regression proposals while holding regressed boxes
        # fixed must not change the ranking
        batch = random_batch(rng)
        r1 = iou_hlr(batch)
        batch.proposals = batch.proposals + rng.normal(0, 3, size=batch.proposals.shape)
        r2 = iou_hlr(batch)
        assert np.array_equal(r1.hlr, r2.hlr)

    def test_matches_brute_force(self, rng):
        for _ in range(100):
            batch = random_batch(rng, n_samples=int(rng.integers(8, 64)))
            r = iou_hlr(batch)
            if r.size == 0:
                continue
            local, hlr = brute_force_hlr(r.group_id.tolist(), r.key.tolist())
            assert [local[i] for i in range(r.size)] == r.local_rank.tolist()
            assert [hlr[i] for i in range(r.size)] == r.hlr.tolist()


class TestNmsCluster:
    def test_disjoint_boxes_are_singletons(self, rng):
        batch = random_batch(rng, n_samples=8)
        batch.assignment.labels[:] = NEGATIVE
        batch.regressed_boxes = np.array(
            [[i * 20.0, 0, i * 20 + 10, 10] for i in range(8)])
        c = nms_cluster(batch, 0.5)
        assert c.num_clusters == 8
        assert len(np.unique(c.cluster_id)) == 8

    def test_identical_boxes_one_cluster(self, rng):
        batch = random_batch(rng, n_samples=2)
        batch.assignment.labels[:] = NEGATIVE
        batch.regressed_boxes = np.array([[0, 0, 10, 10.0]] * 2)
        scores = batch.class_scores[:, :batch.num_classes].max(axis=1)
        c = nms_cluster(batch, 0.7)
        assert c.num_clusters == 1
        assert c.representative[0] == int(np.argmax(scores))

    def test_matches_greedy_oracle(self, rng):
        for _ in range(30):
            batch = random_batch(rng, n_samples=50)
            batch.assignment.labels[:] = NEGATIVE
            c = nms_cluster(batch, 0.7)
            scores = batch.class_scores[:, :batch.num_classes].max(axis=1)
            cluster, reps = brute_force_nms_clusters(
                batch.regressed_boxes, scores, 0.7)
            assert list(c.representative) == reps
            # same partition: members suppressed by the same representative
            for local, i in enumerate(c.indices):
                rep = c.representative[c.cluster_id[local]]
                assert cluster[i] == rep


class TestScoreHlr:
    def test_single_cluster_plain_sort(self, rng):
        batch = random_batch(rng, n_samples=4)
        batch.assignment.labels[:] = NEGATIVE
        batch.regressed_boxes = np.array([[0, 0, 10, 10.0]] * 4)
        c = nms_cluster(batch, 0.5)
        r = score_hlr(batch, c)
        scores = batch.class_scores[:, :batch.num_classes].max(axis=1)
        assert np.array_equal(r.ordered_indices(), np.argsort(-scores, kind="stable"))

    def test_cluster_interleaving(self, rng):
        batch = random_batch(rng, n_samples=4, num_classes=1)
        batch.assignment.labels[:] = NEGATIVE
        # clusters {0,1} and {2,3} far apart
        batch.regressed_boxes = np.array(
            [[0, 0, 10, 10.0], [0, 0, 10, 10], [50, 50, 60, 60], [50, 50, 60, 60]])
        s = np.array([0.9, 0.2, 0.5, 0.4])
        batch.class_scores = np.stack([s, 1 - s], axis=1)
        r = score_hlr(batch, nms_cluster(batch, 0.7))
        assert np.allclose(r.key[np.argsort(r.hlr)], [0.9, 0.5, 0.4, 0.2])

    def test_equal_scores_tie_by_index(self, rng):
        batch = random_batch(rng, n_samples=5, num_classes=1)
        batch.assignment.labels[:] = NEGATIVE
        batch.class_scores = np.full((5, 2), 0.5)
        r = score_hlr(batch, nms_cluster(batch, 0.7))
        assert np.array_equal(np.sort(r.hlr), np.arange(5))

    def test_no_negatives_empty(self, rng):
        batch = random_batch(rng)
        batch.assignment.labels[:] = POSITIVE
        c = nms_cluster(batch, 0.7)
        r = score_hlr(batch, c)
        assert r.size == 0

    def test_matches_brute_force(self, rng):
        for _ in range(100):
            batch = random_batch(rng, n_samples=int(rng.integers(8, 64)))
            c = nms_cluster(batch, 0.7)
            r = score_hlr(batch, c)
            if r.size == 0:
                continue
            local, hlr = brute_force_hlr(r.group_id.tolist(), r.key.tolist())
            assert [hlr[i] for i in range(r.size)] == r.hlr.tolist()
