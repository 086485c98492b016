"""Group graph construction and the greedy mini-batch sampler."""

import numpy as np
import numpy.testing as npt
import pytest

from gwsm.errors import ContractError
from gwsm.grouping import (ImageSample, build_graph, epoch_iterator,
                           eval_iterator, greedy_sample, label_overlap)
from gwsm.tensor import Tensor


def _sample(sid, classes, num_classes=6):
    label = np.zeros(num_classes)
    label[list(classes)] = 1.0
    return ImageSample(id=sid, image=Tensor(np.zeros((3, 4, 4))), label=label)


def _states(n):
    return [Tensor(np.zeros((2, 2, 2))) for _ in range(n)]


class TestBuildGraph:
    def test_shared_class_edges(self):
        cat, dog = 0, 1
        samples = [_sample(0, {cat}), _sample(1, {cat, dog}), _sample(2, {dog})]
        g = build_graph(samples, _states(3))
        expected = np.array([
            [True, True, False],
            [True, True, True],
            [False, True, True],
        ])
        npt.assert_array_equal(g.adjacency, expected)

    def test_single_node(self):
        g = build_graph([_sample(0, {2})], _states(1))
        npt.assert_array_equal(g.adjacency, [[True]])

    def test_disjoint_labels_identity(self):
        samples = [_sample(i, {i}) for i in range(4)]
        g = build_graph(samples, _states(4))
        npt.assert_array_equal(g.adjacency, np.eye(4, dtype=bool))

    def test_empty_group_rejected(self):
        with pytest.raises(ContractError):
            build_graph([], [])

    def test_adjacency_is_overlap_predicate(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            k = int(rng.integers(1, 7))
            samples = []
            for i in range(k):
                n_cls = int(rng.integers(1, 4))
                samples.append(_sample(i, set(rng.choice(6, n_cls, replace=False))))
            g = build_graph(samples, _states(k))
            for i in range(k):
                for j in range(k):
                    if i == j:
                        assert g.adjacency[i, j]
                    else:
                        overlap = label_overlap(samples[i].label, samples[j].label)
                        assert g.adjacency[i, j] == (overlap > 0)
            npt.assert_array_equal(g.adjacency, g.adjacency.T)


class TestGreedySample:
    def test_largest_overlap_chosen_first(self):
        # seed has {a, b}; pool overlaps 2, 1, 1, 0
        seed_img = _sample(0, {0, 1})
        pool = [seed_img,
                _sample(1, {0, 1, 2}),   # overlap 2
                _sample(2, {0, 3}),      # overlap 1
                _sample(3, {1, 4}),      # overlap 1
                _sample(4, {5})]         # overlap 0
        for trial in range(30):
            rng = np.random.default_rng(trial)
            batch = greedy_sample(pool, 4, rng)
            seed_label = batch[0].label
            overlaps = [label_overlap(seed_label, s.label) for s in batch[1:]]
            assert overlaps == sorted(overlaps, reverse=True)
            if batch[0].id == 0:
                assert batch[1].id == 1  # the overlap-2 image always first

    def test_k1_returns_only_seed(self):
        batch = greedy_sample([_sample(i, {0}) for i in range(5)], 1,
                              np.random.default_rng(0))
        assert len(batch) == 1

    def test_shared_class_returns_k_distinct(self):
        pool = [_sample(i, {0}) for i in range(10)]
        batch = greedy_sample(pool, 6, np.random.default_rng(1))
        ids = [s.id for s in batch]
        assert len(ids) == len(set(ids)) == 6

    def test_overlap_non_increasing(self):
        rng = np.random.default_rng(2)
        for trial in range(50):
            pool = []
            for i in range(12):
                n_cls = int(rng.integers(1, 4))
                pool.append(_sample(i, set(rng.choice(6, n_cls, replace=False))))
            batch = greedy_sample(pool, 6, rng)
            overlaps = [label_overlap(batch[0].label, s.label) for s in batch[1:]]
            assert all(a >= b for a, b in zip(overlaps, overlaps[1:]))

    def test_pool_too_small(self):
        with pytest.raises(ContractError):
            greedy_sample([_sample(0, {0})], 2, np.random.default_rng(0))


class TestEpochIterator:
    def _pool(self, n, seed=3):
        rng = np.random.default_rng(seed)
        return [_sample(i, set(rng.choice(6, int(rng.integers(1, 4)),
                                          replace=False))) for i in range(n)]

    def test_partition_drops_remainder(self):
        batches = list(epoch_iterator(self._pool(10), 4, np.random.default_rng(0)))
        assert len(batches) == 2
        ids = [s.id for b in batches for s in b]
        assert len(ids) == len(set(ids)) == 8

    def test_same_seed_identical(self):
        pool = self._pool(16)
        a = [[s.id for s in b] for b in epoch_iterator(pool, 4, np.random.default_rng(5))]
        b = [[s.id for s in b] for b in epoch_iterator(pool, 4, np.random.default_rng(5))]
        assert a == b

    def test_different_seeds_differ(self):
        pool = self._pool(32)
        a = [[s.id for s in b] for b in epoch_iterator(pool, 4, np.random.default_rng(0))]
        b = [[s.id for s in b] for b in epoch_iterator(pool, 4, np.random.default_rng(1))]
        assert a != b

    def test_eval_iterator_keeps_remainder(self):
        batches = list(eval_iterator(self._pool(10), 4, np.random.default_rng(0)))
        ids = [s.id for b in batches for s in b]
        assert sorted(ids) == list(range(10))
        assert [len(b) for b in batches] == [4, 4, 2]
