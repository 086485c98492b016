"""Group graphs over label-sharing images and the greedy mini-batch sampler.

Two images are linked iff they share at least one class; every node carries a
self-edge.  Mini-batches are sampled greedily: a random seed image, then K-1
picks maximizing label overlap with that seed, without replacement within an
epoch.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .errors import ContractError
from .tensor import Tensor


@dataclass
class ImageSample:
    """One dataset element: image, multi-hot label, and (eval-only) pixel mask."""

    id: int
    image: Tensor  # (3, H0, W0)
    label: np.ndarray  # {0,1}^L
    gt_mask: np.ndarray | None = None  # (H0, W0) in {0..L}, 0 = background


@dataclass
class GraphNode:
    sample_id: int
    state: Tensor  # (C, H, W)


@dataclass
class GroupGraph:
    nodes: list[GraphNode]
    adjacency: np.ndarray  # (K, K) bool, symmetric, True diagonal
    samples: list[ImageSample] = field(default_factory=list)

    @property
    def size(self) -> int:
        return len(self.nodes)

    def neighbors(self, i: int) -> list[int]:
        """Indices j != i with an edge to node i, in ascending order."""
        return [j for j in range(self.size) if j != i and self.adjacency[i, j]]


def label_overlap(a: np.ndarray, b: np.ndarray) -> int:
    return int(np.dot(a, b))


def build_graph(samples: Sequence[ImageSample], states: Sequence[Tensor]) -> GroupGraph:
    """Adjacency = label-overlap predicate for i != j, plus all self-edges."""
    if len(samples) == 0:
        raise ContractError("cannot build a graph from an empty group")
    if len(samples) != len(states):
        raise ContractError(f"{len(samples)} samples but {len(states)} states")
    k = len(samples)
    adjacency = np.eye(k, dtype=bool)
    for i in range(k):
        for j in range(i + 1, k):
            linked = label_overlap(samples[i].label, samples[j].label) > 0
            adjacency[i, j] = adjacency[j, i] = linked
    nodes = [GraphNode(sample_id=s.id, state=st) for s, st in zip(samples, states)]
    return GroupGraph(nodes=nodes, adjacency=adjacency, samples=list(samples))


def _greedy_pick(pool: list[ImageSample], k: int,
                 rng: np.random.Generator) -> list[ImageSample]:
    """Seed uniformly from pool, then k-1 picks maximizing overlap with it."""
    seed_pos = int(rng.integers(len(pool)))
    batch = [pool.pop(seed_pos)]
    seed_label = batch[0].label
    while len(batch) < k:
        overlaps = np.array([label_overlap(seed_label, s.label) for s in pool])
        best = overlaps.max()
        candidates = np.flatnonzero(overlaps == best)
        pos = int(candidates[rng.integers(len(candidates))])
        batch.append(pool.pop(pos))
    return batch


def greedy_sample(dataset: Sequence[ImageSample], k: int,
                  rng: np.random.Generator) -> list[ImageSample]:
    """One greedy group of k distinct images from the full dataset."""
    if k < 1:
        raise ContractError(f"group size must be >= 1, got {k}")
    if len(dataset) < k:
        raise ContractError(f"dataset has {len(dataset)} images, need {k}")
    return _greedy_pick(list(dataset), k, rng)


def epoch_iterator(dataset: Sequence[ImageSample], k: int,
                   rng: np.random.Generator) -> Iterator[list[ImageSample]]:
    """Greedy groups covering the dataset once; a remainder < k is dropped."""
    pool = list(dataset)
    while len(pool) >= k:
        yield _greedy_pick(pool, k, rng)


def eval_iterator(dataset: Sequence[ImageSample], k: int,
                  rng: np.random.Generator) -> Iterator[list[ImageSample]]:
    """Like epoch_iterator but keeps the remainder as a final smaller group,
    so every image gets scored at evaluation time."""
    pool = list(dataset)
    while len(pool) >= k:
        yield _greedy_pick(pool, k, rng)
    if pool:
        yield _greedy_pick(pool, len(pool), rng)
