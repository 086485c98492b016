"""Graph reasoning over image groups.

Per step, every connected pair gets a cross-image affinity matrix from a
low-rank bilinear form over flattened embeddings, and every node gets a
residual self-attention feature.  Row-softmaxed affinities turn neighbor
embeddings into messages, messages are summed with the self-edge feature,
a ConvGRU folds the sum into the node state, and a stochastic spatial
dropout mask rewrites the state before the next step.  A class-aware 1x1
conv plus global average pooling reads out logits from the final states.

The reverse direction of each affinity is the transpose of the forward one
(computed once, never recomputed); the canonical direction of a pair is
fixed by ascending sample id so results do not depend on node order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ShapeError
from .grouping import GroupGraph
from .tensor import (Tensor, concat_channels, conv2d, global_average_pool,
                     matmul, mean_over_channels, mul, reshape, row_softmax,
                     sigmoid, tanh, transpose)


@dataclass
class EdgeAffinity:
    """Cross-image affinity for an ordered node pair: (WH_i, WH_j) matrix."""

    matrix: Tensor


@dataclass
class SelfEdgeFeature:
    """Self-attention-enriched embedding for one node: (C, H, W)."""

    feature: Tensor


@dataclass
class DropoutMask:
    """Spatial mask (H, W) plus which branch produced it."""

    s: Tensor
    branch: str  # "importance" | "drop" | "identity"


@dataclass
class GnnParams:
    """Low-rank edge factors, self-attention convs, ConvGRU gates, readout."""

    P: Tensor  # (C, C/d)
    Q: Tensor  # (C, C/d)
    att_f: Tensor  # (C/8, C, 1, 1)
    att_g: Tensor  # (C/8, C, 1, 1)
    att_h: Tensor  # (C, C, 1, 1)
    gru_wz: Tensor  # (C, C, 3, 3) over the message
    gru_uz: Tensor  # (C, C, 3, 3) over the previous state
    gru_bz: Tensor  # (C,)
    gru_wr: Tensor
    gru_ur: Tensor
    gru_br: Tensor
    gru_wc: Tensor
    gru_uc: Tensor
    gru_bc: Tensor
    readout_w: Tensor  # (L, C, 1, 1), no bias

    @property
    def channels(self) -> int:
        return self.P.shape[0]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        names = ["P", "Q", "att_f", "att_g", "att_h",
                 "gru_wz", "gru_uz", "gru_bz", "gru_wr", "gru_ur", "gru_br",
                 "gru_wc", "gru_uc", "gru_bc", "readout_w"]
        return [(f"gnn.{n}", getattr(self, n)) for n in names]


def init_gnn(rng: np.random.Generator, channels: int, num_classes: int,
             d: int = 4) -> GnnParams:
    """Random init with two stabilizers: the attention value conv starts at
    zero so the self-edge begins as an identity (residual-only) map, and the
    update-gate bias starts at -1 so early steps keep most of the incoming
    state instead of overwriting it with untrained candidates."""
    c = channels
    if c % d or c % 8:
        raise ContractError(f"channels={c} must be divisible by d={d} and by 8")

    def gauss(shape, std):
        return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)

    def zeros(shape):
        return Tensor(np.zeros(shape), requires_grad=True)

    gru_std = np.sqrt(1.0 / (c * 9))
    return GnnParams(
        P=gauss((c, c // d), 1.0 / np.sqrt(c)),
        Q=gauss((c, c // d), 1.0 / np.sqrt(c)),
        att_f=gauss((c // 8, c, 1, 1), np.sqrt(2.0 / c)),
        att_g=gauss((c // 8, c, 1, 1), np.sqrt(2.0 / c)),
        att_h=zeros((c, c, 1, 1)),
        gru_wz=gauss((c, c, 3, 3), gru_std), gru_uz=gauss((c, c, 3, 3), gru_std),
        gru_bz=Tensor(np.full(c, -1.0), requires_grad=True),
        gru_wr=gauss((c, c, 3, 3), gru_std), gru_ur=gauss((c, c, 3, 3), gru_std),
        gru_br=zeros(c),
        gru_wc=gauss((c, c, 3, 3), gru_std), gru_uc=gauss((c, c, 3, 3), gru_std),
        gru_bc=zeros(c),
        readout_w=gauss((num_classes, c, 1, 1), np.sqrt(2.0 / c)),
    )


class MultCounter:
    """Tallies scalar multiplications performed by instrumented matmuls."""

    def __init__(self):
        self.total = 0

    def add(self, n: int) -> None:
        self.total += int(n)


def flatten_positions(h: Tensor) -> Tensor:
    """(C, H, W) -> (WH, C): one row per spatial position."""
    c = h.shape[0]
    return transpose(reshape(h, (c, h.shape[1] * h.shape[2])))


def unflatten_positions(m: Tensor, h_w: tuple[int, int]) -> Tensor:
    """(WH, C) -> (C, H, W), inverse of flatten_positions."""
    h, w = h_w
    return reshape(transpose(m), (m.shape[1], h, w))


def edge_affinity_lowrank(h_i: Tensor, h_j: Tensor, p: Tensor, q: Tensor,
                          counter: MultCounter | None = None) -> EdgeAffinity:
    """Low-rank bilinear affinity (h_i P)(h_j Q)^T over flattened embeddings.

    The association order is fixed: both projections happen before the big
    position-by-position product, which is what makes the factorized form
    cheaper than the full bilinear one.
    """
    if h_i.shape[1] != p.shape[0] or h_j.shape[1] != q.shape[0]:
        raise ShapeError(f"embeddings {h_i.shape}/{h_j.shape} do not match "
                         f"factors {p.shape}/{q.shape}")
    a = matmul(h_i, p)
    b = matmul(h_j, q)
    if counter is not None:
        counter.add(h_i.shape[0] * p.shape[0] * p.shape[1])
        counter.add(h_j.shape[0] * q.shape[0] * q.shape[1])
        counter.add(a.shape[0] * a.shape[1] * b.shape[0])
    return EdgeAffinity(matrix=matmul(a, transpose(b)))


def edge_affinity_full(h_i: Tensor, h_j: Tensor, w_mat: Tensor,
                       counter: MultCounter | None = None) -> EdgeAffinity:
    """Full bilinear affinity h_i W h_j^T; the equivalence oracle for the
    low-rank form (identical when W = P Q^T)."""
    if h_i.shape[1] != w_mat.shape[0] or h_j.shape[1] != w_mat.shape[1]:
        raise ShapeError(f"embeddings {h_i.shape}/{h_j.shape} do not match "
                         f"W {w_mat.shape}")
    a = matmul(h_i, w_mat)
    if counter is not None:
        counter.add(h_i.shape[0] * w_mat.shape[0] * w_mat.shape[1])
        counter.add(a.shape[0] * a.shape[1] * h_j.shape[0])
    return EdgeAffinity(matrix=matmul(a, transpose(h_j)))


def count_costs(w: int, h: int, c: int, d: int) -> dict[str, int]:
    """Parameter and multiplication counts for the full vs. factorized
    affinity at spatial size w x h with c channels and reduction ratio d."""
    if w < 1 or h < 1 or c < 1 or d < 1:
        raise ContractError("dimensions must be positive")
    if c % d:
        raise ContractError(f"d={d} must divide c={c}")
    wh = w * h
    return {
        "params_full": c * c,
        "params_lowrank": 2 * c * c // d,
        "mults_full": wh * c * c + wh * wh * c,
        "mults_lowrank": (2 * wh * c * c + wh * wh * c) // d,
    }


def self_edge(h: Tensor, params: GnnParams) -> SelfEdgeFeature:
    """Residual self-attention over all spatial positions of one embedding."""
    hw = (h.shape[1], h.shape[2])
    f = flatten_positions(conv2d(h, params.att_f))  # (WH, C/8)
    g = flatten_positions(conv2d(h, params.att_g))
    v = flatten_positions(conv2d(h, params.att_h))  # (WH, C)
    attn = row_softmax(matmul(f, transpose(g)))
    out = unflatten_positions(matmul(attn, v), hw)
    return SelfEdgeFeature(feature=out + h)


def cross_message(e_ij: EdgeAffinity, h_j_flat: Tensor,
                  h_w: tuple[int, int]) -> Tensor:
    """Message to node i from neighbor j: row-softmaxed affinity times the
    neighbor's flattened embedding, reshaped back to (C, H, W)."""
    if e_ij.matrix.shape[1] != h_j_flat.shape[0]:
        raise ShapeError(f"affinity {e_ij.matrix.shape} does not match "
                         f"embedding {h_j_flat.shape}")
    m = matmul(row_softmax(e_ij.matrix), h_j_flat)
    return unflatten_positions(m, h_w)


def aggregate_messages(graph: GroupGraph,
                       affinities: dict[tuple[int, int], EdgeAffinity],
                       self_edges: list[SelfEdgeFeature],
                       flat_states: list[Tensor], i: int) -> Tensor:
    """Sum of neighbor cross-messages plus the node's self-edge feature.

    Neighbors are accumulated in ascending sample-id order so the reduction
    is independent of node ordering within the group.
    """
    feat = self_edges[i].feature
    hw = (feat.shape[1], feat.shape[2])
    total = feat
    for j in sorted(graph.neighbors(i), key=lambda j: graph.nodes[j].sample_id):
        total = total + cross_message(affinities[(i, j)], flat_states[j], hw)
    return total


def conv_gru_update(h_prev: Tensor, m: Tensor, params: GnnParams) -> Tensor:
    """ConvGRU aggregation: gates are 3x3 conv pairs over message and state."""
    if h_prev.shape != m.shape:
        raise ShapeError(f"state {h_prev.shape} vs message {m.shape}")

    def gate_pre(wm, uh, b, state):
        pre = conv2d(m, wm, padding=1) + conv2d(state, uh, padding=1)
        return pre + reshape(b, (b.shape[0], 1, 1))

    z = sigmoid(gate_pre(params.gru_wz, params.gru_uz, params.gru_bz, h_prev))
    r = sigmoid(gate_pre(params.gru_wr, params.gru_ur, params.gru_br, h_prev))
    cand = tanh(conv2d(m, params.gru_wc, padding=1)
                + conv2d(mul(r, h_prev), params.gru_uc, padding=1)
                + reshape(params.gru_bc, (params.gru_bc.shape[0], 1, 1)))
    return mul(1.0 - z, h_prev) + mul(z, cand)


def graph_dropout(h: Tensor, delta_r: float, delta_d: float,
                  rng: np.random.Generator, mode: str) -> tuple[Tensor, DropoutMask]:
    """Spatial dropout of the most activated regions.

    The channel-mean map o drives a mask s: with probability delta_r in
    training (always at eval) s = sigmoid(o); otherwise positions with
    o >= max(o) * delta_d are zeroed and the rest keep their o value.  The
    output is h scaled spatially by s.
    """
    if not (0.0 <= delta_r <= 1.0 and 0.0 <= delta_d <= 1.0):
        raise ContractError(f"thresholds must lie in [0,1], got "
                            f"delta_r={delta_r}, delta_d={delta_d}")
    if mode not in ("train", "eval"):
        raise ContractError(f"mode must be 'train' or 'eval', got {mode!r}")
    o = mean_over_channels(h)
    take_drop = mode == "train" and not (rng.random() < delta_r)
    if take_drop:
        keep = (o.data < o.data.max() * delta_d).astype(np.float64)
        s = mul(o, Tensor(keep))
        branch = "drop"
    else:
        s = sigmoid(o)
        branch = "importance"
    h_hat = mul(h, reshape(s, (1, s.shape[0], s.shape[1])))
    return h_hat, DropoutMask(s=s, branch=branch)


def graph_readout(h_t: Tensor, readout_w: Tensor) -> tuple[Tensor, Tensor]:
    """Logits from a final node state: GAP of the class-aware 1x1 conv.

    Returns (logits, class_map); the pre-pool class map feeds CAM extraction.
    """
    class_map = conv2d(h_t, readout_w)
    return global_average_pool(class_map), class_map


@dataclass
class NodeOutput:
    sample_id: int
    state: Tensor  # final state after T steps (dropout applied)
    logits: Tensor  # (L,)
    class_map: Tensor  # (L, H, W)


def _pair_affinities(graph: GroupGraph, flat_states: list[Tensor],
                     params: GnnParams) -> dict[tuple[int, int], EdgeAffinity]:
    """One low-rank affinity per connected unordered pair; the reverse
    direction is the transpose.  The canonical direction goes from the
    smaller sample id to the larger."""
    affinities: dict[tuple[int, int], EdgeAffinity] = {}
    k = graph.size
    for a in range(k):
        for b in range(a + 1, k):
            if not graph.adjacency[a, b]:
                continue
            i, j = a, b
            if graph.nodes[j].sample_id < graph.nodes[i].sample_id:
                i, j = j, i
            e_ij = edge_affinity_lowrank(flat_states[i], flat_states[j],
                                         params.P, params.Q)
            affinities[(i, j)] = e_ij
            affinities[(j, i)] = EdgeAffinity(matrix=transpose(e_ij.matrix))
    return affinities


def run_gnn(graph: GroupGraph, params: GnnParams, t_steps: int,
            delta_r: float, delta_d: float, seed: int, mode: str = "train",
            dropout: bool = True) -> list[NodeOutput]:
    """T rounds of message passing, aggregation, and graph dropout, then the
    readout on the final states.

    The per-node dropout draw at step t comes from a generator seeded by
    (seed, sample_id, t), so node order never affects any node's output.
    """
    if t_steps < 1:
        raise ContractError(f"need at least one message-passing step, got {t_steps}")
    states = [node.state for node in graph.nodes]
    for s in states[1:]:
        if s.shape != states[0].shape:
            raise ShapeError(f"node states disagree in shape: "
                             f"{s.shape} vs {states[0].shape}")
    for t in range(1, t_steps + 1):
        flat_states = [flatten_positions(s) for s in states]
        affinities = _pair_affinities(graph, flat_states, params)
        self_edges = [self_edge(s, params) for s in states]
        messages = [aggregate_messages(graph, affinities, self_edges, flat_states, i)
                    for i in range(graph.size)]
        new_states = [conv_gru_update(states[i], messages[i], params)
                      for i in range(graph.size)]
        if dropout:
            dropped = []
            for node, h in zip(graph.nodes, new_states):
                node_rng = np.random.default_rng([seed, node.sample_id, t])
                h_hat, _ = graph_dropout(h, delta_r, delta_d, node_rng, mode)
                dropped.append(h_hat)
            new_states = dropped
        states = new_states
    outputs = []
    for node, h_final in zip(graph.nodes, states):
        logits, class_map = graph_readout(h_final, params.readout_w)
        outputs.append(NodeOutput(sample_id=node.sample_id, state=h_final,
                                  logits=logits, class_map=class_map))
    return outputs
