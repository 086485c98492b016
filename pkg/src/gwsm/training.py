"""Optimization loop: two-head sigmoid-CE loss, SGD with momentum and weight
decay, stepwise LR decay, and deterministic seeding.

The backbone conv stack trains in one LR group; the GNN parameters and both
class-aware heads train in a second, hotter group.  Both decay by the same
factor on the same schedule.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Sequence

import numpy as np

from .backbone import (BackboneParams, extract_features, init_backbone,
                       intermediate_readout)
from .errors import ContractError, NumericError
from .gnn import GnnParams, NodeOutput, init_gnn, run_gnn
from .grouping import ImageSample, build_graph, epoch_iterator
from .tensor import Tensor, mul, sigmoid_cross_entropy


@dataclass
class TrainConfig:
    """Hyperparameters; defaults follow the reference training recipe."""

    k: int = 4
    t_steps: int = 3
    delta_r: float = 0.8
    delta_d: float = 0.7
    lam: float = 0.4
    d: int = 4
    epochs: int = 15
    lr_backbone: float = 1e-3
    lr_gnn: float = 1e-2
    lr_decay_factor: float = 0.1
    lr_decay_every: int = 5
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    channels: int = 64
    num_classes: int = 6
    dropout: bool = True
    theta_fg: float = 0.3
    theta_bg: float = 0.05

    def __post_init__(self):
        if self.k < 1:
            raise ContractError(f"group size must be >= 1, got {self.k}")
        if self.t_steps < 1:
            raise ContractError(f"steps must be >= 1, got {self.t_steps}")
        for name in ("delta_r", "delta_d"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ContractError(f"{name} must lie in [0,1], got {v}")
        if self.lam < 0:
            raise ContractError(f"lambda must be >= 0, got {self.lam}")

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def sigmoid_ce(logits: Tensor, label: np.ndarray) -> Tensor:
    """Mean-over-classes sigmoid cross entropy (numerically stable)."""
    return sigmoid_cross_entropy(logits, label)


def total_loss(graph_logits: Sequence[Tensor], inter_logits: Sequence[Tensor],
               labels: Sequence[np.ndarray], lam: float) -> Tensor:
    """Per image CE(graph head) + lam * CE(intermediate head), averaged
    over the group."""
    if lam < 0:
        raise ContractError(f"lambda must be >= 0, got {lam}")
    k = len(graph_logits)
    acc = None
    for lg, lm, label in zip(graph_logits, inter_logits, labels):
        term = sigmoid_ce(lg, label) + mul(sigmoid_ce(lm, label), lam)
        acc = term if acc is None else acc + term
    return mul(acc, 1.0 / k)


def sgd_step(param: np.ndarray, grad: np.ndarray, velocity: np.ndarray,
             lr: float, momentum: float, weight_decay: float
             ) -> tuple[np.ndarray, np.ndarray]:
    """v <- momentum*v + grad + wd*param; param <- param - lr*v."""
    if param.shape != grad.shape or param.shape != velocity.shape:
        raise ContractError(f"shape mismatch: param {param.shape}, "
                            f"grad {grad.shape}, velocity {velocity.shape}")
    v = momentum * velocity + grad + weight_decay * param
    return param - lr * v, v


class SgdOptimizer:
    """Momentum SGD over named LR groups; updates tensor data in place."""

    def __init__(self, groups: list[tuple[list[Tensor], float]],
                 momentum: float, weight_decay: float):
        self.groups = [{"params": params, "lr": lr} for params, lr in groups]
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._velocity = {id(p): np.zeros_like(p.data)
                          for g in self.groups for p in g["params"]}

    def set_lr_scale(self, scale: float, base_lrs: list[float]) -> None:
        for group, base in zip(self.groups, base_lrs):
            group["lr"] = base * scale

    def zero_grad(self) -> None:
        for group in self.groups:
            for p in group["params"]:
                p.grad = None

    def step(self) -> None:
        for group in self.groups:
            for p in group["params"]:
                if p.grad is None:
                    continue
                new_data, v = sgd_step(p.data, p.grad, self._velocity[id(p)],
                                       group["lr"], self.momentum,
                                       self.weight_decay)
                p.data = new_data
                self._velocity[id(p)] = v


@dataclass
class GroupForward:
    """Everything the loss and the CAM stages need from one group pass."""

    inter_logits: list[Tensor]
    inter_maps: list[Tensor]
    node_outputs: list[NodeOutput]


def forward_group(samples: Sequence[ImageSample], backbone: BackboneParams,
                  gnn_params: GnnParams, config: TrainConfig, seed: int,
                  mode: str) -> GroupForward:
    """Backbone on each image, then graph reasoning over the group."""
    states, inter_logits, inter_maps = [], [], []
    for sample in samples:
        h0 = extract_features(sample.image, backbone)
        logits, class_map = intermediate_readout(h0, backbone)
        states.append(h0)
        inter_logits.append(logits)
        inter_maps.append(class_map)
    graph = build_graph(samples, states)
    node_outputs = run_gnn(graph, gnn_params, config.t_steps, config.delta_r,
                           config.delta_d, seed, mode=mode,
                           dropout=config.dropout)
    return GroupForward(inter_logits=inter_logits, inter_maps=inter_maps,
                        node_outputs=node_outputs)


def _multi_label_accuracy(logit_list: Sequence[Tensor],
                          labels: Sequence[np.ndarray]) -> float:
    hits = total = 0
    for logits, label in zip(logit_list, labels):
        pred = logits.data > 0.0  # sigmoid(x) > 0.5
        hits += int((pred == label.astype(bool)).sum())
        total += label.size
    return hits / total


def _batch_seed(seed: int, epoch: int, batch: int) -> int:
    return int(np.random.SeedSequence([seed, 2, epoch, batch]).generate_state(1)[0])


@dataclass
class TrainResult:
    backbone: BackboneParams
    gnn: GnnParams
    log: list[dict] = field(default_factory=list)


def init_model(config: TrainConfig) -> tuple[BackboneParams, GnnParams]:
    rng = np.random.default_rng([config.seed, 0])
    backbone = init_backbone(rng, num_classes=config.num_classes,
                             channels=config.channels)
    gnn_params = init_gnn(rng, channels=config.channels,
                          num_classes=config.num_classes, d=config.d)
    return backbone, gnn_params


def train(dataset: Sequence[ImageSample], config: TrainConfig) -> TrainResult:
    """Deterministic training run; the log has one record per batch."""
    backbone, gnn_params = init_model(config)
    backbone_group = [p for name, p in backbone.named_parameters()
                      if not name.startswith("backbone.cls")]
    head_group = [backbone.cls_w] + [p for _, p in gnn_params.named_parameters()]
    optimizer = SgdOptimizer(
        groups=[(backbone_group, config.lr_backbone),
                (head_group, config.lr_gnn)],
        momentum=config.momentum, weight_decay=config.weight_decay)

    log: list[dict] = []
    for epoch in range(config.epochs):
        scale = config.lr_decay_factor ** (epoch // config.lr_decay_every)
        optimizer.set_lr_scale(scale, [config.lr_backbone, config.lr_gnn])
        epoch_rng = np.random.default_rng([config.seed, 1, epoch])
        for batch_idx, samples in enumerate(epoch_iterator(dataset, config.k,
                                                           epoch_rng)):
            seed = _batch_seed(config.seed, epoch, batch_idx)
            fwd = forward_group(samples, backbone, gnn_params, config, seed,
                                mode="train")
            labels = [s.label for s in samples]
            graph_logits = [out.logits for out in fwd.node_outputs]
            loss = total_loss(graph_logits, fwd.inter_logits, labels, config.lam)
            if not np.isfinite(loss.item()):
                raise NumericError(f"non-finite loss at epoch {epoch}, "
                                   f"batch {batch_idx}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            log.append({
                "epoch": epoch,
                "batch": batch_idx,
                "loss": loss.item(),
                "acc_m": _multi_label_accuracy(fwd.inter_logits, labels),
                "acc_g": _multi_label_accuracy(graph_logits, labels),
                "lr_backbone": config.lr_backbone * scale,
                "lr_gnn": config.lr_gnn * scale,
            })
    return TrainResult(backbone=backbone, gnn=gnn_params, log=log)
