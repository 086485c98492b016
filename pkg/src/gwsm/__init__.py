"""Group-wise semantic mining over image graphs.

A from-scratch numpy stack: an autodiff tensor core, a tiny CNN backbone,
group graphs with co-attention edge affinities, ConvGRU message passing with
stochastic graph dropout, CAM-based pseudo-label generation, and a synthetic
shapes benchmark with mIoU scoring.
"""

from .backbone import (BackboneParams, extract_features, init_backbone,
                       intermediate_readout)
from .camgen import (CamStack, PseudoLabel, build_cam_stack, ensemble,
                     extract_cam, make_pseudo_label)
from .dataeval import (EvalReport, ShapesConfig, ablation_harness,
                       evaluate_pseudo_labels, generate_dataset, load_dataset,
                       miou, save_dataset)
from .errors import ContractError, DataError, NumericError, ShapeError
from .gnn import (DropoutMask, EdgeAffinity, GnnParams, MultCounter,
                  SelfEdgeFeature, aggregate_messages, conv_gru_update,
                  count_costs, cross_message, edge_affinity_full,
                  edge_affinity_lowrank, graph_dropout, graph_readout,
                  init_gnn, run_gnn, self_edge)
from .grouping import (GroupGraph, ImageSample, build_graph, epoch_iterator,
                       eval_iterator, greedy_sample)
from .tensor import (Tape, Tensor, check_gradients, conv2d, no_grad,
                     row_softmax, sigmoid_cross_entropy)
from .training import (TrainConfig, TrainResult, forward_group, sgd_step,
                       sigmoid_ce, total_loss, train)

__version__ = "0.1.0"

__all__ = [
    "BackboneParams", "CamStack", "ContractError", "DataError", "DropoutMask",
    "EdgeAffinity", "EvalReport", "GnnParams", "GroupGraph", "ImageSample",
    "MultCounter", "NumericError", "PseudoLabel", "SelfEdgeFeature",
    "ShapeError", "ShapesConfig", "Tape", "Tensor", "TrainConfig",
    "TrainResult", "ablation_harness", "aggregate_messages", "build_cam_stack",
    "build_graph", "check_gradients", "conv2d", "conv_gru_update",
    "count_costs", "cross_message", "edge_affinity_full",
    "edge_affinity_lowrank", "ensemble", "epoch_iterator",
    "evaluate_pseudo_labels", "eval_iterator", "extract_cam",
    "extract_features", "forward_group", "generate_dataset", "graph_dropout",
    "graph_readout", "greedy_sample", "init_backbone", "init_gnn",
    "intermediate_readout", "load_dataset", "make_pseudo_label", "miou",
    "no_grad", "row_softmax", "run_gnn", "save_dataset", "self_edge",
    "sgd_step", "sigmoid_ce", "sigmoid_cross_entropy", "total_loss", "train",
]
