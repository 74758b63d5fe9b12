"""Continual test-time adaptation with prompt-enhanced node features and an
optimal-transport graph sparsifier, on synthetic two-class segmentation streams."""

from .adapt import AdaptConfig, StepReport, adapt_step, run_stream
from .backbone import Backbone, BackboneConfig, load_checkpoint, pretrain, save_checkpoint
from .dgcs import SparsifyProblem, TransportPlan, cluster, sinkhorn_solve, topk_oracle
from .losses import clustering_loss, graph_consistency_loss, total_loss
from .stream import DEFAULT_TARGETS, SOURCE, DomainSpec, dice_score, generate_stream

__all__ = [
    "AdaptConfig",
    "Backbone",
    "BackboneConfig",
    "DEFAULT_TARGETS",
    "DomainSpec",
    "SOURCE",
    "SparsifyProblem",
    "StepReport",
    "TransportPlan",
    "adapt_step",
    "cluster",
    "clustering_loss",
    "dice_score",
    "generate_stream",
    "graph_consistency_loss",
    "load_checkpoint",
    "pretrain",
    "run_stream",
    "save_checkpoint",
    "sinkhorn_solve",
    "topk_oracle",
    "total_loss",
]
