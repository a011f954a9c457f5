"""Uncertainty-guided distillation losses, depth metrics and a toy teacher-student demo."""

from .depth_loss import LossWeights, total_loss, urdl
from .losses import (
    LossResult,
    feature_l1_pyramid,
    inter_depth_distill_loss,
    pairwise_similarity,
    structure_distill_loss,
)
from .metrics import EvalReport, aggregate, evaluate
from .uncertainty import rectify, uncertainty_map, uncertainty_map_grad

__all__ = [
    "LossResult",
    "LossWeights",
    "EvalReport",
    "aggregate",
    "evaluate",
    "feature_l1_pyramid",
    "inter_depth_distill_loss",
    "pairwise_similarity",
    "rectify",
    "structure_distill_loss",
    "total_loss",
    "uncertainty_map",
    "uncertainty_map_grad",
    "urdl",
]
