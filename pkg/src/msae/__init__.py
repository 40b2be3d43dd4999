"""Masked skeleton-sequence autoencoder toolkit.

Self-supervised pretraining of a slice-grouped spatio-temporal transformer
on larval-zebrafish swim bouts: two-stage frame/joint masking, masked
coordinate reconstruction, and bout embedding extraction.
"""

from .datagen import SynthParams, generate_bout
from .masking import MaskPlan, gather_visible, mask_indicator, plan_mask, scatter_restore
from .model import ModelConfig, ModelParams, TokenSet, embed_bout, forward_backward
from .skeleton import (
    NormalizationRecord,
    SkeletonSequence,
    SliceMap,
    build_slice_map,
    denormalize,
    normalize_bout,
)
from .training import OptimizerState, TrainConfig, adam_step, lr_at, train

__all__ = [
    "MaskPlan",
    "ModelConfig",
    "ModelParams",
    "NormalizationRecord",
    "OptimizerState",
    "SkeletonSequence",
    "SliceMap",
    "SynthParams",
    "TokenSet",
    "TrainConfig",
    "adam_step",
    "build_slice_map",
    "denormalize",
    "embed_bout",
    "forward_backward",
    "gather_visible",
    "generate_bout",
    "lr_at",
    "mask_indicator",
    "normalize_bout",
    "plan_mask",
    "scatter_restore",
    "train",
]

__version__ = "0.1.0"
