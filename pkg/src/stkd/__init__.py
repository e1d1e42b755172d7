"""Spatio-temporal knowledge distillation and distillation-aware pruning for ST-GCN traffic forecasters."""

__version__ = "0.1.0"

from .errors import (
    ArchitecturePairingError,
    ConfigError,
    DataFormatError,
    MissingArtifactError,
    PruningSequenceError,
    STKDError,
    TrainingDivergence,
)
from .losses import LossWeights, distillation_loss
from .model import ModelConfig, STGCN, build_model, count_flops, count_parameters

__all__ = [
    "ArchitecturePairingError",
    "ConfigError",
    "DataFormatError",
    "LossWeights",
    "MissingArtifactError",
    "ModelConfig",
    "PruningSequenceError",
    "STGCN",
    "STKDError",
    "TrainingDivergence",
    "build_model",
    "count_flops",
    "count_parameters",
    "distillation_loss",
]
