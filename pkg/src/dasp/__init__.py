"""Density-aware safety perception (DASP) for offline reinforcement learning,
with a point-mass test bed and evaluation harness."""

from .agent import TrainConfig, train
from .density import DaspConfig, DaspModel, dasp_loss, density_score, pretrain_dasp
from .envs import PointMassEnv, PushSpec, generate_dataset
from .errors import ConfigError, DaspError, DomainError, NumericFault, ShapeError

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DaspConfig", "DaspError", "DaspModel", "DomainError", "NumericFault",
    "PointMassEnv", "PushSpec", "ShapeError", "TrainConfig", "dasp_loss", "density_score",
    "generate_dataset", "pretrain_dasp", "train",
]
