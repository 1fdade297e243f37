"""Unsupervised single-image deraining with non-local contrastive learning."""

from .config import TrainConfig, desk_config, load_config
from .losses import LossReport, LossWeights
from .networks import NetworkBundle, build_bundle
from .rain_model import StreakParams, compose, synthesize_streaks
from .trainer import derain, train, train_step

__all__ = [
    "LossReport", "LossWeights", "NetworkBundle", "StreakParams", "TrainConfig",
    "build_bundle", "compose", "derain", "desk_config", "load_config",
    "synthesize_streaks", "train", "train_step",
]
__version__ = "0.1.0"
