"""Desk-scale identity-injection face swapping: models, losses, training, evaluation."""

from .core import TrainConfig, validate_config, seeded_rng
from .losses import FMVariant, LossReport

__all__ = ["TrainConfig", "validate_config", "seeded_rng", "FMVariant", "LossReport"]

__version__ = "0.1.0"
