"""Normalizing-flow generators for Boltzmann densities, trained with and
without data, plus the estimators and diagnostics around them."""

from .flow import FlowModel, load_checkpoint, save_checkpoint
from .losses import Batch, LossConfig
from .targets import DiscreteSpace, DoubleWell, GaussianTarget

__version__ = "0.1.0"

__all__ = [
    "Batch",
    "DiscreteSpace",
    "DoubleWell",
    "FlowModel",
    "GaussianTarget",
    "LossConfig",
    "load_checkpoint",
    "save_checkpoint",
]
