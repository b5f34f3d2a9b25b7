"""Dual-branch masked video autoencoder with intra- and cross-modal contrastive objectives."""

from __future__ import annotations

from .backbone import DualBranchMAE, ModelConfig, preset
from .config import load_config
from .errors import ConfigError, DualMAEError, FormatError, InputError, NumericError, ShapeError
from .objectives import LossBreakdown, total_loss
from .trainer import Trainer, tta_adapt

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DualBranchMAE",
    "DualMAEError",
    "FormatError",
    "InputError",
    "LossBreakdown",
    "ModelConfig",
    "NumericError",
    "ShapeError",
    "Trainer",
    "load_config",
    "preset",
    "total_loss",
    "tta_adapt",
]
