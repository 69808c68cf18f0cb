"""Minimal numpy network engine: kernels, layers, the regression model and its checks."""

from .gradcheck import GradCheckReport, default_check, gradient_check
from .model import BlockSpec, Model, ModelSpec, load_checkpoint, parse_checkpoint, save_checkpoint
from .ops import ShapeError, mse_loss

__all__ = [
    "BlockSpec", "GradCheckReport", "Model", "ModelSpec", "ShapeError",
    "default_check", "gradient_check", "load_checkpoint", "mse_loss",
    "parse_checkpoint", "save_checkpoint",
]
