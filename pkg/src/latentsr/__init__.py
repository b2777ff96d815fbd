"""Desk-scale latent-diffusion super-resolution with a self-contained autodiff core."""

from .tensor import Tensor, ShapeError

__all__ = ["Tensor", "ShapeError"]
__version__ = "0.1.0"
