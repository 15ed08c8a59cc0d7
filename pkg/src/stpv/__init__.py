"""Desk-scale spatiotemporal sequence prediction.

A frozen VQ-VAE spatial codec plus swappable latent-space predictors (stacked
spatiotemporal LSTM cells or a causal 3D-conv transformer decoder), built on a
small numpy-backed reverse-mode autodiff engine.
"""
from .tensor import (  # noqa: F401
    GradientTape,
    NumericsError,
    ShapeError,
    Tensor,
    backward,
    no_grad,
)

__version__ = "0.1.0"
