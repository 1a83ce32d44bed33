"""Minimal reverse-mode automatic differentiation on numpy arrays."""

from . import kernels, ops
from .optim import AdamW
from .recurrent import gru_layer, gru_layer_composed, lstm_layer
from .tensor import GraphError, Tensor, as_tensor, grad_enabled, no_grad

__all__ = [
    "AdamW",
    "GraphError",
    "Tensor",
    "as_tensor",
    "grad_enabled",
    "gru_layer",
    "gru_layer_composed",
    "kernels",
    "lstm_layer",
    "no_grad",
    "ops",
]
