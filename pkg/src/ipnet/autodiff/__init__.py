"""A small reverse-mode autodiff engine with the layers the precoder networks need."""

from .layers import BatchNorm, Dense, Layer, NonFiniteError, ReLU, Sequential, Tanh, batch_norm
from .optim import Adam, PlateauSchedule, plateau_schedule
from .tensor import GraphError, Tensor, as_tensor, is_grad_enabled, no_grad

__all__ = [
    "Adam",
    "BatchNorm",
    "Dense",
    "GraphError",
    "Layer",
    "NonFiniteError",
    "PlateauSchedule",
    "ReLU",
    "Sequential",
    "Tanh",
    "Tensor",
    "as_tensor",
    "batch_norm",
    "is_grad_enabled",
    "no_grad",
    "plateau_schedule",
]
