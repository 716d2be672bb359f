"""Dense, batch-norm and activation layers built on :mod:`.tensor`."""

from __future__ import annotations

import math

import numpy as np

from .tensor import Tensor, is_grad_enabled

__all__ = [
    "Layer",
    "Dense",
    "BatchNorm",
    "ReLU",
    "Tanh",
    "Sequential",
    "batch_norm",
    "NonFiniteError",
]


class NonFiniteError(FloatingPointError):
    pass


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Normalise ``x`` (batch, features) with its own batch statistics.

    Returns the output and the (biased) batch mean and variance.
    """
    xd = x.data
    n = xd.shape[0]
    mu = xd.mean(axis=0)
    var = xd.var(axis=0)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv_std
    g = gamma.data

    def backward(dy):
        dxhat = dy * g
        dx = (inv_std / n) * (
            n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0)
        )
        return dx, (dy * xhat).sum(axis=0), dy.sum(axis=0)

    out = Tensor._make(g * xhat + beta.data, (x, gamma, beta), backward)
    return out, mu, var


class Layer:
    name = "layer"

    def parameters(self) -> list[Tensor]:
        return []

    def buffers(self) -> list[np.ndarray]:
        return []

    @property
    def trainable_count(self) -> int:
        return sum(p.size for p in self.parameters())

    @property
    def non_trainable_count(self) -> int:
        return sum(b.size for b in self.buffers())

    def __call__(self, x: Tensor, training: bool = False) -> Tensor:
        out = self.forward(x, training)
        if not np.all(np.isfinite(out.data)):
            raise NonFiniteError(f"non-finite output from layer {self.name!r}")
        return out

    def forward(self, x: Tensor, training: bool) -> Tensor:
        raise NotImplementedError


class Dense(Layer):
    """Affine map ``x @ weight.T + bias`` with weight of shape (out, in).

    Weights start Glorot-uniform, biases at zero.
    """

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, name: str = "dense"):
        limit = math.sqrt(6.0 / (in_features + out_features))
        self.in_features = in_features
        self.out_features = out_features
        self.name = name
        self.weight = Tensor(
            rng.uniform(-limit, limit, size=(out_features, in_features)),
            requires_grad=True,
            name=f"{name}.weight",
        )
        self.bias = Tensor(np.zeros(out_features), requires_grad=True, name=f"{name}.bias")

    def parameters(self):
        return [self.weight, self.bias]

    def forward(self, x, training):
        if x.shape[-1] != self.in_features:
            raise ValueError(
                f"{self.name}: expected {self.in_features} input features, got {x.shape[-1]}"
            )
        return x @ self.weight.T + self.bias


class BatchNorm(Layer):
    """Batch normalisation over the feature axis.

    Training mode uses biased batch statistics and updates the running
    averages as ``running = momentum * running + (1 - momentum) * batch``;
    inference mode uses the running averages.
    """

    def __init__(self, features: int, momentum: float = 0.9, eps: float = 1e-5, name: str = "bn"):
        self.features = features
        self.momentum = momentum
        self.eps = eps
        self.name = name
        self.gamma = Tensor(np.ones(features), requires_grad=True, name=f"{name}.gamma")
        self.beta = Tensor(np.zeros(features), requires_grad=True, name=f"{name}.beta")
        self.running_mean = np.zeros(features)
        self.running_var = np.ones(features)

    def parameters(self):
        return [self.gamma, self.beta]

    def buffers(self):
        return [self.running_mean, self.running_var]

    def forward(self, x, training):
        if x.shape[-1] != self.features:
            raise ValueError(f"{self.name}: expected {self.features} features, got {x.shape[-1]}")
        if training:
            if x.shape[0] < 2:
                raise ValueError(f"{self.name}: training batches need at least 2 samples")
            out, mu, var = batch_norm(x, self.gamma, self.beta, self.eps)
            m = self.momentum
            self.running_mean *= m
            self.running_mean += (1.0 - m) * mu
            self.running_var *= m
            self.running_var += (1.0 - m) * var
            return out
        scale = self.gamma * (1.0 / np.sqrt(self.running_var + self.eps))
        return (x - self.running_mean) * scale + self.beta


class ReLU(Layer):
    name = "relu"

    def forward(self, x, training):
        return x.relu()


class Tanh(Layer):
    name = "tanh"

    def forward(self, x, training):
        return x.tanh()


class Sequential(Layer):
    def __init__(self, layers: list[Layer], name: str = "sequential"):
        self.layers = list(layers)
        self.name = name

    def parameters(self):
        return [p for layer in self.layers for p in layer.parameters()]

    def buffers(self):
        return [b for layer in self.layers for b in layer.buffers()]

    def forward(self, x, training):
        if training and not is_grad_enabled():
            raise RuntimeError("training-mode forward requires gradient recording")
        for layer in self.layers:
            x = layer(x, training)
        return x

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state(self) -> list[np.ndarray]:
        """Copies of all parameters followed by all buffers, in layer order."""
        return [p.data.copy() for p in self.parameters()] + [b.copy() for b in self.buffers()]

    def load_state(self, arrays: list[np.ndarray]) -> None:
        params, bufs = self.parameters(), self.buffers()
        if len(arrays) != len(params) + len(bufs):
            raise ValueError("state does not match network layout")
        for p, a in zip(params, arrays):
            if p.shape != a.shape:
                raise ValueError(f"{p.name}: shape {a.shape} does not match {p.shape}")
            p.data = np.array(a, dtype=np.float64)
        for b, a in zip(bufs, arrays[len(params):]):
            if b.shape != a.shape:
                raise ValueError(f"buffer shape {a.shape} does not match {b.shape}")
            b[...] = a
