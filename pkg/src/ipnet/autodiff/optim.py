"""Adam and the reduce-on-plateau learning-rate rule."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .tensor import Tensor

__all__ = ["Adam", "plateau_schedule", "PlateauSchedule"]


class Adam:
    """Adam with bias correction.

    Parameters whose ``.grad`` is ``None`` are treated as having zero
    gradient for the step.
    """

    def __init__(self, params: Sequence[Tensor], lr: float = 0.01,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad if p.grad is not None else 0.0
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def _reductions(history: Sequence[float], patience: int) -> list[bool]:
    best = -math.inf
    bad = 0
    fired = []
    for value in history:
        if value > best:
            best = value
            bad = 0
        else:
            bad += 1
        fire = bad >= patience
        if fire:
            bad = 0
        fired.append(fire)
    return fired


def plateau_schedule(history: Sequence[float], lr: float, patience: int = 3, factor: float = 0.1) -> float:
    """Learning rate to use after the last epoch in ``history``.

    ``history`` holds the validation metric per epoch (higher is better). The
    rate drops by ``factor`` when ``patience`` consecutive epochs each fail
    to strictly beat the best value seen before them; the count restarts
    after every drop.

    >>> plateau_schedule([10, 9, 9, 9], 0.01)
    0.001
    """
    if not history:
        raise ValueError("need at least one epoch of history")
    return lr * factor if _reductions(history, patience)[-1] else lr


class PlateauSchedule:
    """Incremental form of :func:`plateau_schedule`."""

    def __init__(self, lr: float, patience: int = 3, factor: float = 0.1):
        self.lr = lr
        self.patience = patience
        self.factor = factor
        self.history: list[float] = []

    def step(self, metric: float) -> float:
        self.history.append(float(metric))
        self.lr = plateau_schedule(self.history, self.lr, self.patience, self.factor)
        return self.lr
