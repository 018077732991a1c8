"""SGD-with-momentum and Adam acting in place on lists of numpy arrays."""

from __future__ import annotations

from typing import Sequence

import numpy as np


class NonFiniteGradient(FloatingPointError):
    pass


def _check(grads: Sequence[np.ndarray | None]):
    for i, g in enumerate(grads):
        if g is not None and not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient in parameter {i}; step aborted")


def clip_grad_norm(grads: Sequence[np.ndarray], max_norm: float) -> float:
    """Rescale `grads` in place so that their joint L2 norm is <= max_norm."""
    grads = [g for g in grads if g is not None]
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads)))
    if max_norm > 0 and total > max_norm:
        factor = max_norm / (total + 1e-6)
        for g in grads:
            g *= factor
    return total


class SGD:
    kind = "sgd-momentum"

    def __init__(self, params: Sequence[np.ndarray], lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p) for p in self.params]
        self.steps = 0

    def step(self, grads: Sequence[np.ndarray]):
        _check(grads)
        for p, g, v in zip(self.params, grads, self.velocity):
            if g is None:  # parameter not reached this step: leave it and its momentum alone
                continue
            if self.weight_decay:
                g = g + self.weight_decay * p
            v *= self.momentum
            v += g
            p -= self.lr * v
        self.steps += 1


class Adam:
    kind = "adam"

    def __init__(
        self,
        params: Sequence[np.ndarray],
        lr: float,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        self.params = list(params)
        self.lr = lr
        self.betas = tuple(betas)
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]
        self.steps = 0

    def step(self, grads: Sequence[np.ndarray]):
        _check(grads)
        b1, b2 = self.betas
        self.steps += 1
        c1 = 1.0 - b1**self.steps
        c2 = 1.0 - b2**self.steps
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if g is None:
                continue
            if self.weight_decay:
                g = g + self.weight_decay * p
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
