"""Optimisers acting in place on ``Tensor.data``."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .tensor import Tensor


def cosine_lr(base_lr: float, step: int, total: int, min_lr: float = 0.0, warmup: int = 0) -> float:
    """Cosine annealing over ``total`` steps, no restarts.

    With ``warmup > 0`` the rate first climbs linearly from ``base_lr /
    warmup`` to ``base_lr`` over ``warmup`` steps, and the cosine covers the
    remaining ``total - warmup`` steps.
    """
    if step < warmup:
        return base_lr * (step + 1) / warmup
    total -= warmup
    step -= warmup
    if total <= 0:
        return base_lr
    t = min(step, total) / total
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * t))


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    """Rescale gradients so their global L2 norm is at most ``max_norm``."""
    total = math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params if p.grad is not None))
    if max_norm and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return total


class SGD:
    def __init__(self, params: Sequence[Tensor], lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr, self.momentum, self.weight_decay = lr, momentum, weight_decay
        self.velocity = {id(p): np.zeros_like(p.data) for p in self.params}

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        for p in self.params:
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            v = self.velocity[id(p)]
            v *= self.momentum
            v += g
            p.data -= (self.lr * v).astype(p.data.dtype)

    def retain(self, params: Sequence[Tensor]) -> None:
        """Restrict the optimiser to ``params``, dropping state of removed tensors."""
        self.params = list(params)
        self.velocity = {id(p): self.velocity.get(id(p), np.zeros_like(p.data)) for p in self.params}

    def state_arrays(self) -> list[np.ndarray]:
        return [self.velocity[id(p)] for p in self.params]


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = list(params)
        self.lr, self.betas, self.eps, self.weight_decay = lr, betas, eps, weight_decay
        self.state = {id(p): [np.zeros_like(p.data), np.zeros_like(p.data), 0] for p in self.params}

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        b1, b2 = self.betas
        for p in self.params:
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            st = self.state[id(p)]
            m, v = st[0], st[1]
            st[2] += 1
            t = st[2]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            mhat = m / (1 - b1 ** t)
            vhat = v / (1 - b2 ** t)
            p.data -= (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.data.dtype)

    def replace(self, old: Tensor, new: Tensor, keep_cols: Sequence[int]) -> None:
        """Swap ``old`` for ``new`` (a column subset of it), carrying the moments."""
        st = self.state.pop(id(old))
        keep = list(keep_cols)
        self.state[id(new)] = [st[0][:, keep].copy(), st[1][:, keep].copy(), st[2]]
        self.params[[id(p) for p in self.params].index(id(old))] = new
