"""SGD with momentum, coupled weight decay, and poly learning-rate decay."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .params import ParamStore


@dataclass
class OptimConfig:
    base_lr: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 5e-4
    power: float = 0.9
    epochs: int = 300
    batch_size: int = 10
    decay_norm: bool = True  # weight decay on batch-norm gamma/beta

    def validate(self) -> None:
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.power <= 0:
            raise ValueError("poly power must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")


def poly_lr(base: float, iteration: int, max_iter: int, power: float = 0.9) -> float:
    """``base * (1 - iteration / max_iter) ** power``."""
    if not 0 <= iteration <= max_iter:
        raise ValueError(f"iteration {iteration} outside [0, {max_iter}]")
    return base * (1.0 - iteration / max_iter) ** power


def sgd_step(params: ParamStore, lr: float, momentum: float = 0.9, weight_decay: float = 5e-4,
             decay_norm: bool = True) -> ParamStore:
    """In-place update: ``v = m*v + (g + wd*p); p -= lr*v``. Clears gradients."""
    learnable = params.learnable()
    missing = [name for name, p in learnable if p.grad is None]
    if missing:
        raise ValueError(f"no gradient for parameter {missing[0]!r}"
                         + (f" (and {len(missing) - 1} more)" if len(missing) > 1 else ""))
    for name, p in learnable:
        wd = weight_decay if (decay_norm or p.kind not in ("gamma", "beta")) else 0.0
        g = p.grad + wd * p.data if wd else p.grad
        if p.velocity is None:
            p.velocity = np.zeros_like(p.data)
        p.velocity *= momentum
        p.velocity += g
        p.data -= lr * p.velocity
        p.grad = None
    return params
