"""AdamW with decoupled weight decay, cosine annealing, gradient clipping.

Parameters are addressed by name so optimizer state survives checkpointing
and stays aligned with the module tree. Hyperparameters default to the
stock AdamW values (beta1 0.9, beta2 0.999, eps 1e-8, weight decay 0.01).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor

__all__ = ["AdamW", "cosine_lr", "clip_global_norm"]


@dataclass
class AdamW:
    """Decoupled-weight-decay Adam over a named parameter dict."""

    params: dict[str, Tensor]
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        for name, p in self.params.items():
            self.m[name] = np.zeros_like(p.data)
            self.v[name] = np.zeros_like(p.data)

    def step(self, lr: float | None = None) -> None:
        """Apply one update from the accumulated gradients (missing grads skip)."""
        lr = self.lr if lr is None else lr
        self.step_count += 1
        b1c = 1.0 - self.beta1**self.step_count
        b2c = 1.0 - self.beta2**self.step_count
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / b1c) / (np.sqrt(v / b2c) + self.eps)
            p.data = (p.data - lr * (update + self.weight_decay * p.data)).astype(np.float32)

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.grad = None


def cosine_lr(lr_init: float, iteration: int, total: int, lr_min: float = 0.0) -> float:
    """Cosine annealing from lr_init at iteration 0 to lr_min at iteration total."""
    if total <= 0:
        return lr_init
    frac = min(max(iteration / total, 0.0), 1.0)
    return float(lr_min + 0.5 * (lr_init - lr_min) * (1.0 + np.cos(np.pi * frac)))


def clip_global_norm(params: dict[str, Tensor], max_norm: float = 1.0) -> float:
    """Scale all gradients so their joint L2 norm is at most max_norm."""
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    norm = float(np.sqrt(total))
    if norm > max_norm:
        scale = np.float32(max_norm / (norm + 1e-12))
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm
