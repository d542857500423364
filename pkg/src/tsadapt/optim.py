"""Adam with global-norm gradient clipping."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor
from .errors import DivergenceError


def clip_global_norm(params: list[Tensor], max_norm: float) -> float:
    """Rescale all gradients so their joint L2 norm is at most max_norm.

    Returns the pre-clip norm. Missing gradients count as zero.
    """
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = float(np.sqrt(total))
    if max_norm > 0 and norm > max_norm:
        s = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad *= s
    return norm


class Adam:
    def __init__(
        self,
        params: list[Tensor],
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        clip_norm: float = 5.0,
    ):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.clip_norm = clip_norm
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def step(self) -> float:
        """Clip, apply one update, zero gradients. Returns the pre-clip grad norm."""
        for p in self.params:
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise DivergenceError(f"non-finite gradient in {p.name or 'parameter'}")
        norm = clip_global_norm(self.params, self.clip_norm)
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (self.m[i] / b1c) / (np.sqrt(self.v[i] / b2c) + self.eps)
            p.grad = None
        return norm
