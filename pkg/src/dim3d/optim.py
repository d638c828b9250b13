from __future__ import annotations

import numpy as np

from .tensor import Tensor


class Adam:
    """Adam with bias correction; moments live in ``m``/``v`` keyed by name."""

    def __init__(self, named: list[tuple[str, Tensor]], lr: float = 1e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.named = named
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = {n: np.zeros_like(t.data) for n, t in named}
        self.v = {n: np.zeros_like(t.data) for n, t in named}

    def zero_grad(self) -> None:
        for _, t in self.named:
            t.grad = None

    def step(self) -> None:
        self.step_count += 1
        c1 = 1.0 - self.b1**self.step_count
        c2 = 1.0 - self.b2**self.step_count
        for name, t in self.named:
            if t.grad is None:
                continue
            g = t.grad.data
            m, v = self.m[name], self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            t.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
