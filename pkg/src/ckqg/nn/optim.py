"""Adam optimizer over a ParameterSet.

Each parameter carries its own step counter so bias correction stays
self-consistent for parameters that sit out frozen phases: a frozen
parameter's moments and counter do not advance.
"""

from __future__ import annotations

import numpy as np

from .params import ParameterSet


class Adam:
    def __init__(self, params: ParameterSet, lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, int] = {}

    def step(self, trainable: set[str] | None = None) -> None:
        """Update parameters with accumulated grads; skip frozen names entirely."""
        for name, p in self.params.items():
            if trainable is not None and name not in trainable:
                continue
            if p.grad is None:
                continue
            g = p.grad
            if name not in self.m:
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
                self.t[name] = 0
            self.t[name] += 1
            t = self.t[name]
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            m_hat = m / (1.0 - self.beta1 ** t)
            v_hat = v / (1.0 - self.beta2 ** t)
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
