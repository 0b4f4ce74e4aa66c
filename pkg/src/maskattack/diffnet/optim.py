from __future__ import annotations

import numpy as np


class Adam:
    """Adam over a dict of float64 arrays, updated in place."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m: dict = {}
        self._v: dict = {}

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        c1 = 1 - self.beta1**self.t
        c2 = 1 - self.beta2**self.t
        for key, g in grads.items():
            m = self._m.get(key)
            if m is None:
                m = self._m[key] = np.zeros_like(g)
                self._v[key] = np.zeros_like(g)
            v = self._v[key]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            params[key] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
