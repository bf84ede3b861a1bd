"""
Adam on named numpy arrays.
"""

from __future__ import annotations

from typing import Dict, Tuple

import numpy as np


class Adam:
    """
    Adam (adaptive moment estimation).

    Args:
        lr: learning rate
        betas: running-average coefficients
        eps: denominator floor
    """

    def __init__(self, lr: float = 1e-3, betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
        """Return updated copies of ``params``; keys without a gradient are kept."""
        self.t += 1
        bias1 = 1.0 - self.beta1 ** self.t
        bias2 = 1.0 - self.beta2 ** self.t
        updated = {}
        for key, value in params.items():
            grad = grads.get(key)
            if grad is None:
                updated[key] = value.copy()
                continue
            m = self.m.get(key, np.zeros_like(value))
            v = self.v.get(key, np.zeros_like(value))
            m = self.beta1 * m + (1.0 - self.beta1) * grad
            v = self.beta2 * v + (1.0 - self.beta2) * grad * grad
            self.m[key], self.v[key] = m, v
            m_hat = m / bias1
            v_hat = v / bias2
            updated[key] = value - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return updated
