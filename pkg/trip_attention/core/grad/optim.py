"""Gradient descent optimizers updating parameter arrays in place."""

from typing import Dict, Hashable

import numpy as np


class SGD:
    """Plain stochastic gradient descent.

    Parameters
    ----------
    lr (float) : learning rate
    """

    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: Dict[Hashable, np.ndarray], grads: Dict[Hashable, np.ndarray], lr: float = None) -> None:
        """Update every parameter that has a gradient."""
        lr = self.lr if lr is None else lr
        for key in sorted(grads, key=str):
            params[key] -= lr * grads[key]


class Adam:
    """Adam with bias-corrected moment estimates.

    Parameters
    ----------
    lr (float) : learning rate
    beta1 (float, default=0.9) : first moment decay
    beta2 (float, default=0.999) : second moment decay
    eps (float, default=1e-8) : denominator offset
    """

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.steps = 0
        self.m = {}
        self.v = {}

    def step(self, params: Dict[Hashable, np.ndarray], grads: Dict[Hashable, np.ndarray], lr: float = None) -> None:
        """Update every parameter that has a gradient."""
        lr = self.lr if lr is None else lr
        self.steps += 1
        correction1 = 1 - self.beta1**self.steps
        correction2 = 1 - self.beta2**self.steps
        for key in sorted(grads, key=str):
            grad = grads[key]
            m = self.m.get(key, np.zeros_like(grad))
            v = self.v.get(key, np.zeros_like(grad))
            m = self.beta1 * m + (1 - self.beta1) * grad
            v = self.beta2 * v + (1 - self.beta2) * grad * grad
            self.m[key] = m
            self.v[key] = v
            params[key] -= lr * (m / correction1) / (np.sqrt(v / correction2) + self.eps)


OPTIMIZERS = {"sgd": SGD, "adam": Adam}


def make_optimizer(name: str, lr: float):
    """Construct an optimizer by name."""
    if name not in OPTIMIZERS:
        raise ValueError(f"optimizer must be one of {sorted(OPTIMIZERS)}, got '{name}'")

    return OPTIMIZERS[name](lr)
