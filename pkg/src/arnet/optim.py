"""Adam with bias correction, plus the step-decay schedule used for training."""

from __future__ import annotations

import numpy as np


class Adam:
    def __init__(self, params, lr: float = 5e-5, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            adam_step(p.data, p.grad, m, v, self.lr, b1, b2, self.eps, c1, c2)


def adam_step(param, grad, m, v, lr, beta1, beta2, eps, c1, c2):
    """One in-place Adam update of ``param`` with moment buffers ``m``, ``v``."""
    m *= beta1
    m += (1 - beta1) * grad
    v *= beta2
    v += (1 - beta2) * grad * grad
    param -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def step_decay_lr(base_lr: float, epoch: int, decay_epochs: int, factor: float = 0.1) -> float:
    """Learning rate for ``epoch`` (0-based) under decay by ``factor`` every ``decay_epochs``."""
    if decay_epochs <= 0:
        return base_lr
    return base_lr * factor ** (epoch // decay_epochs)
