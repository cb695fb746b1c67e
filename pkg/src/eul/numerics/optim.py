"""Optimizers and the linear warmup/decay learning-rate schedule."""
from __future__ import annotations

import math

import numpy as np


def linear_schedule(step: int, total_steps: int, warmup_ratio: float) -> float:
    """Multiplier in [0, 1]: linear warmup to 1, then linear decay to 0."""
    warmup = int(math.ceil(warmup_ratio * total_steps))
    if warmup and step < warmup:
        return (step + 1) / warmup
    remaining = max(total_steps - warmup, 1)
    return max(0.0, (total_steps - step) / remaining)


class SGD:
    def __init__(self, params, lr, total_steps, warmup_ratio=0.0):
        self.params = list(params)
        self.lr = lr
        self.total_steps = total_steps
        self.warmup_ratio = warmup_ratio
        self.t = 0

    def current_lr(self):
        return self.lr * linear_schedule(self.t, self.total_steps, self.warmup_ratio)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        lr = self.current_lr()
        for p in self.params:
            if p.grad is not None:
                p.data -= lr * p.grad
        self.t += 1


class Adam(SGD):
    def __init__(self, params, lr, total_steps, warmup_ratio=0.0,
                 betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        super().__init__(params, lr, total_steps, warmup_ratio)
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        lr = self.current_lr()
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            if self.weight_decay:
                p.data -= lr * self.weight_decay * p.data
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
