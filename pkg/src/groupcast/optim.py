"""Adam with bias correction."""

from __future__ import annotations

import numpy as np


def adam_step(values, grads, m, v, t, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam update on a list of arrays; returns updated values in place.

    t is 1-based. m and v are the first/second moment buffers, updated in
    place alongside the parameter values.
    """
    if t < 1:
        raise ValueError("adam_step requires t >= 1")
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for val, g, mi, vi in zip(values, grads, m, v):
        mi *= beta1
        mi += (1.0 - beta1) * g
        vi *= beta2
        vi += (1.0 - beta2) * g * g
        val -= lr * (mi / bc1) / (np.sqrt(vi / bc2) + eps)
    return values


class Adam:
    """Stateful wrapper driving ``adam_step`` over Parameters."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        adam_step(
            [p.data for p in self.params],
            [p.grad for p in self.params],
            self.m,
            self.v,
            self.t,
            lr=self.lr,
            beta1=self.beta1,
            beta2=self.beta2,
            eps=self.eps,
        )

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()
