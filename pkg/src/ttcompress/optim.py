"""Plain SGD and bias-corrected Adam over lists of numpy arrays (in place)."""

from __future__ import annotations

import numpy as np

__all__ = ["Adam", "SGD", "make_optimizer"]


class SGD:
    name = "sgd"

    def __init__(self, params, lr: float = 1e-2, momentum: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.t = 0
        self.buf = [np.zeros_like(p) for p in self.params]

    def step(self, grads) -> None:
        self.t += 1
        for p, g, b in zip(self.params, grads, self.buf):
            if self.momentum:
                b *= self.momentum
                b += g
                g = b
            p -= self.lr * g

    def state_arrays(self):
        return [self.buf]

    def hyper(self):
        return [float(self.t), self.lr, self.momentum]


class Adam:
    name = "adam"

    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]

    def step(self, grads) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_arrays(self):
        return [self.m, self.v]

    def hyper(self):
        return [float(self.t), self.lr, self.beta1, self.beta2, self.eps]


def make_optimizer(name: str, params, lr: float, **kw):
    if name == "adam":
        return Adam(params, lr=lr, **kw)
    if name == "sgd":
        return SGD(params, lr=lr, **kw)
    raise ValueError(f"unknown optimizer {name!r}")
