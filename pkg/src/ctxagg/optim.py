"""Momentum SGD."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .nn import Parameter


class SGD:
    """Classic momentum SGD with L2 weight decay folded into the gradient.

    buf <- momentum * buf + (grad + weight_decay * param)
    param <- param - lr * buf
    """

    def __init__(self, params: Sequence[Parameter], lr: float, momentum: float = 0.0,
                 weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._bufs: dict[int, np.ndarray] = {}

    def step(self):
        for p in self.params:
            if p.grad is None:
                continue
            d = p.grad + self.weight_decay * p.data if self.weight_decay else p.grad
            buf = self._bufs.get(id(p))
            if buf is None:
                buf = np.array(d, copy=True)
            else:
                buf *= self.momentum
                buf += d
            self._bufs[id(p)] = buf
            p.data = p.data - self.lr * buf

    def zero_grad(self):
        for p in self.params:
            p.grad = None

