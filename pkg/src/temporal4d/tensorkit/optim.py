from __future__ import annotations

import numpy as np


class Adam:
    """Adam over a list of leaf tensors; reads ``.grad`` set by ``backward``.

    ``lr`` may be a single float or one float per parameter.
    """

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        if np.ndim(lr) == 0:
            lr = [float(lr)] * len(self.params)
        self.lrs = list(lr)
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g * g
            mhat = self.m[i] / c1
            vhat = self.v[i] / c2
            p.data = p.data - self.lrs[i] * mhat / (np.sqrt(vhat) + self.eps)
