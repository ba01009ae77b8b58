"""First-order update rules operating in place on numpy arrays."""

import math

import numpy as np


class Adam:
    """Adam with bias correction.

    Moments are kept per parameter in float64; parameters are updated in
    place, so callers hand in the ``data`` arrays of their tensors.
    """

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros(p.shape, dtype=np.float64) for p in self.params]
        self.v = [np.zeros(p.shape, dtype=np.float64) for p in self.params]

    def step(self, grads):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        step = self.lr * math.sqrt(c2) / c1
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if g is None:
                continue
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g, dtype=np.float64)
            p -= (step * m / (np.sqrt(v) + self.eps)).astype(p.dtype)


def exp_decay(base, decay, t):
    """Step size ``base * exp(-t / decay)``."""
    return base * math.exp(-t / decay)
