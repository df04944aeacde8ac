import numpy as np


class Adam:
    """Adam over a dict of named numpy arrays, updated in place.

    Step counts and moments are kept per parameter, so a parameter that sits out a
    stage resumes with its own bias correction. ``reset`` drops the state of the
    named parameters.
    """

    def __init__(self, lr=0.1, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = {}
        self.v = {}
        self.t = {}

    def reset(self, names=None):
        for k in list(self.m) if names is None else names:
            self.m.pop(k, None)
            self.v.pop(k, None)
            self.t.pop(k, None)

    def step(self, params, grads, active=None):
        for k in params if active is None else active:
            g = grads[k]
            if k not in self.m:
                self.m[k] = np.zeros_like(params[k], dtype=float)
                self.v[k] = np.zeros_like(params[k], dtype=float)
                self.t[k] = 0
            self.t[k] += 1
            t = self.t[k]
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            m_hat = self.m[k] / (1 - self.beta1**t)
            v_hat = self.v[k] / (1 - self.beta2**t)
            params[k] -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
