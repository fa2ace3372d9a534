import numpy as np


class Adam:
    """Adam over a dict of arrays.

    Moments and bias-correction counters are kept per key, so a key that is
    absent from a given ``step`` call is left completely untouched. Arrays
    are rebound, never modified in place.
    """

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = {}
        self.v = {}
        self.t = {}

    def step(self, params, grads, keys=None):
        out = dict(params)
        for k in (grads.keys() if keys is None else keys):
            g = grads[k]
            m = self.beta1 * self.m.get(k, 0.0) + (1.0 - self.beta1) * g
            v = self.beta2 * self.v.get(k, 0.0) + (1.0 - self.beta2) * g * g
            t = self.t.get(k, 0) + 1
            self.m[k], self.v[k], self.t[k] = m, v, t
            m_hat = m / (1.0 - self.beta1 ** t)
            v_hat = v / (1.0 - self.beta2 ** t)
            out[k] = params[k] - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return out
