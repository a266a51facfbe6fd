import numpy as np


class Adam:
    """Adam over a dict of named arrays, one learning rate per name.

    ``lr`` may be a scalar or an array broadcastable to the parameter
    (used for per-degree polynomial step sizes).
    """

    def __init__(self, lrs, betas=(0.9, 0.999), eps=1e-15):
        self.lrs = dict(lrs)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.m = {}
        self.v = {}
        self.t = 0

    def step(self, params, grads, factors=None):
        """One update; ``factors`` optionally rescales named learning rates for this step."""
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for k, p in params.items():
            lr = self.lrs.get(k, 0.0)
            if factors and k in factors:
                lr = lr * factors[k]
            if np.all(np.asarray(lr) == 0):
                continue
            g = grads[k]
            if k not in self.m:
                self.m[k] = np.zeros_like(p)
                self.v[k] = np.zeros_like(p)
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
