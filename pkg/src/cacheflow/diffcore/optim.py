"""Adam over a :class:`ParamStore`."""

import numpy as np

from ..errors import NumericError


class Adam:
    """Adam with bias correction. Grads are zeroed after each step."""

    def __init__(self, store, lr=5e-4, betas=(0.9, 0.999), eps=1e-8):
        self.store = store
        self.lr = float(lr)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.m = np.zeros_like(store.params)
        self.v = np.zeros_like(store.params)
        self.t = 0

    def step(self):
        g = self.store.grads
        if not np.all(np.isfinite(g)):
            bad = [b.name for b in self.store.layout if not np.all(np.isfinite(self.store.grad(b.name)))]
            raise NumericError(f"non-finite gradient in parameter block(s): {', '.join(bad)}")
        self.t += 1
        self.m *= self.beta1
        self.m += (1.0 - self.beta1) * g
        self.v *= self.beta2
        self.v += (1.0 - self.beta2) * g * g
        m_hat = self.m / (1.0 - self.beta1**self.t)
        v_hat = self.v / (1.0 - self.beta2**self.t)
        self.store.params -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        self.store.zero_grad()


def optimizer_step(opt):
    opt.step()
    return opt.store
