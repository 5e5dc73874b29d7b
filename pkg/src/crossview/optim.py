"""AdamW with decoupled weight decay.

The update follows the decoupled formulation: weight decay is applied
directly to the parameter, not through the gradient, so

    p <- p - lr * wd * p - lr * m_hat / (sqrt(v_hat) + eps)

Moments are kept in the parameter dtype. Parameters with ``requires_grad``
False are never touched, which is how the frozen backbone is excluded
during block training.
"""

import numpy as np

from crossview.engine import Tensor

__all__ = ["AdamW"]


class AdamW:
    """Decoupled-weight-decay Adam over a list of :class:`Tensor` params.

    Parameters
    ----------
    params : list of Tensor
        Trainable tensors; entries with ``requires_grad=False`` are skipped.
    lr : float
        Step size.
    betas : (float, float)
        Exponential decay rates for the first and second moments.
    eps : float
        Added to the square-rooted second moment.
    weight_decay : float
        Decoupled decay coefficient.
    """

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = [p for p in params if isinstance(p, Tensor)]
        if any(not isinstance(p, Tensor) for p in params):
            raise TypeError("AdamW expects Tensor parameters")
        self.lr = float(lr)
        self.beta1, self.beta2 = float(betas[0]), float(betas[1])
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.step_count = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        """Apply one update in place; missing gradients count as zero."""
        self.step_count += 1
        b1c = 1.0 - self.beta1**self.step_count
        b2c = 1.0 - self.beta2**self.step_count
        for p, m, v in zip(self.params, self._m, self._v):
            if not p.requires_grad:
                continue
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            elif g.shape != p.data.shape:
                raise ValueError(f"gradient shape {g.shape} != parameter shape {p.data.shape}")
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            m_hat = m / b1c
            v_hat = v / b2c
            if self.weight_decay:
                p.data -= self.lr * self.weight_decay * p.data
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
