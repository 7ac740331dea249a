"""First-order stochastic optimizer over named parameter groups."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


class Adam:
    """Adam with one learning rate per named group.

    groups: dict name -> (list of Tensors, learning rate). Moment arrays
    are allocated lazily to match parameter shapes; the step counter is
    shared so bias correction is uniform.
    """

    def __init__(self, groups, beta1=0.9, beta2=0.999, eps=1e-8):
        self.groups = {}
        for name, (params, lr) in groups.items():
            params = list(params)
            if lr < 0:
                raise ValueError(f"negative learning rate for group '{name}'")
            self.groups[name] = (params, float(lr))
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = {}
        self._v = {}

    def set_lr(self, name, lr):
        params, _ = self.groups[name]
        self.groups[name] = (params, float(lr))

    def zero_grad(self):
        for params, _ in self.groups.values():
            for p in params:
                p.grad = None

    def step(self):
        """One Adam update; parameters with no gradient are skipped."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, (params, lr) in self.groups.items():
            for p in params:
                if p.grad is None:
                    continue
                g = p.grad
                if not np.all(np.isfinite(g)):
                    raise FloatingPointError(
                        f"non-finite gradient in parameter group '{name}'")
                key = p._id
                m = self._m.get(key)
                if m is None:
                    m = self._m[key] = np.zeros_like(p.data)
                    self._v[key] = np.zeros_like(p.data)
                v = self._v[key]
                m *= b1
                m += (1.0 - b1) * g
                v *= b2
                v += (1.0 - b2) * (g * g)
                if lr != 0.0:
                    p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def adam_step(state: Adam, grads_by_param=None):
    """Single optimizer step given externally supplied gradients.

    `grads_by_param` maps Tensor -> ndarray; omitted entries fall back to
    the Tensor's own `.grad`.
    """
    if grads_by_param:
        for p, g in grads_by_param.items():
            p.grad = np.asarray(g, dtype=p.data.dtype)
    state.step()
