"""MLP parameter blocks shared by the generator, hair and SDF fields."""

from __future__ import annotations

import numpy as np

from . import tensor as T


class Mlp:
    """Plain fully connected stack with smooth-leaky activations.

    Weights are fan-in-scaled uniform; `zero_final=True` zeroes the last
    layer so the block's initial output is exactly 0 (displacement and
    attribute-shift nets start as the identity deformation).
    """

    def __init__(self, in_dim, hidden, layers, out_dim, rng, zero_final=False,
                 name="mlp"):
        self.name = name
        self.dims = [in_dim] + [hidden] * layers + [out_dim]
        self.weights = []
        self.biases = []
        dtype = T.get_default_dtype()
        for i in range(len(self.dims) - 1):
            fan_in = self.dims[i]
            bound = 1.0 / np.sqrt(fan_in)
            w = rng.uniform(-bound, bound, (fan_in, self.dims[i + 1]))
            b = rng.uniform(-bound, bound, self.dims[i + 1])
            if zero_final and i == len(self.dims) - 2:
                w[:] = 0.0
                b[:] = 0.0
            self.weights.append(T.Tensor(w.astype(dtype), requires_grad=True))
            self.biases.append(T.Tensor(b.astype(dtype), requires_grad=True))

    def __call__(self, x):
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = T.linear(h, w, b)
            if i != last:
                h = T.leaky_softplus(h)
        return h

    def parameters(self):
        return self.weights + self.biases

    def zero_(self):
        """Clamp every layer to zero (used by the rigid-hair ablation)."""
        for w in self.weights:
            w.data[:] = 0.0
        for b in self.biases:
            b.data[:] = 0.0

    def state(self):
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{self.name}.w{i}"] = w.data
            out[f"{self.name}.b{i}"] = b.data
        return out

    def load_state(self, blocks):
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            w.data = np.asarray(blocks[f"{self.name}.w{i}"], dtype=w.data.dtype)
            b.data = np.asarray(blocks[f"{self.name}.b{i}"], dtype=b.data.dtype)


def tile_rows(vec, n, dtype):
    """Constant condition vector tiled to (n, len(vec)) as a Tensor."""
    arr = np.broadcast_to(np.asarray(vec, dtype=dtype), (n, len(vec))).copy()
    return T.Tensor(arr, dtype=dtype)
