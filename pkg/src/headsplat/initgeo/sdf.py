"""Signed distance + feature fields for the two head parts.

Each field is an MLP over sinusoidally encoded positions plus an analytic
bias (sphere for the head, concentric shell for the hair) with a zeroed
final layer, so the initial surface is exactly the bias geometry and the
first extraction is never empty.
"""

from __future__ import annotations

import numpy as np

from .. import tensor as T
from ..nets import Mlp

FEATURE_OUT = 32


def positional_encoding(x, octaves):
    """[x, sin(2^o pi x), cos(2^o pi x)]; works on Tensors and arrays."""
    if isinstance(x, T.Tensor):
        parts = [x]
        for o in range(octaves):
            w = (2.0 ** o) * np.pi
            parts.append(T.sin(T.mul(x, w)))
            parts.append(T.cos(T.mul(x, w)))
        return T.concat(parts, axis=1)
    parts = [x]
    for o in range(octaves):
        w = (2.0 ** o) * np.pi
        parts.append(np.sin(w * x))
        parts.append(np.cos(w * x))
    return np.concatenate(parts, axis=1)


def encoding_dim(octaves):
    return 3 * (1 + 2 * octaves)


class SdfField:
    """x -> (signed distance, 32-d feature)."""

    def __init__(self, mcfg, rng, part):
        if part == "head":
            self.bias = ("sphere", mcfg.head_sdf_radius)
        elif part == "hair":
            self.bias = ("shell", mcfg.hair_shell_radius, mcfg.hair_shell_width)
        else:
            raise ValueError(f"unknown part {part!r}")
        self.part = part
        self.octaves = mcfg.sdf_octaves
        self.mlp = Mlp(encoding_dim(self.octaves), mcfg.sdf_hidden, mcfg.sdf_layers,
                       1 + FEATURE_OUT, rng, zero_final=True, name=f"sdf_{part}")

    def _bias(self, x):
        if isinstance(x, T.Tensor):
            r = T.sqrt(T.sum_(T.mul(x, x), axis=1))
            if self.bias[0] == "sphere":
                return r - self.bias[1]
            return T.absolute(r - self.bias[1]) - self.bias[2]
        r = np.linalg.norm(x, axis=1)
        if self.bias[0] == "sphere":
            return r - self.bias[1]
        return np.abs(r - self.bias[1]) - self.bias[2]

    def __call__(self, x, encoded=None):
        """`x` may be a Tensor (gradients flow to it) or a constant array.

        `encoded` short-circuits the position encoding for cached lattices.
        """
        if encoded is None:
            encoded = positional_encoding(x, self.octaves)
        if not isinstance(encoded, T.Tensor):
            encoded = T.Tensor(encoded, dtype=T.get_default_dtype())
        out = self.mlp(encoded)
        bias = self._bias(x)
        if not isinstance(bias, T.Tensor):
            bias = T.Tensor(bias[:, None], dtype=out.data.dtype)
            s = out[:, 0:1] + bias
        else:
            s = out[:, 0:1] + T.reshape(bias, (-1, 1))
        return T.reshape(s, (-1,)), out[:, 1:]

    def parameters(self):
        return self.mlp.parameters()

    def state(self):
        return self.mlp.state()

    def load_state(self, blocks):
        self.mlp.load_state(blocks)
