"""The neutral Gaussian head model and attribute activation.

Raw parameters are the optimizer's variables: log-scales, logit-opacities
and unnormalized quaternions, so the optimization is unconstrained and the
activated attributes always satisfy their range invariants.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .cameras import quats_to_rotations

HEAD = 0
HAIR = 1

FEATURE_DIM = 128
COLOR_CHANNELS = 32


@dataclass
class NeutralGaussianModel:
    """Canonical, expression-free avatar state. All five blocks optimizable."""

    X0: T.Tensor          # (N,3) positions
    F0: T.Tensor          # (N,F) per-point features
    Q0: T.Tensor          # (N,4) raw quaternions
    S0: T.Tensor          # (N,3) log-scales
    A0: T.Tensor          # (N,1) opacity logits
    label: np.ndarray     # (N,) HEAD/HAIR tags, fixed after transfer
    P0: np.ndarray        # (68,3) neutral landmarks (fixed after stage 1)
    P1: np.ndarray        # (M,3) scalp samples

    def __post_init__(self):
        n = self.X0.shape[0]
        if n == 0:
            raise ValueError("empty model")
        for name in ("F0", "Q0", "S0", "A0"):
            if getattr(self, name).shape[0] != n:
                raise ValueError(f"{name} row count does not match X0")
        if self.label.shape[0] != n:
            raise ValueError("label count does not match X0")

    @property
    def num_points(self):
        return self.X0.shape[0]

    @property
    def hair_index(self):
        """First hair row; hair points are a contiguous trailing block."""
        heads = int(np.sum(self.label == HEAD))
        if not np.all(self.label[:heads] == HEAD) or not np.all(self.label[heads:] == HAIR):
            raise ValueError("labels must be ordered head block then hair block")
        return heads

    def parameters(self):
        return {"X0": self.X0, "F0": self.F0, "Q0": self.Q0,
                "S0": self.S0, "A0": self.A0}


@dataclass
class FrameGaussians:
    """Fully activated Gaussians at one timestep, ready to rasterize."""

    X: T.Tensor           # (N,3)
    C: T.Tensor           # (N,channels)
    Q: T.Tensor           # (N,4) unit quaternions
    S: T.Tensor           # (N,3) positive scales
    A: T.Tensor           # (N,1) opacities in (0,1)
    frame: str            # "canonical" or "world"
    label: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.frame not in ("canonical", "world"):
            raise ValueError(f"unknown frame tag {self.frame!r}")


def activate_scales(S0):
    return T.exp(S0)


def activate_opacity(A0):
    return T.sigmoid(A0)


def activate_quats(Q0):
    return T.normalize_rows(Q0)


def activate(model: NeutralGaussianModel):
    """Neutral attributes mapped to renderable ranges (all differentiable)."""
    return (model.X0, activate_quats(model.Q0),
            activate_scales(model.S0), activate_opacity(model.A0))


def covariance3d(q, s):
    """Sigma = R diag(s^2) R^T for one activated (quaternion, scale) pair."""
    from .cameras import quat_to_rotation
    R = quat_to_rotation(np.asarray(q, dtype=np.float64))
    return (R * np.asarray(s, dtype=np.float64) ** 2) @ R.T


def covariance3d_batch(q, s):
    """Batched covariances from unit quaternions (N,4) and scales (N,3)."""
    R = quats_to_rotations(q)
    RD = R * (s * s)[:, None, :]
    return RD @ np.swapaxes(R, 1, 2)
