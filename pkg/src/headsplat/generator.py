"""The learned dynamic generator for non-hair motion.

Expression- and pose-conditioned MLPs predict per-point displacement,
32-channel color and raw attribute shifts over the neutral model; a
landmark-distance ramp decides how much each point follows expression
vs pose. Hair points get their position/color/attribute deltas from the
temporal hair branch instead and keep the expression weight at zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .cameras import RigidPose, apply_rigid, encode_pose
from .gaussians import FrameGaussians, HAIR, NeutralGaussianModel, activate_opacity, \
    activate_quats, activate_scales
from .nets import Mlp, tile_rows

POSE_ENC_DIM = 12
ATTR_DIM = 8           # 4 quaternion + 3 scale + 1 opacity


@dataclass
class DriveFrame:
    """Per-timestep control: expression coefficients and rigid head pose."""

    theta: np.ndarray
    pose: RigidPose
    t: int = 0

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64).ravel()
        if not np.all(np.isfinite(self.theta)):
            raise ValueError("non-finite expression coefficients")


@dataclass
class BlendConfig:
    t1: float = 0.15
    t2: float = 0.25
    t3: float = 0.05
    t4: float = 0.15

    def __post_init__(self):
        if not (0 < self.t1 < self.t2 and 0 < self.t3 < self.t4):
            raise ValueError("ramp thresholds must satisfy 0 < t1 < t2 and 0 < t3 < t4")


class GeneratorNets:
    """The six condition MLPs of the non-hair generator."""

    def __init__(self, mcfg, rng):
        e, fdim = mcfg.expression_dim, mcfg.feature_dim
        dh, dl = mcfg.deform_hidden, mcfg.deform_layers
        ch, cl = mcfg.color_hidden, mcfg.color_layers
        ah, al = mcfg.attr_hidden, mcfg.attr_layers
        self.f_def_exp = Mlp(3 + e, dh, dl, 3, rng, zero_final=True, name="f_def_exp")
        self.f_def_pose = Mlp(3 + POSE_ENC_DIM, dh, dl, 3, rng, zero_final=True,
                              name="f_def_pose")
        self.f_col_exp = Mlp(fdim + e, ch, cl, mcfg.channels, rng, name="f_col_exp")
        self.f_col_pose = Mlp(fdim + POSE_ENC_DIM, ch, cl, mcfg.channels, rng,
                              name="f_col_pose")
        self.f_att_exp = Mlp(fdim + e, ah, al, ATTR_DIM, rng, zero_final=True,
                             name="f_att_exp")
        self.f_att_pose = Mlp(fdim + POSE_ENC_DIM, ah, al, ATTR_DIM, rng,
                              zero_final=True, name="f_att_pose")

    def all_nets(self):
        return [self.f_def_exp, self.f_def_pose, self.f_col_exp,
                self.f_col_pose, self.f_att_exp, self.f_att_pose]

    def parameters(self):
        return [p for net in self.all_nets() for p in net.parameters()]

    def state(self):
        out = {}
        for net in self.all_nets():
            out.update(net.state())
        return out

    def load_state(self, blocks):
        for net in self.all_nets():
            net.load_state(blocks)


def ramp(dist, lo, hi):
    """1 below `lo`, linear to 0 at `hi`, 0 beyond."""
    dist = np.asarray(dist)
    return np.clip((hi - dist) / (hi - lo), 0.0, 1.0)


def min_dist(points, targets):
    """Per-point minimum Euclidean distance to a target set."""
    diff = points[:, None, :] - targets[None, :, :]
    return np.sqrt((diff * diff).sum(axis=2)).min(axis=1)


def blend_weights(x0, p0, labels, cfg: BlendConfig):
    """(lambda_exp, lambda_pose) from landmark distance; hair is pose-only.

    Computed from the current values and treated as constants within an
    iteration (the ramps are not differentiated through).
    """
    if p0.shape[0] == 0:
        raise ValueError("empty landmark set")
    lam_exp = ramp(min_dist(np.asarray(x0), np.asarray(p0)), cfg.t1, cfg.t2)
    lam_exp[np.asarray(labels) == HAIR] = 0.0
    return lam_exp, 1.0 - lam_exp


def _conditioned(net, feats, cond_vec, n):
    cond = tile_rows(cond_vec, n, feats.data.dtype)
    return net(T.concat([feats, cond], axis=1))


def deform(nets, x0, theta, pose, lam_exp, lam_pose):
    """Eq.-3-style displacement field over the neutral positions."""
    n = x0.shape[0]
    d_exp = _conditioned(nets.f_def_exp, x0, theta, n)
    d_pose = _conditioned(nets.f_def_pose, x0, encode_pose(pose), n)
    le = lam_exp[:, None]
    lp = lam_pose[:, None]
    return x0 + T.mul(d_exp, le) + T.mul(d_pose, lp)


def color(nets, f0, theta, pose, lam_exp, lam_pose):
    """Dynamic color; there is no neutral color term by construction."""
    n = f0.shape[0]
    c_exp = _conditioned(nets.f_col_exp, f0, theta, n)
    c_pose = _conditioned(nets.f_col_pose, f0, encode_pose(pose), n)
    return T.mul(c_exp, lam_exp[:, None]) + T.mul(c_pose, lam_pose[:, None])


def attribute_shift(nets, f0, theta, pose, lam_exp, lam_pose):
    """Raw (pre-activation) shift for quaternion, scale and opacity."""
    n = f0.shape[0]
    a_exp = _conditioned(nets.f_att_exp, f0, theta, n)
    a_pose = _conditioned(nets.f_att_pose, f0, encode_pose(pose), n)
    return T.mul(a_exp, lam_exp[:, None]) + T.mul(a_pose, lam_pose[:, None])


def canonical_frame(model: NeutralGaussianModel, nets: GeneratorNets, drive: DriveFrame,
                    blend_cfg: BlendConfig, hair_nets=None, history=None,
                    hair_lambda=None, detach_hair=False):
    """Evaluate the full generator at one timestep in canonical space.

    Hair points (the trailing block) take their position exclusively from
    the temporal branch, their color as the pose branch plus the hair
    delta, and quaternion/scale as neutral plus the hair delta; opacity
    follows the generic shift. With zero-initialized hair nets the hair
    is exactly neutral.
    """
    lam_exp, lam_pose = blend_weights(model.X0.data, model.P0, model.label, blend_cfg)
    k = model.hair_index
    n = model.num_points

    x_prime = deform(nets, model.X0, drive.theta, drive.pose, lam_exp, lam_pose)
    c_prime = color(nets, model.F0, drive.theta, drive.pose, lam_exp, lam_pose)
    att = attribute_shift(nets, model.F0, drive.theta, drive.pose, lam_exp, lam_pose)

    q_raw = model.Q0 + att[:, 0:4]
    s_raw = model.S0 + att[:, 4:7]
    a_raw = model.A0 + att[:, 7:8]

    hair_canonical = None
    if k < n:
        if hair_nets is not None:
            from .hair import step_hair
            xh, dc, dq, ds = step_hair(model.X0[k:], history, drive.pose, hair_lambda,
                                       hair_nets, detach=detach_hair)
            hair_canonical = xh
            c_hair = c_prime[k:] + dc
            q_hair = model.Q0[k:] + dq
            s_hair = model.S0[k:] + ds
        else:
            # hair branch disabled: hair stays neutral in canonical space
            xh = model.X0[k:]
            hair_canonical = xh
            c_hair = c_prime[k:]
            q_hair = model.Q0[k:]
            s_hair = model.S0[k:]
        x_prime = T.concat([x_prime[:k], xh], axis=0)
        c_prime = T.concat([c_prime[:k], c_hair], axis=0)
        q_raw = T.concat([q_raw[:k], q_hair], axis=0)
        s_raw = T.concat([s_raw[:k], s_hair], axis=0)

    frame = FrameGaussians(
        X=x_prime, C=c_prime, Q=activate_quats(q_raw),
        S=activate_scales(s_raw), A=activate_opacity(a_raw),
        frame="canonical", label=model.label)
    return frame, hair_canonical


def assemble_world(canonical: FrameGaussians, pose: RigidPose) -> FrameGaussians:
    """Rigid canonical -> world; only positions and quaternions transform."""
    if canonical.frame != "canonical":
        raise ValueError("assemble_world expects a canonical-frame input")
    x, q = apply_rigid(pose, canonical.X, canonical.Q)
    return FrameGaussians(X=x, C=canonical.C, Q=q, S=canonical.S, A=canonical.A,
                          frame="world", label=canonical.label)
