"""Temporal hair branch: scalp-distance weight, history-conditioned MLPs
and the two-frame state recurrence.

At t=0 the head and hair are still: both history slots hold the neutral
hair positions and the initial pose. The state machine is strictly
sequential in t; `advance` shifts (t-1, t-2) after each step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .cameras import RigidPose, encode_pose
from .generator import DriveFrame, ramp, min_dist
from .nets import Mlp, tile_rows

HAIR_IN_EXTRA = 3 + 3 + 3 * 12   # two history position blocks + three encoded poses
HAIR_ATTR_DIM = 7                # 4 quaternion + 3 scale; no opacity term


@dataclass
class HairHistory:
    """Canonical hair positions at t-1 and t-2 plus the matching poses."""

    xp1: np.ndarray
    xp2: np.ndarray
    b1: RigidPose
    b2: RigidPose

    @staticmethod
    def initial(x0_hair, pose0: RigidPose) -> "HairHistory":
        x0_hair = np.asarray(x0_hair, dtype=np.float64)
        return HairHistory(x0_hair.copy(), x0_hair.copy(), pose0, pose0)

    def copy(self):
        return HairHistory(self.xp1.copy(), self.xp2.copy(), self.b1, self.b2)


class HairNets:
    """Deformation, color-delta and attribute-delta MLPs for hair points."""

    def __init__(self, mcfg, rng):
        in_dim = 3 + HAIR_IN_EXTRA
        hh, hl = mcfg.hair_hidden, mcfg.hair_layers
        self.f_def_hair = Mlp(in_dim, hh, hl, 3, rng, zero_final=True,
                              name="f_def_hair")
        self.f_col_hair = Mlp(in_dim, hh, hl, mcfg.channels, rng, zero_final=True,
                              name="f_col_hair")
        self.f_att_hair = Mlp(in_dim, hh, hl, HAIR_ATTR_DIM, rng, zero_final=True,
                              name="f_att_hair")

    def all_nets(self):
        return [self.f_def_hair, self.f_col_hair, self.f_att_hair]

    def parameters(self):
        return [p for net in self.all_nets() for p in net.parameters()]

    def zero_(self):
        for net in self.all_nets():
            net.zero_()

    def state(self):
        out = {}
        for net in self.all_nets():
            out.update(net.state())
        return out

    def load_state(self, blocks):
        for net in self.all_nets():
            net.load_state(blocks)


def hair_weight(x0_hair, p1, cfg):
    """Scalp-distance ramp: 1 below t3, linear to 0 at t4, 0 beyond."""
    p1 = np.asarray(p1)
    if p1.shape[0] == 0:
        raise ValueError("empty scalp sample set")
    return ramp(min_dist(np.asarray(x0_hair), p1), cfg.t3, cfg.t4)


def step_hair(x0_hair, history: HairHistory, pose_t: RigidPose, lam_hair,
              nets: HairNets, detach=False):
    """One evaluation of the hair branch at time t.

    Returns (canonical hair positions X'_t, color delta, quaternion delta,
    scale delta). History entries may be Tensors (gradient flows through
    the recurrence window) or plain arrays (treated as constants).
    """
    n = x0_hair.shape[0]
    xp1, xp2 = history.xp1, history.xp2
    if xp1.shape[0] != n or xp2.shape[0] != n:
        raise ValueError(
            f"hair history holds {xp1.shape[0]}/{xp2.shape[0]} points, model has {n}")
    dtype = x0_hair.data.dtype
    xp1 = xp1 if isinstance(xp1, T.Tensor) else T.Tensor(np.asarray(xp1), dtype=dtype)
    xp2 = xp2 if isinstance(xp2, T.Tensor) else T.Tensor(np.asarray(xp2), dtype=dtype)

    poses = np.concatenate([encode_pose(pose_t), encode_pose(history.b1),
                            encode_pose(history.b2)])
    inp = T.concat([x0_hair, xp1, xp2, tile_rows(poses, n, dtype)], axis=1)

    d = nets.f_def_hair(inp)
    dc = nets.f_col_hair(inp)
    datt = nets.f_att_hair(inp)
    if detach:
        d, dc, datt = d.detach(), dc.detach(), datt.detach()
    x_t = x0_hair + T.mul(d, np.asarray(lam_hair)[:, None])
    return x_t, dc, datt[:, 0:4], datt[:, 4:7]


def advance(history: HairHistory, x_t, pose_t: RigidPose) -> HairHistory:
    """Shift the two-frame window: (t-1, t-2) <- (t, old t-1)."""
    x_t = x_t.data if isinstance(x_t, T.Tensor) else np.asarray(x_t)
    return HairHistory(x_t.copy(), history.xp1.copy() if isinstance(history.xp1, np.ndarray)
                       else np.asarray(history.xp1.data).copy(),
                       pose_t, history.b1)


# -------------------------------------------------------------- trajectory file
# One frame per line, whitespace-separated decimal text:
#   t theta_0 ... theta_{E-1} qw qx qy qz tx ty tz


def save_trajectory(path, frames):
    with open(path, "w") as f:
        e = len(frames[0].theta) if frames else 0
        f.write(f"# t theta[{e}] qw qx qy qz tx ty tz\n")
        for fr in frames:
            vals = [*fr.theta, *fr.pose.q, *fr.pose.t]
            f.write(f"{fr.t} " + " ".join(repr(float(v)) for v in vals) + "\n")


def load_trajectory(path):
    frames = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            t = int(parts[0])
            vals = np.array([float(v) for v in parts[1:]])
            if vals.size < 7:
                raise ValueError(f"malformed trajectory record: {line!r}")
            theta = vals[:-7]
            pose = RigidPose(vals[-7:-3], vals[-3:])
            frames.append(DriveFrame(theta=theta, pose=pose, t=t))
    return frames
