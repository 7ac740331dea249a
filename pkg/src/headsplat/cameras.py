"""Rotations, rigid poses, pinhole cameras and covariance projection.

Conventions (asserted by tests): camera space is +z forward, +x right,
+y down; points are row vectors; world-to-camera is `xc = x @ R.T + t`.
Pixel (u, v) indexes image[v, u] with pixel centers at integer coords.
Quaternions are (w, x, y, z). Scene units put the head length near 1.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T

ZNEAR = 0.01
COV2D_FLOOR = 0.3  # px^2 anti-aliasing diagonal floor


def quat_normalize(q):
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n < 1e-12):
        raise ValueError("cannot normalize a zero quaternion")
    return q / n


def quat_to_rotation(q):
    """Unit-normalized quaternion (w,x,y,z) to a 3x3 rotation matrix."""
    w, x, y, z = quat_normalize(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quats_to_rotations(q):
    """Batched (N,4) unit quaternions to (N,3,3) rotations. No normalization."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    R = np.empty((q.shape[0], 3, 3), dtype=q.dtype)
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def quat_multiply(a, b):
    """Hamilton product a*b; accepts (4,) or broadcastable (N,4) arrays."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def quat_left_matrix(q):
    """4x4 matrix L with L @ p == quat_multiply(q, p)."""
    w, x, y, z = np.asarray(q, dtype=np.float64)
    return np.array([
        [w, -x, -y, -z],
        [x, w, -z, y],
        [y, z, w, -x],
        [z, -y, x, w],
    ])


def quat_from_axis_angle(axis, angle):
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    half = 0.5 * angle
    return np.concatenate([[np.cos(half)], np.sin(half) * axis])


@dataclass
class RigidPose:
    """Rigid transform: rotate by unit quaternion `q` then translate by `t`."""

    q: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        self.q = quat_normalize(np.asarray(self.q, dtype=np.float64))
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)

    @staticmethod
    def identity():
        return RigidPose(np.array([1.0, 0, 0, 0]), np.zeros(3))

    def rotation(self):
        return quat_to_rotation(self.q)

    def apply_points(self, pts):
        return np.asarray(pts) @ self.rotation().T + self.t

    def compose(self, other: "RigidPose") -> "RigidPose":
        """self ∘ other: apply `other` first, then `self`."""
        return RigidPose(quat_multiply(self.q, other.q),
                         self.rotation() @ other.t + self.t)

    def inverse(self) -> "RigidPose":
        qinv = self.q * np.array([1.0, -1, -1, -1])
        return RigidPose(qinv, -(quat_to_rotation(qinv) @ self.t))

    def is_identity(self, tol=0.0):
        return (abs(abs(self.q[0]) - 1.0) <= tol and np.all(np.abs(self.q[1:]) <= tol)
                and np.all(np.abs(self.t) <= tol))


def encode_pose(pose: RigidPose):
    """Flattened rotation + translation (12 values) for MLP conditioning."""
    return np.concatenate([pose.rotation().ravel(), pose.t])


def apply_rigid(pose: RigidPose, points, quats=None):
    """Transform points (and optionally per-point quaternions) by `pose`.

    Differentiable in `points`/`quats`; the pose itself is a constant.
    Quaternions are left-multiplied by the pose rotation; non-directional
    attributes are untouched by design.
    """
    R = pose.rotation()
    pts = T.add(T.matmul(points, T.Tensor(R.T, dtype=points.dtype)),
                T.Tensor(pose.t, dtype=points.dtype))
    if quats is None:
        return pts
    L = quat_left_matrix(pose.q)
    qs = T.matmul(quats, T.Tensor(L.T, dtype=quats.dtype))
    return pts, qs


@dataclass
class Camera:
    """Pinhole camera; `pose` maps world to camera coordinates."""

    fx: float
    fy: float
    cx: float
    cy: float
    pose: RigidPose
    width: int
    height: int
    cam_id: str = "cam"

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")

    def scaled(self, factor: float) -> "Camera":
        """Same view at `factor` times the resolution."""
        return replace(self, fx=self.fx * factor, fy=self.fy * factor,
                       cx=(self.cx + 0.5) * factor - 0.5,
                       cy=(self.cy + 0.5) * factor - 0.5,
                       width=int(round(self.width * factor)),
                       height=int(round(self.height * factor)))

    def world_to_camera(self, pts):
        return self.pose.apply_points(pts)

    def project_points(self, pts):
        """World points -> (u, v, z). No culling; z may be <= 0."""
        xc = self.world_to_camera(pts)
        z = xc[..., 2]
        u = self.fx * xc[..., 0] / z + self.cx
        v = self.fy * xc[..., 1] / z + self.cy
        return u, v, z


def project_gaussian(camera: Camera, mean, cov3d):
    """EWA projection of one Gaussian.

    Returns (mean2d, cov2d, depth, valid); `valid` is False for points at
    or behind the near plane (culled, not an error). cov2d includes the
    +0.3 px^2 diagonal floor.
    """
    xc = camera.world_to_camera(np.asarray(mean, dtype=np.float64).reshape(1, 3))[0]
    X, Y, Z = xc
    if Z <= ZNEAR:
        return np.zeros(2), np.eye(2) * COV2D_FLOOR, Z, False
    u = camera.fx * X / Z + camera.cx
    v = camera.fy * Y / Z + camera.cy
    J = np.array([
        [camera.fx / Z, 0.0, -camera.fx * X / (Z * Z)],
        [0.0, camera.fy / Z, -camera.fy * Y / (Z * Z)],
    ])
    M = J @ camera.pose.rotation()
    cov2d = M @ np.asarray(cov3d, dtype=np.float64) @ M.T + COV2D_FLOOR * np.eye(2)
    return np.array([u, v]), cov2d, Z, True


# ---------------------------------------------------------------- file IO
# One camera per line, whitespace-separated decimal text:
#   id fx fy cx cy qw qx qy qz tx ty tz width height


def save_cameras(path, cameras):
    with open(path, "w") as f:
        f.write("# id fx fy cx cy qw qx qy qz tx ty tz width height\n")
        for c in cameras:
            vals = [c.fx, c.fy, c.cx, c.cy, *c.pose.q, *c.pose.t]
            text = " ".join(repr(float(v)) for v in vals)
            f.write(f"{c.cam_id} {text} {c.width} {c.height}\n")


def load_cameras(path):
    cams = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 14:
                raise ValueError(f"malformed camera record: {line!r}")
            vals = [float(x) for x in parts[1:12]]
            cams.append(Camera(
                fx=vals[0], fy=vals[1], cx=vals[2], cy=vals[3],
                pose=RigidPose(np.array(vals[4:8]), np.array(vals[8:11])),
                width=int(parts[12]), height=int(parts[13]), cam_id=parts[0]))
    return cams
