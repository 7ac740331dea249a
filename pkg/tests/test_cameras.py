import numpy as np
import pytest

from headsplat import cameras as C
from headsplat import tensor as T


def make_camera(**kw):
    args = dict(fx=100.0, fy=100.0, cx=16.0, cy=16.0,
                pose=C.RigidPose.identity(), width=33, height=33)
    args.update(kw)
    return C.Camera(**args)


def test_quat_identity():
    np.testing.assert_array_equal(C.quat_to_rotation([1, 0, 0, 0]), np.eye(3))


def test_quat_90deg_z():
    q = [np.cos(np.pi / 4), 0, 0, np.sin(np.pi / 4)]
    R = C.quat_to_rotation(q)
    np.testing.assert_allclose(R @ [1, 0, 0], [0, 1, 0], atol=1e-12)


def test_quat_orthonormal_random():
    rng = np.random.default_rng(0)
    for _ in range(20):
        q = rng.standard_normal(4)
        R = C.quat_to_rotation(q)
        np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-12)
        assert np.linalg.det(R) > 0


def test_quat_zero_rejected():
    with pytest.raises(ValueError):
        C.quat_to_rotation([0, 0, 0, 0])


def test_batched_rotations_match_single():
    rng = np.random.default_rng(1)
    q = C.quat_normalize(rng.standard_normal((5, 4)))
    R = C.quats_to_rotations(q)
    for i in range(5):
        np.testing.assert_allclose(R[i], C.quat_to_rotation(q[i]), atol=1e-14)


def test_apply_rigid_identity_and_translation():
    rng = np.random.default_rng(2)
    pts = T.Tensor(rng.standard_normal((6, 3)))
    qs = T.Tensor(C.quat_normalize(rng.standard_normal((6, 4))))

    p2, q2 = C.apply_rigid(C.RigidPose.identity(), pts, qs)
    np.testing.assert_allclose(p2.data, pts.data, atol=1e-15)
    np.testing.assert_allclose(q2.data, qs.data, atol=1e-15)

    t = np.array([0.3, -0.1, 2.0])
    p3, q3 = C.apply_rigid(C.RigidPose(np.array([1.0, 0, 0, 0]), t), pts, qs)
    np.testing.assert_allclose(p3.data, pts.data + t, atol=1e-15)
    np.testing.assert_array_equal(q3.data, qs.data)


def test_apply_rigid_composition():
    rng = np.random.default_rng(3)
    b1 = C.RigidPose(rng.standard_normal(4), rng.standard_normal(3))
    b2 = C.RigidPose(rng.standard_normal(4), rng.standard_normal(3))
    pts = T.Tensor(rng.standard_normal((5, 3)))
    qs = T.Tensor(C.quat_normalize(rng.standard_normal((5, 4))))

    pa, qa = C.apply_rigid(b1, pts, qs)
    pa, qa = C.apply_rigid(b2, pa, qa)
    pb, qb = C.apply_rigid(b2.compose(b1), pts, qs)
    np.testing.assert_allclose(pa.data, pb.data, atol=1e-10)
    np.testing.assert_allclose(qa.data, qb.data, atol=1e-10)


def test_rigid_preserves_distances():
    rng = np.random.default_rng(4)
    pose = C.RigidPose(rng.standard_normal(4), rng.standard_normal(3))
    pts = rng.standard_normal((10, 3))
    out = pose.apply_points(pts)
    d0 = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
    d1 = np.linalg.norm(out[:, None] - out[None], axis=-1)
    np.testing.assert_allclose(d0, d1, atol=1e-10)


def test_pose_inverse():
    rng = np.random.default_rng(5)
    pose = C.RigidPose(rng.standard_normal(4), rng.standard_normal(3))
    pts = rng.standard_normal((4, 3))
    back = pose.inverse().apply_points(pose.apply_points(pts))
    np.testing.assert_allclose(back, pts, atol=1e-12)


def test_projection_on_axis():
    cam = make_camera()
    mean2d, cov2d, z, ok = C.project_gaussian(cam, [0, 0, 1.0], np.eye(3) * 1e-4)
    assert ok
    np.testing.assert_allclose(mean2d, [16.0, 16.0])
    assert z == 1.0


def test_projection_isotropic_closed_form():
    # isotropic sigma^2 I at z=2 on axis: cov2d ~ (fx*sigma/2)^2 I before floor
    sigma = 0.03
    cam = make_camera()
    _, cov2d, _, ok = C.project_gaussian(cam, [0, 0, 2.0], np.eye(3) * sigma**2)
    assert ok
    expect = (cam.fx * sigma / 2.0) ** 2
    np.testing.assert_allclose(cov2d - np.eye(2) * C.COV2D_FLOOR,
                               np.eye(2) * expect, atol=1e-12)


def test_projection_depth_scaling():
    sigma = 0.05
    cam = make_camera()
    _, c1, _, _ = C.project_gaussian(cam, [0, 0, 1.0], np.eye(3) * sigma**2)
    _, c2, _, _ = C.project_gaussian(cam, [0, 0, 2.0], np.eye(3) * sigma**2)
    s1 = np.sqrt(c1[0, 0] - C.COV2D_FLOOR)
    s2 = np.sqrt(c2[0, 0] - C.COV2D_FLOOR)
    np.testing.assert_allclose(s1 / s2, 2.0, rtol=1e-12)


def test_projection_culls_behind_camera():
    cam = make_camera()
    *_, ok = C.project_gaussian(cam, [0, 0, -1.0], np.eye(3))
    assert not ok


def test_depth_ordering_matches_z():
    cam = make_camera()
    _, _, z1, _ = C.project_gaussian(cam, [0, 0, 1.0], np.eye(3) * 1e-4)
    _, _, z2, _ = C.project_gaussian(cam, [0, 0, 3.0], np.eye(3) * 1e-4)
    assert z1 < z2


def test_quaternion_double_cover_covariance():
    from headsplat.gaussians import covariance3d
    rng = np.random.default_rng(6)
    q = C.quat_normalize(rng.standard_normal(4))
    s = rng.uniform(0.5, 2.0, 3)
    np.testing.assert_allclose(covariance3d(q, s), covariance3d(-q, s), atol=1e-14)


def test_camera_file_roundtrip(tmp_path):
    rng = np.random.default_rng(7)
    cams = [make_camera(cam_id=f"cam{i}",
                        pose=C.RigidPose(rng.standard_normal(4), rng.standard_normal(3)),
                        fx=90.0 + i, cy=15.5)
            for i in range(3)]
    path = tmp_path / "cameras.txt"
    C.save_cameras(path, cams)
    loaded = C.load_cameras(path)
    assert len(loaded) == 3
    for a, b in zip(cams, loaded):
        assert a.cam_id == b.cam_id and a.width == b.width
        np.testing.assert_array_equal(a.pose.q, b.pose.q)
        np.testing.assert_array_equal(a.pose.t, b.pose.t)
        assert (a.fx, a.fy, a.cx, a.cy) == (b.fx, b.fy, b.cx, b.cy)


def test_scaled_camera_consistent_projection():
    cam = make_camera(cx=15.5, cy=15.5, width=32, height=32)
    half = cam.scaled(0.5)
    u, v, _ = cam.project_points(np.array([[0.1, -0.05, 1.5]]))
    u2, v2, _ = half.project_points(np.array([[0.1, -0.05, 1.5]]))
    # pixel-center mapping: x_half = (x + 0.5)/2 - 0.5
    np.testing.assert_allclose(u2, (u + 0.5) / 2 - 0.5, atol=1e-12)
    np.testing.assert_allclose(v2, (v + 0.5) / 2 - 0.5, atol=1e-12)
