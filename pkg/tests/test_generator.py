import numpy as np
import pytest

from headsplat import generator as G
from headsplat import tensor as T
from headsplat.cameras import Camera, RigidPose, quat_from_axis_angle
from headsplat.config import ModelConfig
from headsplat.gaussians import HAIR, HEAD, NeutralGaussianModel
from headsplat.renderer import rasterize


def small_cfg(**kw):
    args = dict(expression_dim=4, feature_dim=12, channels=8, deform_hidden=16,
                deform_layers=2, color_hidden=16, color_layers=2, attr_hidden=16,
                attr_layers=2, hair_hidden=16, hair_layers=2)
    args.update(kw)
    return ModelConfig(**args)


def small_model(n_head=6, n_hair=3, feat=12, seed=0):
    rng = np.random.default_rng(seed)
    n = n_head + n_hair
    return NeutralGaussianModel(
        X0=T.Tensor(rng.uniform(-0.4, 0.4, (n, 3)), requires_grad=True),
        F0=T.Tensor(rng.standard_normal((n, feat)) * 0.3, requires_grad=True),
        Q0=T.Tensor(np.tile([1.0, 0, 0, 0], (n, 1)) + 0.1 * rng.standard_normal((n, 4)),
                    requires_grad=True),
        S0=T.Tensor(rng.uniform(-3.5, -2.5, (n, 3)), requires_grad=True),
        A0=T.Tensor(rng.uniform(-1, 1, (n, 1)), requires_grad=True),
        label=np.array([HEAD] * n_head + [HAIR] * n_hair),
        P0=rng.uniform(-0.2, 0.2, (68, 3)),
        P1=rng.uniform(-0.2, 0.2, (10, 3)),
    )


def drive(rng=None, e=4, pose=None):
    theta = np.zeros(e) if rng is None else rng.standard_normal(e) * 0.5
    return G.DriveFrame(theta=theta, pose=pose or RigidPose.identity(), t=0)


def test_blend_config_validation():
    with pytest.raises(ValueError):
        G.BlendConfig(t1=0.3, t2=0.2)
    with pytest.raises(ValueError):
        G.BlendConfig(t3=-0.1)


def test_blend_weights_paper_thresholds():
    cfg = G.BlendConfig()
    p0 = np.zeros((1, 3))
    x = np.array([[0.10, 0, 0], [0.20, 0, 0], [0.05, 0, 0], [0.30, 0, 0]])
    labels = np.array([HEAD, HEAD, HAIR, HEAD])
    lam_exp, lam_pose = G.blend_weights(x, p0, labels, cfg)
    np.testing.assert_allclose(lam_exp, [1.0, 0.5, 0.0, 0.0])
    np.testing.assert_allclose(lam_exp + lam_pose, 1.0)


def test_blend_weights_empty_landmarks_rejected():
    with pytest.raises(ValueError):
        G.blend_weights(np.zeros((2, 3)), np.zeros((0, 3)), np.zeros(2), G.BlendConfig())


def test_zero_init_is_identity_deformation():
    cfg = small_cfg()
    model = small_model()
    nets = G.GeneratorNets(cfg, np.random.default_rng(1))
    lam_e, lam_p = G.blend_weights(model.X0.data, model.P0, model.label, G.BlendConfig())
    out = G.deform(nets, model.X0, np.ones(4), RigidPose.identity(), lam_e, lam_p)
    np.testing.assert_array_equal(out.data, model.X0.data)


def test_expression_branch_masks_pose():
    # a lambda_exp = 1 point must be unaffected by the pose condition
    cfg = small_cfg()
    rng = np.random.default_rng(2)
    model = small_model()
    nets = G.GeneratorNets(cfg, rng)
    for net in nets.all_nets():  # randomize final layers so outputs are nonzero
        net.weights[-1].data[:] = rng.standard_normal(net.weights[-1].shape) * 0.1

    lam_exp = np.ones(model.num_points)
    lam_pose = np.zeros(model.num_points)
    theta = rng.standard_normal(4)
    p1 = RigidPose(quat_from_axis_angle([0, 1, 0], 0.5), np.array([0.1, 0, 0]))
    with T.no_grad():
        a = G.deform(nets, model.X0, theta, RigidPose.identity(), lam_exp, lam_pose)
        b = G.deform(nets, model.X0, theta, p1, lam_exp, lam_pose)
    np.testing.assert_array_equal(a.data, b.data)


def test_color_is_sum_of_branches():
    cfg = small_cfg()
    rng = np.random.default_rng(3)
    model = small_model()
    nets = G.GeneratorNets(cfg, rng)
    theta = rng.standard_normal(4)
    pose = RigidPose(quat_from_axis_angle([1, 0, 0], 0.2), np.zeros(3))
    lam_e, lam_p = G.blend_weights(model.X0.data, model.P0, model.label, G.BlendConfig())

    with T.no_grad():
        out = G.color(nets, model.F0, theta, pose, lam_e, lam_p)
        ce = G.color(nets, model.F0, theta, pose, np.ones(model.num_points),
                     np.zeros(model.num_points))
        cp = G.color(nets, model.F0, theta, pose, np.zeros(model.num_points),
                     np.ones(model.num_points))
    recombined = lam_e[:, None] * ce.data + lam_p[:, None] * cp.data
    np.testing.assert_allclose(out.data, recombined, atol=1e-12)


def test_zero_color_nets_give_zero_color():
    cfg = small_cfg()
    nets = G.GeneratorNets(cfg, np.random.default_rng(4))
    nets.f_col_exp.zero_()
    nets.f_col_pose.zero_()
    model = small_model()
    lam_e, lam_p = G.blend_weights(model.X0.data, model.P0, model.label, G.BlendConfig())
    with T.no_grad():
        out = G.color(nets, model.F0, np.ones(4), RigidPose.identity(), lam_e, lam_p)
    np.testing.assert_array_equal(out.data, 0.0)


def test_attribute_shift_zero_init_and_positive_scale():
    cfg = small_cfg()
    rng = np.random.default_rng(5)
    model = small_model()
    nets = G.GeneratorNets(cfg, rng)
    bc = G.BlendConfig()
    frame, _ = G.canonical_frame(model, nets, drive(e=4), bc)
    np.testing.assert_allclose(frame.S.data, np.exp(model.S0.data), atol=1e-15)
    np.testing.assert_allclose(
        frame.A.data, 1 / (1 + np.exp(-model.A0.data)), atol=1e-15)

    # random attribute nets: scale stays positive for any shift
    for net in (nets.f_att_exp, nets.f_att_pose):
        net.weights[-1].data[:] = rng.standard_normal(net.weights[-1].shape) * 3.0
    frame, _ = G.canonical_frame(model, nets, drive(rng, 4), bc)
    assert (frame.S.data > 0).all()
    assert ((frame.A.data > 0) & (frame.A.data < 1)).all()
    norms = np.linalg.norm(frame.Q.data, axis=1)
    np.testing.assert_allclose(norms, 1.0, atol=1e-12)


def test_deform_gradient_matches_fd():
    cfg = small_cfg()
    rng = np.random.default_rng(6)
    model = small_model(n_head=10, n_hair=0)
    nets = G.GeneratorNets(cfg, rng)
    for net in (nets.f_def_exp, nets.f_def_pose):
        net.weights[-1].data[:] = rng.standard_normal(net.weights[-1].shape) * 0.1
    theta = rng.standard_normal(4)
    pose = RigidPose(quat_from_axis_angle([0, 0, 1], 0.3), np.array([0, 0.1, 0]))
    lam_e = rng.uniform(0, 1, 10)
    lam_p = 1 - lam_e
    w = rng.standard_normal((10, 3))

    params = [model.X0.data.copy()] + [p.data.copy() for p in nets.f_def_exp.parameters()]

    def build(vals):
        x0 = vals[0]
        for p, v in zip(nets.f_def_exp.parameters(), vals[1:]):
            p.data = v
        out = G.deform(nets, x0 if isinstance(x0, T.Tensor) else T.Tensor(x0),
                       theta, pose, lam_e, lam_p)
        return T.sum_(T.mul(out, w))

    x0_t = T.Tensor(params[0], requires_grad=True)
    loss = build([x0_t] + params[1:])
    T.backward(loss)
    ga = x0_t.grad.copy()

    h = 1e-5
    gn = np.zeros_like(params[0])
    for i in range(params[0].size):
        pert = params[0].copy().ravel()
        pert[i] += h
        with T.no_grad():
            fp = build([pert.reshape(-1, 3)] + params[1:]).item()
        pert[i] -= 2 * h
        with T.no_grad():
            fm = build([pert.reshape(-1, 3)] + params[1:]).item()
        gn.ravel()[i] = (fp - fm) / (2 * h)
    err = np.abs(ga - gn).max() / max(np.abs(gn).max(), 1e-8)
    assert err < 1e-5, err


def test_assemble_world_identity_and_translation():
    cfg = small_cfg()
    model = small_model()
    nets = G.GeneratorNets(cfg, np.random.default_rng(7))
    frame, _ = G.canonical_frame(model, nets, drive(e=4), G.BlendConfig())

    world = G.assemble_world(frame, RigidPose.identity())
    np.testing.assert_allclose(world.X.data, frame.X.data, atol=1e-15)
    np.testing.assert_allclose(world.Q.data, frame.Q.data, atol=1e-15)

    t_only = RigidPose(np.array([1.0, 0, 0, 0]), np.array([0.2, -0.1, 0.4]))
    world2 = G.assemble_world(frame, t_only)
    assert world2.C.data is frame.C.data or np.array_equal(world2.C.data, frame.C.data)
    np.testing.assert_allclose(world2.X.data, frame.X.data + t_only.t, atol=1e-15)

    with pytest.raises(ValueError):
        G.assemble_world(world2, t_only)


def test_render_equivariance_under_rigid_motion():
    # moving the scene by beta and the camera by the same beta leaves pixels fixed
    cfg = small_cfg(channels=3)
    model = small_model(n_head=8, n_hair=0, seed=8)
    rng = np.random.default_rng(8)
    nets = G.GeneratorNets(cfg, rng)
    for net in nets.all_nets():
        net.weights[-1].data[:] = rng.standard_normal(net.weights[-1].shape) * 0.05
    dr = drive(rng, 4)
    frame, _ = G.canonical_frame(model, nets, dr, G.BlendConfig())

    beta = RigidPose(quat_from_axis_angle([0.3, 1, 0.2], 0.7), np.array([0.1, -0.05, 0.2]))
    cam = Camera(fx=60.0, fy=60.0, cx=11.5, cy=11.5,
                 pose=RigidPose(np.array([1.0, 0, 0, 0]), np.array([0, 0, 2.0])),
                 width=24, height=24)

    with T.no_grad():
        img_a = rasterize(G.assemble_world(frame, RigidPose.identity()), cam).image.data
        # camera that follows the rigid motion: world2cam' = world2cam o beta^-1
        cam_b = Camera(fx=cam.fx, fy=cam.fy, cx=cam.cx, cy=cam.cy,
                       pose=cam.pose.compose(beta.inverse()), width=24, height=24)
        frame2, _ = G.canonical_frame(model, nets, dr, G.BlendConfig())
        img_b = rasterize(G.assemble_world(frame2, beta), cam_b).image.data
    assert np.abs(img_a - img_b).max() < 1e-8


def test_canonical_frame_invariants():
    # lambda partition is exact; zero-initialized nets render neutral geometry
    cfg = small_cfg()
    model = small_model()
    lam_e, lam_p = G.blend_weights(model.X0.data, model.P0, model.label, G.BlendConfig())
    np.testing.assert_array_equal(lam_e + lam_p, np.ones(model.num_points))

    nets = G.GeneratorNets(cfg, np.random.default_rng(9))
    rng = np.random.default_rng(10)
    for theta in (np.zeros(4), rng.standard_normal(4)):
        frame, _ = G.canonical_frame(
            model, nets, G.DriveFrame(theta=theta, pose=RigidPose.identity(), t=0),
            G.BlendConfig())
        np.testing.assert_array_equal(frame.X.data, model.X0.data)
