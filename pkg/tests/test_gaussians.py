import numpy as np
import pytest

from headsplat import gaussians as G
from headsplat import tensor as T
from headsplat.cameras import quat_normalize


def tiny_model(n_head=3, n_hair=2, feat=8):
    n = n_head + n_hair
    rng = np.random.default_rng(0)
    return G.NeutralGaussianModel(
        X0=T.Tensor(rng.standard_normal((n, 3)), requires_grad=True),
        F0=T.Tensor(rng.standard_normal((n, feat)), requires_grad=True),
        Q0=T.Tensor(np.tile([1.0, 0, 0, 0], (n, 1)), requires_grad=True),
        S0=T.Tensor(np.zeros((n, 3)), requires_grad=True),
        A0=T.Tensor(np.zeros((n, 1)), requires_grad=True),
        label=np.array([G.HEAD] * n_head + [G.HAIR] * n_hair),
        P0=rng.standard_normal((68, 3)),
        P1=rng.standard_normal((10, 3)),
    )


def test_activation_values():
    m = tiny_model()
    _, q, s, a = G.activate(m)
    np.testing.assert_allclose(s.data, 1.0)          # exp(0)
    np.testing.assert_allclose(a.data, 0.5)          # sigmoid(0)

    m.Q0.data[0] = [2.0, 0, 0, 0]
    _, q, _, _ = G.activate(m)
    np.testing.assert_allclose(q.data[0], [1.0, 0, 0, 0])


def test_activation_is_differentiable():
    m = tiny_model()
    _, q, s, a = G.activate(m)
    loss = T.sum_(s) + T.sum_(a) + T.sum_(q)
    T.backward(loss)
    assert m.S0.grad is not None and m.A0.grad is not None and m.Q0.grad is not None


def test_covariance_identity_cases():
    np.testing.assert_allclose(G.covariance3d([1, 0, 0, 0], [1, 1, 1]), np.eye(3))
    np.testing.assert_allclose(G.covariance3d([1, 0, 0, 0], [2, 1, 1]),
                               np.diag([4.0, 1.0, 1.0]))


def test_covariance_eigenvalues_match_scales():
    rng = np.random.default_rng(1)
    for _ in range(10):
        q = quat_normalize(rng.standard_normal(4))
        s = rng.uniform(0.3, 2.0, 3)
        cov = G.covariance3d(q, s)
        ev = np.sort(np.linalg.eigvalsh(cov))
        np.testing.assert_allclose(ev, np.sort(s**2), atol=1e-10)


def test_covariance_batch_matches_single():
    rng = np.random.default_rng(2)
    q = quat_normalize(rng.standard_normal((6, 4)))
    s = rng.uniform(0.3, 2.0, (6, 3))
    batch = G.covariance3d_batch(q, s)
    for i in range(6):
        np.testing.assert_allclose(batch[i], G.covariance3d(q[i], s[i]), atol=1e-13)


def test_hair_block_must_be_contiguous():
    m = tiny_model()
    assert m.hair_index == 3
    m.label = np.array([G.HEAD, G.HAIR, G.HEAD, G.HAIR, G.HAIR])
    with pytest.raises(ValueError):
        _ = m.hair_index


def test_frame_tag_validated():
    with pytest.raises(ValueError):
        G.FrameGaussians(X=T.Tensor(np.zeros((1, 3))), C=T.Tensor(np.zeros((1, 3))),
                         Q=T.Tensor(np.zeros((1, 4))), S=T.Tensor(np.ones((1, 3))),
                         A=T.Tensor(np.ones((1, 1))), frame="screen")
