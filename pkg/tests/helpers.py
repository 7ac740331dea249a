"""Shared test utilities: central finite differences against the tape."""

import numpy as np

from headsplat import tensor as T


def numeric_grad(f, x, h=1e-5):
    """Central finite-difference gradient of scalar f w.r.t. ndarray x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.ravel()
    gflat = g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def rel_err(a, b):
    """Max-norm relative error with a small absolute floor."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-8)
    return np.abs(a - b).max(initial=0.0) / denom


def check_grad(build_loss, params, h=1e-5, tol=1e-5):
    """FD-check the tape gradient of `build_loss(tensors) -> scalar Tensor`.

    `params` is a list of ndarrays; returns the worst relative error over
    all of them. `build_loss` must be a pure function of the tensor values.
    """
    tensors = [T.Tensor(p.copy(), requires_grad=True) for p in params]
    loss = build_loss(tensors)
    T.backward(loss)
    worst = 0.0
    for k, (p, t) in enumerate(zip(params, tensors)):
        def f(x, k=k):
            vals = [q.copy() for q in params]
            vals[k] = x
            with T.no_grad():
                vt = [T.Tensor(v) for v in vals]
                out = build_loss(vt)
            return out.item()

        gn = numeric_grad(f, p, h=h)
        ga = t.grad if t.grad is not None else np.zeros_like(p)
        err = rel_err(ga, gn)
        worst = max(worst, err)
        assert err <= tol, f"param {k}: analytic/FD mismatch rel={err:.3e} (tol {tol})"
    return worst
