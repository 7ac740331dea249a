"""Differentiable multi-channel Gaussian rasterization.

Forward: EWA projection, global depth sort (stable, index tie-break),
16x16 tile binning at the 3-sigma footprint, front-to-back alpha
compositing with early termination once transmittance drops below 1e-4.
Backward: analytic gradients to positions, colors, quaternions, scales
and opacities, including the dependence of the perspective Jacobian on
the mean. `render_naive` is the in-repo per-pixel oracle; both paths
apply identical contribution rules so they agree to float precision.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .cameras import COV2D_FLOOR, ZNEAR, Camera, quats_to_rotations
from .gaussians import FrameGaussians, HAIR, HEAD, covariance3d_batch

TILE = 16
CUTOFF_SIGMA2 = 9.0          # 3-sigma ellipse
ALPHA_MIN = 1.0 / 255.0
TRANSMITTANCE_MIN = 1e-4
DEPTH_EPS = 1e-12

LABEL_COLORS = {HEAD: (1.0, 0.0, 0.0), HAIR: (0.0, 1.0, 0.0)}


@dataclass
class RenderOutput:
    image: T.Tensor            # (H,W,C) feature image; channels 0:3 are RGB
    alpha: T.Tensor            # (H,W)
    depth: T.Tensor            # (H,W) alpha-weighted expected depth (0 where empty)
    label: T.Tensor = None     # (H,W,3) set by rasterize_labels


def _check_finite(name, arr):
    bad = ~np.isfinite(arr)
    if bad.any():
        idx = int(np.argwhere(bad.any(axis=tuple(range(1, arr.ndim))) if arr.ndim > 1 else bad)[0][0])
        raise FloatingPointError(f"non-finite {name} at point index {idx}")


def _project(x, q, s, camera):
    """Batched projection of activated gaussians; returns dict of arrays."""
    R = camera.pose.rotation().astype(x.dtype)
    t = camera.pose.t.astype(x.dtype)
    xc = x @ R.T + t
    z = xc[:, 2]
    valid = z > ZNEAR

    zs = np.where(valid, z, 1.0)
    u = camera.fx * xc[:, 0] / zs + camera.cx
    v = camera.fy * xc[:, 1] / zs + camera.cy

    Rq = quats_to_rotations(q)
    sigma = covariance3d_batch(q, s)

    n = x.shape[0]
    J = np.zeros((n, 2, 3), dtype=x.dtype)
    J[:, 0, 0] = camera.fx / zs
    J[:, 0, 2] = -camera.fx * xc[:, 0] / (zs * zs)
    J[:, 1, 1] = camera.fy / zs
    J[:, 1, 2] = -camera.fy * xc[:, 1] / (zs * zs)
    M = J @ R
    cov2d = M @ sigma @ np.swapaxes(M, 1, 2)
    cov2d[:, 0, 0] += COV2D_FLOOR
    cov2d[:, 1, 1] += COV2D_FLOOR

    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] ** 2
    inv = np.empty_like(cov2d)
    inv[:, 0, 0] = cov2d[:, 1, 1] / det
    inv[:, 1, 1] = cov2d[:, 0, 0] / det
    inv[:, 0, 1] = inv[:, 1, 0] = -cov2d[:, 0, 1] / det

    mid = 0.5 * (cov2d[:, 0, 0] + cov2d[:, 1, 1])
    lam_max = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    radius = 3.0 * np.sqrt(lam_max)

    return dict(R=R, xc=xc, z=z, u=u, v=v, Rq=Rq, sigma=sigma, J=J, M=M,
                cov2d=cov2d, inv=inv, radius=radius, valid=valid)


def _alpha_at(opacity, inv, du, dv):
    """Contribution rule shared by the tile path and the naive oracle."""
    qpow = inv[0, 0] * du * du + 2.0 * inv[0, 1] * du * dv + inv[1, 1] * dv * dv
    if qpow > CUTOFF_SIGMA2:
        return 0.0
    a = opacity * np.exp(-0.5 * qpow)
    return a if a >= ALPHA_MIN else 0.0


def _tile_bins(u, v, radius, valid, width, height):
    """Per-tile candidate lists; gaussians appear in depth-sorted order."""
    tx_n = (width + TILE - 1) // TILE
    ty_n = (height + TILE - 1) // TILE
    ids = np.flatnonzero(valid)
    if ids.size == 0:
        return tx_n, ty_n, {}

    x0 = np.clip(((u[ids] - radius[ids]) // TILE).astype(np.int64), 0, tx_n - 1)
    x1 = np.clip(((u[ids] + radius[ids]) // TILE).astype(np.int64), 0, tx_n - 1)
    y0 = np.clip(((v[ids] - radius[ids]) // TILE).astype(np.int64), 0, ty_n - 1)
    y1 = np.clip(((v[ids] + radius[ids]) // TILE).astype(np.int64), 0, ty_n - 1)
    # drop gaussians whose footprint misses the image entirely
    on = (u[ids] + radius[ids] >= 0) & (u[ids] - radius[ids] < width) & \
         (v[ids] + radius[ids] >= 0) & (v[ids] - radius[ids] < height)
    ids, x0, x1, y0, y1 = ids[on], x0[on], x1[on], y0[on], y1[on]
    if ids.size == 0:
        return tx_n, ty_n, {}

    ntx = x1 - x0 + 1
    nty = y1 - y0 + 1
    counts = ntx * nty
    total = int(counts.sum())
    rep = np.repeat(np.arange(ids.size), counts)
    start = np.cumsum(counts) - counts
    pos = np.arange(total) - start[rep]
    tx = x0[rep] + pos % ntx[rep]
    ty = y0[rep] + pos // ntx[rep]
    tile_id = ty * tx_n + tx
    gauss = ids[rep]

    order = np.lexsort((gauss, tile_id))   # gauss ids are already depth-ranked
    tile_id = tile_id[order]
    gauss = gauss[order]
    bins = {}
    bounds = np.flatnonzero(np.diff(tile_id)) + 1
    for chunk, tid in zip(np.split(gauss, bounds), tile_id[np.concatenate([[0], bounds])]):
        bins[int(tid)] = chunk
    return tx_n, ty_n, bins


def _forward(x, c, q, s, a, camera):
    """Tile rasterization. Returns (packed HxWx(C+2), cache)."""
    h, w = camera.height, camera.width
    nch = c.shape[1]
    img = np.zeros((h, w, nch), dtype=x.dtype)
    alpha_map = np.zeros((h, w), dtype=x.dtype)
    dsum = np.zeros((h, w), dtype=x.dtype)

    n = x.shape[0]
    cache = dict(camera=camera, nch=nch, n=n, tiles=[])
    if n == 0:
        packed = np.concatenate([img, alpha_map[..., None], dsum[..., None]], axis=2)
        return packed, cache

    # stable global depth sort with index tie-break, applied via rank relabeling
    proj = _project(x, q, s, camera)
    order = np.lexsort((np.arange(n), proj["z"]))
    rank = np.empty(n, dtype=np.int64)
    rank[order] = np.arange(n)

    tx_n, ty_n, bins = _tile_bins(
        proj["u"], proj["v"], proj["radius"], proj["valid"], w, h)
    cache.update(proj=proj, order=order, x=x, c=c, q=q, s=s, a=a)

    inv, u, v, z = proj["inv"], proj["u"], proj["v"], proj["z"]
    a1 = a[:, 0]
    for tid, chunk in bins.items():
        # chunk holds original indices; sort by depth rank for compositing
        ids = chunk[np.argsort(rank[chunk], kind="stable")]
        ty, tx = divmod(tid, tx_n)
        px0, py0 = tx * TILE, ty * TILE
        px = np.arange(px0, min(px0 + TILE, w))
        py = np.arange(py0, min(py0 + TILE, h))
        pxg, pyg = np.meshgrid(px, py, indexing="xy")
        pxf = pxg.ravel().astype(x.dtype)
        pyf = pyg.ravel().astype(x.dtype)

        du = pxf[None, :] - u[ids, None]
        dv = pyf[None, :] - v[ids, None]
        ia = inv[ids, 0, 0][:, None]
        ib = inv[ids, 0, 1][:, None]
        ic = inv[ids, 1, 1][:, None]
        qpow = ia * du * du + 2.0 * ib * du * dv + ic * dv * dv
        alpha = a1[ids, None] * np.exp(-0.5 * qpow)
        alpha[(qpow > CUTOFF_SIGMA2) | (alpha < ALPHA_MIN)] = 0.0

        t_after = np.cumprod(1.0 - alpha, axis=0)
        included = t_after >= TRANSMITTANCE_MIN
        t_before = np.empty_like(t_after)
        t_before[0] = 1.0
        t_before[1:] = t_after[:-1]
        wgt = alpha * t_before * included

        t_final = np.where(included, t_after, 1.0).min(axis=0, initial=1.0)
        rows = pyg.ravel()
        cols = pxg.ravel()
        img[rows, cols] += np.einsum("gp,gc->pc", wgt, c[ids])
        alpha_map[rows, cols] += 1.0 - t_final
        dsum[rows, cols] += wgt.T @ z[ids]
        cache["tiles"].append((ids, pxf, pyf, rows, cols, alpha, t_before,
                               included, t_final, du, dv))

    depth = dsum / (alpha_map + DEPTH_EPS)
    cache.update(alpha_map=alpha_map, dsum=dsum)
    packed = np.concatenate([img, alpha_map[..., None], depth[..., None]], axis=2)
    return packed, cache


def _backward(cache, gpacked):
    nch, n = cache["nch"], cache["n"]
    gx = np.zeros((n, 3), dtype=gpacked.dtype)
    gc = np.zeros((n, nch), dtype=gpacked.dtype)
    gq = np.zeros((n, 4), dtype=gpacked.dtype)
    gs = np.zeros((n, 3), dtype=gpacked.dtype)
    ga = np.zeros((n, 1), dtype=gpacked.dtype)
    if n == 0 or not cache["tiles"]:
        return gx, gc, gq, gs, ga

    gI = gpacked[:, :, :nch]
    gA_img = gpacked[:, :, nch].copy()
    gD = gpacked[:, :, nch + 1]

    # depth = dsum / (alpha + eps)
    denom = cache["alpha_map"] + DEPTH_EPS
    gdsum_img = gD / denom
    gA_img += -gD * cache["dsum"] / (denom * denom)

    proj = cache["proj"]
    c, a = cache["c"], cache["a"]
    z, u, v, inv = proj["z"], proj["u"], proj["v"], proj["inv"]

    gu = np.zeros(n, dtype=gpacked.dtype)
    gv = np.zeros(n, dtype=gpacked.dtype)
    gz = np.zeros(n, dtype=gpacked.dtype)
    gV = np.zeros((n, 2, 2), dtype=gpacked.dtype)

    for (ids, pxf, pyf, rows, cols, alpha, t_before, included, t_final,
         du, dv) in cache["tiles"]:
        gI_t = gI[rows, cols]                       # (P, nch)
        gA_t = gA_img[rows, cols]                   # (P,)
        gdsum_t = gdsum_img[rows, cols]

        wgt = alpha * t_before * included
        gw = gI_t @ c[ids].T                        # (P, G)
        gw = gw.T + z[ids, None] * gdsum_t[None, :]

        gc[ids] += wgt @ gI_t
        gz[ids] += wgt @ gdsum_t

        gww = gw * wgt
        suffix = np.flip(np.cumsum(np.flip(gww, 0), axis=0), 0)
        suffix = np.vstack([suffix[1:], np.zeros_like(suffix[:1])])

        one_m = 1.0 - alpha
        live = included & (alpha > 0.0)
        galpha = np.where(
            live,
            gw * t_before - suffix / one_m + gA_t[None, :] * t_final[None, :] / one_m,
            0.0)

        a1 = a[ids, 0][:, None]
        expq = np.where(alpha > 0.0, alpha / np.where(a1 > 0, a1, 1.0), 0.0)
        ga[ids, 0] += (expq * galpha).sum(axis=1)
        gqpow = -0.5 * alpha * galpha

        ia = inv[ids, 0, 0][:, None]
        ib = inv[ids, 0, 1][:, None]
        ic = inv[ids, 1, 1][:, None]
        e0 = ia * du + ib * dv
        e1 = ib * du + ic * dv

        gV[ids, 0, 0] += (-e0 * e0 * gqpow).sum(axis=1)
        gV[ids, 0, 1] += (-e0 * e1 * gqpow).sum(axis=1)
        gV[ids, 1, 0] += (-e0 * e1 * gqpow).sum(axis=1)
        gV[ids, 1, 1] += (-e1 * e1 * gqpow).sum(axis=1)

        gu[ids] += (-2.0 * e0 * gqpow).sum(axis=1)
        gv[ids] += (-2.0 * e1 * gqpow).sum(axis=1)

    # ---- projection chain, batched over valid gaussians
    val = proj["valid"]
    M, sigma, J, Rq, xc = proj["M"], proj["sigma"], proj["J"], proj["Rq"], proj["xc"]
    R = proj["R"]
    cam = cache["camera"]
    s = cache["s"]
    q = cache["q"]

    gM = (gV + np.swapaxes(gV, 1, 2)) @ M @ sigma
    gSig = np.swapaxes(M, 1, 2) @ gV @ M
    gJ = gM @ R.T

    X, Y, Z = xc[:, 0], xc[:, 1], np.where(val, xc[:, 2], 1.0)
    gxc = np.zeros_like(xc)
    gxc[:, 0] += gJ[:, 0, 2] * (-cam.fx / (Z * Z))
    gxc[:, 1] += gJ[:, 1, 2] * (-cam.fy / (Z * Z))
    gxc[:, 2] += (gJ[:, 0, 0] * (-cam.fx / (Z * Z))
                  + gJ[:, 1, 1] * (-cam.fy / (Z * Z))
                  + gJ[:, 0, 2] * (2.0 * cam.fx * X / Z**3)
                  + gJ[:, 1, 2] * (2.0 * cam.fy * Y / Z**3))
    gxc[:, 0] += gu * cam.fx / Z
    gxc[:, 2] += gu * (-cam.fx * X / (Z * Z))
    gxc[:, 1] += gv * cam.fy / Z
    gxc[:, 2] += gv * (-cam.fy * Y / (Z * Z))
    gxc[:, 2] += gz
    gxc[~val] = 0.0
    gx[:] = gxc @ R

    # sigma = Rq diag(s^2) Rq^T
    D = (s * s)
    gRq = (gSig + np.swapaxes(gSig, 1, 2)) @ Rq * D[:, None, :]
    gD = np.einsum("nik,nij,njl->nkl", Rq, gSig, Rq)
    gs[:] = 2.0 * s * np.einsum("nkk->nk", gD)

    w_, x_, y_, z_ = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    zero = np.zeros_like(w_)
    dR = np.empty((n, 4, 3, 3), dtype=gpacked.dtype)
    dR[:, 0] = 2 * np.stack([
        np.stack([zero, -z_, y_], -1),
        np.stack([z_, zero, -x_], -1),
        np.stack([-y_, x_, zero], -1)], -2)
    dR[:, 1] = 2 * np.stack([
        np.stack([zero, y_, z_], -1),
        np.stack([y_, -2 * x_, -w_], -1),
        np.stack([z_, w_, -2 * x_], -1)], -2)
    dR[:, 2] = 2 * np.stack([
        np.stack([-2 * y_, x_, w_], -1),
        np.stack([x_, zero, z_], -1),
        np.stack([-w_, z_, -2 * y_], -1)], -2)
    dR[:, 3] = 2 * np.stack([
        np.stack([-2 * z_, -w_, x_], -1),
        np.stack([w_, -2 * z_, y_], -1),
        np.stack([x_, y_, zero], -1)], -2)
    gq[:] = np.einsum("nij,nkij->nk", gRq, dR)

    gs[~val] = 0.0
    gq[~val] = 0.0
    return gx, gc, gq, gs, ga


def rasterize(scene: FrameGaussians, camera: Camera, colors=None) -> RenderOutput:
    """Differentiable render of a world-frame scene (Eq.-1-style ℛ)."""
    if scene.frame != "world":
        raise ValueError("rasterize expects world-frame gaussians")
    x, q, s, a = scene.X, scene.Q, scene.S, scene.A
    c = colors if colors is not None else scene.C
    for name, t in (("position", x), ("color", c), ("quaternion", q),
                    ("scale", s), ("opacity", a)):
        _check_finite(name, t.data)

    packed_data, cache = _forward(x.data, c.data, q.data, s.data, a.data, camera)
    nch = c.data.shape[1]

    consumed = {"done": False}

    def bwd(g):
        if consumed["done"]:
            raise RuntimeError("rasterize backward called twice; forward cache consumed")
        consumed["done"] = True
        return _backward(cache, g)

    packed = T.custom_op([x, c, q, s, a], packed_data, bwd)
    return RenderOutput(
        image=packed[:, :, :nch],
        alpha=packed[:, :, nch],
        depth=packed[:, :, nch + 1],
    )


def rasterize_labels(scene: FrameGaussians, camera: Camera) -> RenderOutput:
    """Render one-hot part labels (head -> R, hair -> G), composited identically.

    Channel 0 is the visible-head mask, channel 1 the visible-hair mask;
    occluded parts are suppressed by compositing itself.
    """
    if scene.label is None:
        raise ValueError("scene carries no per-point labels")
    onehot = np.zeros((scene.X.shape[0], 3), dtype=scene.X.data.dtype)
    for lab, color in LABEL_COLORS.items():
        onehot[scene.label == lab] = color
    out = rasterize(scene, camera, colors=T.Tensor(onehot, dtype=scene.X.data.dtype))
    out.label = out.image
    return out


def render_naive(x, c, q, s, a, camera: Camera):
    """Per-pixel oracle: identical contribution rules, sequential compositing."""
    h, w = camera.height, camera.width
    nch = c.shape[1]
    img = np.zeros((h, w, nch), dtype=np.float64)
    alpha_map = np.zeros((h, w), dtype=np.float64)
    dsum = np.zeros((h, w), dtype=np.float64)
    n = x.shape[0]
    if n == 0:
        return img, alpha_map, dsum

    proj = _project(np.asarray(x, np.float64), np.asarray(q, np.float64),
                    np.asarray(s, np.float64), camera)
    order = np.lexsort((np.arange(n), proj["z"]))
    order = order[proj["valid"][order]]

    for py in range(h):
        for px in range(w):
            t_cur = 1.0
            for i in order:
                al = _alpha_at(a[i, 0], proj["inv"][i],
                               px - proj["u"][i], py - proj["v"][i])
                if al == 0.0:
                    continue
                t_next = t_cur * (1.0 - al)
                if t_next < TRANSMITTANCE_MIN:
                    break
                wgt = al * t_cur
                img[py, px] += wgt * c[i]
                dsum[py, px] += wgt * proj["z"][i]
                t_cur = t_next
            alpha_map[py, px] = 1.0 - t_cur
    depth = dsum / (alpha_map + DEPTH_EPS)
    return img, alpha_map, depth
