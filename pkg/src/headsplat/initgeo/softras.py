"""Differentiable mesh rendering for the initialization stage.

Colors/features use a hard z-buffer with barycentric interpolation
(gradients reach features and, within coverage, the projected vertices).
Silhouettes are soft: per-face signed screen distance through a sigmoid
of width sigma_s, aggregated as M = 1 - prod_f (1 - s_f), which carries
gradients to vertices across the coverage boundary. Per-part depth maps
are hard (background +inf) and feed the binary occlusion mask.
"""

from __future__ import annotations

import numpy as np

from .. import tensor as T

SIGMOID_TRUNC = 6.0      # ignore faces farther than TRUNC*sigma px from a pixel


def project_mesh(camera, verts: T.Tensor):
    """World-space verts -> (uv Tensor (V,2), z Tensor (V,)); tape-composed."""
    R = camera.pose.rotation().astype(verts.data.dtype)
    t = camera.pose.t.astype(verts.data.dtype)
    xc = T.add(T.matmul(verts, T.Tensor(R.T, dtype=verts.data.dtype)),
               T.Tensor(t, dtype=verts.data.dtype))
    z = xc[:, 2:3]
    u = T.add(T.mul(T.div(xc[:, 0:1], z), camera.fx), camera.cx)
    v = T.add(T.mul(T.div(xc[:, 1:2], z), camera.fy), camera.cy)
    return T.concat([u, v], axis=1), T.reshape(z, (-1,))


def _face_pixel_pairs(uv, faces, h, w, pad):
    """Ragged (face, pixel) candidate pairs from padded face bboxes."""
    fuv = uv[faces]                                   # (F,3,2)
    lo = np.floor(fuv.min(axis=1) - pad).astype(np.int64)
    hi = np.ceil(fuv.max(axis=1) + pad).astype(np.int64)
    lo[:, 0] = np.clip(lo[:, 0], 0, w - 1)
    lo[:, 1] = np.clip(lo[:, 1], 0, h - 1)
    hi[:, 0] = np.clip(hi[:, 0], -1, w - 1)
    hi[:, 1] = np.clip(hi[:, 1], -1, h - 1)
    nx = np.maximum(hi[:, 0] - lo[:, 0] + 1, 0)
    ny = np.maximum(hi[:, 1] - lo[:, 1] + 1, 0)
    counts = nx * ny
    keep = counts > 0
    fid_base = np.flatnonzero(keep)
    counts = counts[keep]
    total = int(counts.sum())
    if total == 0:
        return (np.zeros(0, np.int64),) * 3
    rep = np.repeat(np.arange(fid_base.size), counts)
    start = np.cumsum(counts) - counts
    pos = np.arange(total) - start[rep]
    px = lo[keep][:, 0][rep] + pos % nx[rep]
    py = lo[keep][:, 1][rep] + pos // nx[rep]
    return fid_base[rep], px, py


def _barycentric(uv, faces, fid, px, py):
    a = uv[faces[fid, 0]]
    b = uv[faces[fid, 1]]
    c = uv[faces[fid, 2]]
    p = np.stack([px, py], axis=1).astype(uv.dtype)

    def cross(u, v):
        return u[:, 0] * v[:, 1] - u[:, 1] * v[:, 0]

    d = cross(b - a, c - a)
    safe = np.where(np.abs(d) < 1e-12, 1.0, d)
    wa = cross(b - p, c - p) / safe
    wb = cross(c - p, a - p) / safe
    wc = cross(a - p, b - p) / safe
    degenerate = np.abs(d) < 1e-12
    return wa, wb, wc, d, degenerate


def zbuffer(uv, z, faces, h, w):
    """Hard winner per pixel.

    Returns (depth (H,W) with +inf background, winner face id (H,W) or -1,
    barycentric weights (H,W,3)).
    """
    depth = np.full((h, w), np.inf, dtype=uv.dtype)
    winner = np.full((h, w), -1, dtype=np.int64)
    bary = np.zeros((h, w, 3), dtype=uv.dtype)
    if faces.shape[0] == 0:
        return depth, winner, bary

    fid, px, py = _face_pixel_pairs(uv, faces, h, w, pad=0.0)
    if fid.size == 0:
        return depth, winner, bary
    wa, wb, wc, d, degen = _barycentric(uv, faces, fid, px, py)
    zf = z[faces[fid]]
    inside = (wa >= 0) & (wb >= 0) & (wc >= 0) & ~degen
    front = (zf > 0).all(axis=1)
    ok = inside & front
    if not ok.any():
        return depth, winner, bary
    fid, px, py = fid[ok], px[ok], py[ok]
    wa, wb, wc = wa[ok], wb[ok], wc[ok]
    zp = (np.stack([wa, wb, wc], 1) * z[faces[fid]]).sum(axis=1)

    pix = py * w + px
    order = np.lexsort((fid, zp, pix))
    pix_o = pix[order]
    first = np.ones(pix_o.size, dtype=bool)
    first[1:] = pix_o[1:] != pix_o[:-1]
    sel = order[first]
    rows, cols = pix[sel] // w, pix[sel] % w
    depth[rows, cols] = zp[sel]
    winner[rows, cols] = fid[sel]
    bary[rows, cols, 0] = wa[sel]
    bary[rows, cols, 1] = wb[sel]
    bary[rows, cols, 2] = wc[sel]
    return depth, winner, bary


def rasterize_features(uv: T.Tensor, z: T.Tensor, feats: T.Tensor, faces, h, w):
    """Hard z-buffer feature image; differentiable in feats and (within
    coverage) in the projected vertices through the barycentric weights."""
    uv_d, z_d, f_d = uv.data, z.data, feats.data
    depth, winner, bary = zbuffer(uv_d, z_d, faces, h, w)
    covered = winner >= 0
    img = np.zeros((h, w, f_d.shape[1]), dtype=f_d.dtype)
    if covered.any():
        vids = faces[winner[covered]]                 # (P,3)
        img[covered] = np.einsum("pk,pkc->pc", bary[covered], f_d[vids])

    def bwd(g):
        guv = np.zeros_like(uv_d)
        gf = np.zeros_like(f_d)
        if not covered.any():
            return guv, None, gf
        gpix = g[covered]                             # (P,C)
        vids = faces[winner[covered]]
        bw = bary[covered]
        np.add.at(gf, vids.ravel(),
                  (bw[:, :, None] * gpix[:, None, :]).reshape(-1, f_d.shape[1]))

        # d bary / d projected verts (within-pixel term)
        a = uv_d[vids[:, 0]]
        b = uv_d[vids[:, 1]]
        c = uv_d[vids[:, 2]]
        ys, xs = np.nonzero(covered)
        p = np.stack([xs, ys], axis=1).astype(uv_d.dtype)
        gwk = np.einsum("pc,pkc->pk", gpix, f_d[vids])     # dL/d w_k

        def cross(u, v):
            return u[:, 0] * v[:, 1] - u[:, 1] * v[:, 0]

        def rot(u):
            return np.stack([u[:, 1], -u[:, 0]], axis=1)

        D = cross(b - a, c - a)
        D = np.where(np.abs(D) < 1e-12, 1.0, D)
        # dN/d(vertex) for N_a=(b-p)x(c-p), N_b=(c-p)x(a-p), N_c=(a-p)x(b-p)
        dN = np.zeros((p.shape[0], 3, 3, 2), dtype=uv_d.dtype)   # (P, which_w, which_vert, 2)
        dN[:, 0, 1] = rot(c - p)
        dN[:, 0, 2] = -rot(b - p)
        dN[:, 1, 2] = rot(a - p)
        dN[:, 1, 0] = -rot(c - p)
        dN[:, 2, 0] = rot(b - p)
        dN[:, 2, 1] = -rot(a - p)
        dD = np.zeros((p.shape[0], 3, 2), dtype=uv_d.dtype)
        dD[:, 1] = rot(c - a)
        dD[:, 2] = -rot(b - a)
        dD[:, 0] = -dD[:, 1] - dD[:, 2]
        wk = bw
        # dw_k/dv_j = (dN_kj - w_k dD_j)/D
        contrib = (dN - wk[:, :, None, None] * dD[:, None, :, :]) / D[:, None, None, None]
        gv = np.einsum("pk,pkjt->pjt", gwk, contrib)
        np.add.at(guv, vids.ravel(), gv.reshape(-1, 2))
        return guv, None, gf

    return T.custom_op([uv, z, feats], img, bwd)


def _point_segment(px, py, ax, ay, bx, by):
    """Distance and clamped projection parameter of points to segments."""
    ex, ey = bx - ax, by - ay
    len2 = ex * ex + ey * ey
    tcl = np.clip(((px - ax) * ex + (py - ay) * ey) / np.where(len2 < 1e-18, 1.0, len2),
                  0.0, 1.0)
    qx = ax + tcl * ex
    qy = ay + tcl * ey
    dx, dy = px - qx, py - qy
    return np.sqrt(dx * dx + dy * dy), tcl, dx, dy


def soft_silhouette(uv: T.Tensor, faces, h, w, sigma, subsets=None):
    """Soft coverage masks by signed-distance sigmoids.

    `subsets` maps name -> boolean face mask; returns a dict name -> (H,W)
    Tensor (plus "all"). Sharing one face/pixel pass across subsets keeps
    the cost of the whole-mesh and per-part masks a single traversal.
    """
    uv_d = uv.data
    pad = SIGMOID_TRUNC * sigma
    fid, px, py = _face_pixel_pairs(uv_d, faces, h, w, pad)
    names = ["all"] + (sorted(subsets) if subsets else [])

    if fid.size == 0:
        outs = {}
        for name in names:
            outs[name] = T.custom_op([uv], np.zeros((h, w), dtype=uv_d.dtype),
                                     lambda g: (np.zeros_like(uv_d),))
        return outs

    pxf = px.astype(uv_d.dtype)
    pyf = py.astype(uv_d.dtype)
    tri = faces[fid]
    a, b, c = uv_d[tri[:, 0]], uv_d[tri[:, 1]], uv_d[tri[:, 2]]

    d0, t0, dx0, dy0 = _point_segment(pxf, pyf, a[:, 0], a[:, 1], b[:, 0], b[:, 1])
    d1, t1, dx1, dy1 = _point_segment(pxf, pyf, b[:, 0], b[:, 1], c[:, 0], c[:, 1])
    d2, t2, dx2, dy2 = _point_segment(pxf, pyf, c[:, 0], c[:, 1], a[:, 0], a[:, 1])
    dmin = np.minimum(np.minimum(d0, d1), d2)
    which = np.where(d0 <= np.minimum(d1, d2), 0, np.where(d1 <= d2, 1, 2))

    def cross2(ux, uy, vx, vy):
        return ux * vy - uy * vx

    D = cross2(b[:, 0] - a[:, 0], b[:, 1] - a[:, 1], c[:, 0] - a[:, 0], c[:, 1] - a[:, 1])
    sgnD = np.where(D >= 0, 1.0, -1.0)
    w0 = cross2(b[:, 0] - pxf, b[:, 1] - pyf, c[:, 0] - pxf, c[:, 1] - pyf) * sgnD
    w1 = cross2(c[:, 0] - pxf, c[:, 1] - pyf, a[:, 0] - pxf, a[:, 1] - pyf) * sgnD
    w2 = cross2(a[:, 0] - pxf, a[:, 1] - pyf, b[:, 0] - pxf, b[:, 1] - pyf) * sgnD
    inside = (w0 >= 0) & (w1 >= 0) & (w2 >= 0) & (np.abs(D) > 1e-12)
    dsgn = np.where(inside, dmin, -dmin)

    u_arg = dsgn / sigma
    live = u_arg > -SIGMOID_TRUNC
    sval = np.where(live, 1.0 / (1.0 + np.exp(-np.clip(u_arg, -60, 60))), 0.0)
    log1m = np.log1p(-np.minimum(sval, 1.0 - 1e-15))

    pix = py * w + px
    masks = {"all": np.ones(fid.size, dtype=bool)}
    if subsets:
        for name, face_mask in subsets.items():
            masks[name] = face_mask[fid]

    outs = {}
    seg_data = (fid, pix, tri, which, t0, t1, t2, dx0, dy0, dx1, dy1, dx2, dy2,
                dmin, inside, sval, live)
    for name in names:
        sel = masks[name]
        acc = np.zeros(h * w, dtype=uv_d.dtype)
        np.add.at(acc, pix[sel], log1m[sel])
        m_img = (1.0 - np.exp(acc)).reshape(h, w)
        outs[name] = _sil_op(uv, m_img, seg_data, sel, sigma, h, w)
    return outs


def _sil_op(uv, m_img, seg_data, sel, sigma, h, w):
    (fid, pix, tri, which, t0, t1, t2, dx0, dy0, dx1, dy1, dx2, dy2,
     dmin, inside, sval, live) = seg_data
    uv_d = uv.data

    def bwd(g):
        guv = np.zeros_like(uv_d)
        gflat = g.reshape(-1)
        one_minus_m = (1.0 - m_img).reshape(-1)
        idx = np.flatnonzero(sel & live)
        if idx.size == 0:
            return (guv,)
        pj = pix[idx]
        s = sval[idx]
        # dM/ds_f = (1-M)/(1-s_f)
        gs = gflat[pj] * one_minus_m[pj] / (1.0 - s)
        gd = gs * s * (1.0 - s) / sigma
        gd = np.where(inside[idx], gd, -gd)         # signed distance

        dist = np.maximum(dmin[idx], 1e-12)
        wsel = which[idx]
        ts = np.stack([t0[idx], t1[idx], t2[idx]], 1)[np.arange(idx.size), wsel]
        dxs = np.stack([dx0[idx], dx1[idx], dx2[idx]], 1)[np.arange(idx.size), wsel]
        dys = np.stack([dy0[idx], dy1[idx], dy2[idx]], 1)[np.arange(idx.size), wsel]
        nx = dxs / dist
        ny = dys / dist
        # segment endpoints per closest edge: 0:(a,b) 1:(b,c) 2:(c,a)
        v_first = np.stack([tri[idx, 0], tri[idx, 1], tri[idx, 2]], 1)[np.arange(idx.size), wsel]
        v_second = np.stack([tri[idx, 1], tri[idx, 2], tri[idx, 0]], 1)[np.arange(idx.size), wsel]
        ga_x = -(1.0 - ts) * nx * gd
        ga_y = -(1.0 - ts) * ny * gd
        gb_x = -ts * nx * gd
        gb_y = -ts * ny * gd
        np.add.at(guv[:, 0], v_first, ga_x)
        np.add.at(guv[:, 1], v_first, ga_y)
        np.add.at(guv[:, 0], v_second, gb_x)
        np.add.at(guv[:, 1], v_second, gb_y)
        return (guv,)

    return T.custom_op([uv], m_img, bwd)


def occlusion_mask(d_head, d_hair):
    """Binary map: 1 where the hair surface is strictly nearer."""
    return (d_hair < d_head).astype(np.float64)
