"""Geometry-guided initialization: dual SDF fields, mesh losses, transfer.

Stage 1 optimizes the two SDF+feature fields, the expression/pose color
and deformation MLPs and the neutral landmarks against multi-view RGB,
soft-silhouette IoU, landmark, offset, Laplacian and occlusion-split mask
terms. The converged meshes and MLPs then seed the Gaussian model.
"""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from .. import tensor as T
from ..cameras import apply_rigid
from ..gaussians import HAIR, HEAD, NeutralGaussianModel
from ..generator import BlendConfig, GeneratorNets, blend_weights, color, deform
from ..hair import HairNets
from ..nets import tile_rows
from ..optim import Adam
from .dmtet import TetGrid, marching_tets, merge_parts, uniform_laplacian
from .sdf import SdfField, positional_encoding
from .softras import occlusion_mask, project_mesh, rasterize_features, \
    soft_silhouette, zbuffer

IOU_FLOOR = 1e-6
OPACITY_INIT = 0.1


def iou_loss(pred, gt):
    """1 - soft IoU; accepts a Tensor prediction and an array target."""
    gt = np.asarray(gt, dtype=pred.data.dtype)
    inter = T.sum_(T.mul(pred, gt))
    union = T.sum_(pred) + float(gt.sum()) - inter
    return 1.0 - T.div(inter, T.maximum(union, IOU_FLOOR))


class Stage1State:
    """Everything stage 1 optimizes, plus the fixed lattice."""

    def __init__(self, mcfg, rng, p0_init, lattice_res=None):
        self.mcfg = mcfg
        self.sdf_head = SdfField(mcfg, rng, "head")
        self.sdf_hair = SdfField(mcfg, rng, "hair")
        self.nets = GeneratorNets(mcfg, rng)
        self.P0 = T.Tensor(np.asarray(p0_init, dtype=T.get_default_dtype()),
                           requires_grad=True)
        self.grid = TetGrid.build(lattice_res or mcfg.grid)
        self.enc = positional_encoding(
            self.grid.verts.astype(T.get_default_dtype()), mcfg.sdf_octaves)
        self.blend = BlendConfig(t1=mcfg.t1, t2=mcfg.t2, t3=mcfg.t3, t4=mcfg.t4)

    def extract(self):
        """Marching-tets meshes for both parts plus the merged mesh."""
        s_h, eta_h = self.sdf_head(self.grid.verts, encoded=self.enc)
        s_r, eta_r = self.sdf_hair(self.grid.verts, encoded=self.enc)
        head = marching_tets(self.grid, s_h, eta_h, HEAD)
        hair = marching_tets(self.grid, s_r, eta_r, HAIR)
        return head, hair, merge_parts(head, hair)

    def pad_features(self, feats):
        extra = self.mcfg.feature_dim - feats.shape[1]
        if extra <= 0:
            return feats
        zeros = T.Tensor(np.zeros((feats.shape[0], extra), dtype=feats.data.dtype))
        return T.concat([feats, zeros], axis=1)

    def parameters(self):
        nets = (self.sdf_head.parameters() + self.sdf_hair.parameters()
                + self.nets.f_col_exp.parameters() + self.nets.f_col_pose.parameters()
                + self.nets.f_def_exp.parameters() + self.nets.f_def_pose.parameters())
        return nets


def render_guidance(state: Stage1State, mesh, drive, camera, sigma_s):
    """Deform, pose and softly rasterize the guidance mesh for one view."""
    lam_exp, lam_pose = blend_weights(mesh.verts.data, state.P0.data, mesh.label,
                                      state.blend)
    n = mesh.verts.shape[0]
    feats = state.pad_features(mesh.feats)

    deformed = deform(state.nets, mesh.verts, drive.theta, drive.pose,
                      lam_exp, lam_pose)
    colors = color(state.nets, feats, drive.theta, drive.pose, lam_exp, lam_pose)
    world = apply_rigid(drive.pose, deformed)

    uv, z = project_mesh(camera, world)
    h, w = camera.height, camera.width
    image = rasterize_features(uv, z, colors, mesh.faces, h, w)
    head_faces = mesh.label[mesh.faces[:, 0]] == HEAD
    sils = soft_silhouette(uv, mesh.faces, h, w, sigma_s,
                           subsets={"head": head_faces, "hair": ~head_faces})
    with T.no_grad():
        d_head, _, _ = zbuffer(uv.data, z.data, mesh.faces[head_faces], h, w)
        d_hair, _, _ = zbuffer(uv.data, z.data, mesh.faces[~head_faces], h, w)
    m_o = occlusion_mask(d_head, d_hair)
    return dict(image=image, sil=sils["all"], sil_head=sils["head"],
                sil_hair=sils["hair"], m_o=m_o, deformed=deformed)


def init_losses(state: Stage1State, renders, truths, drives, mesh, tcfg):
    """Seven-term stage-1 loss over a batch of rendered views."""
    terms = {k: 0.0 for k in ("rgb", "sil", "def", "offset", "mask")}
    scale = 1.0 / len(renders)
    for render, truth, drive in zip(renders, truths, drives):
        rgb = render["image"][:, :, 0:3]
        terms["rgb"] = terms["rgb"] + T.mean(T.absolute(rgb - truth["rgb"])) * scale

        fg = np.clip(truth["mask_head"] + truth["mask_hair"], 0.0, 1.0)
        terms["sil"] = terms["sil"] + iou_loss(render["sil"], fg) * scale

        m_o = render["m_o"]
        head_vis = T.mul(render["sil_head"], 1.0 - m_o)
        hair_vis = T.mul(render["sil_hair"], m_o)
        terms["mask"] = terms["mask"] + (iou_loss(head_vis, truth["mask_head"])
                                         + iou_loss(hair_vis, truth["mask_hair"])) * scale

        # landmark guidance through the expression deformation MLP
        n_l = state.P0.shape[0]
        cond = tile_rows(drive.theta, n_l, state.P0.data.dtype)
        disp_l = state.nets.f_def_exp(T.concat([state.P0, cond], axis=1))
        pred_lmk = state.P0 + disp_l
        diff = pred_lmk - truth["landmarks"]
        terms["def"] = terms["def"] + T.mean(T.sum_(T.mul(diff, diff), axis=1)) * scale

        off = render["deformed"] - mesh.verts
        terms["offset"] = terms["offset"] + T.mean(T.mul(off, off)) * scale

    s_lmk, _ = state.sdf_head(state.P0)
    term_lmk = T.mean(T.mul(s_lmk, s_lmk))

    lap = uniform_laplacian(mesh.verts, mesh.faces)
    term_lap = T.mean(T.sum_(T.mul(lap, lap), axis=1))

    total = (terms["rgb"] + tcfg.w_sil * terms["sil"] + tcfg.w_def * terms["def"]
             + tcfg.w_offset * terms["offset"] + tcfg.w_lmk * term_lmk
             + tcfg.w_lap * term_lap + tcfg.w_mask * terms["mask"])
    parts = {k: (v.item() if isinstance(v, T.Tensor) else float(v))
             for k, v in terms.items()}
    parts["lmk"] = term_lmk.item()
    parts["lap"] = term_lap.item()
    return total, parts


def run_stage1(dataset, cfg, rng, log=None, lattice_res=None):
    """Optimize the guidance model for cfg.train.stage1_iters iterations."""
    state = Stage1State(cfg.model, rng, dataset.neutral_landmarks,
                        lattice_res=lattice_res)
    tcfg = cfg.train
    opt = Adam({
        "nets": (state.parameters(), tcfg.lr_stage1_nets),
        "landmarks": ([state.P0], tcfg.lr_stage1_landmarks),
    })

    size = tcfg.stage1_render or dataset.resolution
    cams = [c.scaled(size / dataset.resolution) for c in dataset.cameras]
    samples = dataset.train_samples()

    for it in range(tcfg.stage1_iters):
        T.tape().clear()
        head, hair, mesh = state.extract()
        if mesh.verts.shape[0] == 0:
            raise RuntimeError("stage-1 surface vanished; lower the loss weights "
                               "or check the SDF initialization")
        renders, truths, drives = [], [], []
        for _ in range(tcfg.stage1_batch):
            seq, fidx, vidx = samples[rng.integers(len(samples))]
            drive = dataset.drive(seq, fidx)
            renders.append(render_guidance(state, mesh, drive, cams[vidx],
                                           cfg.render.sigma_sil))
            truths.append(dataset.truth(seq, fidx, vidx, size))
            drives.append(drive)
        loss, parts = init_losses(state, renders, truths, drives, mesh, tcfg)
        T.backward(loss)
        opt.step()
        opt.zero_grad()
        if log is not None and (it % tcfg.log_every == 0 or it == tcfg.stage1_iters - 1):
            log(it, loss.item(), parts)
    return state


def transfer_parameters(state: Stage1State, scalp, rng):
    """Seed the Gaussian model from the converged guidance model.

    Positions and features come straight from the merged mesh; rotation,
    scale and opacity follow the original splatting recipe (identity
    quaternions, log mean 3-NN distance, 0.1 opacity); the color and
    deformation MLPs carry over; the attribute and hair MLPs start fresh
    with zeroed final layers.
    """
    with T.no_grad():
        head, hair, mesh = state.extract()
    n = mesh.verts.shape[0]
    if n == 0:
        raise RuntimeError(
            "empty initialization mesh: inspect stage-1 losses (init diagnostics) "
            "before transferring parameters")

    verts = mesh.verts.data.copy()
    feats = state.pad_features(mesh.feats).data.copy()

    k = min(4, n)
    dist, _ = cKDTree(verts).query(verts, k=k)
    nn = dist[:, 1:k].mean(axis=1) if k > 1 else np.full(n, 0.01)
    nn = np.maximum(nn, 1e-6)

    dtype = T.get_default_dtype()
    quats = np.zeros((n, 4), dtype=dtype)
    quats[:, 0] = 1.0
    model = NeutralGaussianModel(
        X0=T.Tensor(verts.astype(dtype), requires_grad=True),
        F0=T.Tensor(feats.astype(dtype), requires_grad=True),
        Q0=T.Tensor(quats, requires_grad=True),
        S0=T.Tensor(np.log(nn)[:, None].repeat(3, axis=1).astype(dtype),
                    requires_grad=True),
        A0=T.Tensor(np.full((n, 1), np.log(OPACITY_INIT / (1 - OPACITY_INIT)),
                            dtype=dtype), requires_grad=True),
        label=mesh.label.copy(),
        P0=state.P0.data.copy(),
        P1=np.asarray(scalp, dtype=np.float64),
    )
    hair_nets = HairNets(state.mcfg, rng)
    return model, hair_nets
