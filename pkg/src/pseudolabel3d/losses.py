"""Self-supervised loss terms for pose refinement.

Every term is available two ways: a plain function returning ``(value, gradient)``
for inspection and testing, and a torch expression used by :class:`LossProblem`,
which evaluates the weighted total and its gradient w.r.t. translation and size
in one backward pass.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from .geom import CameraIntrinsics, ObjectPose, SE3Transform
from .render import (
    DTYPE,
    _sil_backward,
    _sil_forward,
    _zbuffer,
    RenderConfig,
    SilhouetteMap,
    hard_depth,
    posed_vertices,
    sigma_pixels,
    soft_silhouette,
)
from .shape import ShapeSpace, decode_vertices

EPS_PROB = 1e-6
_EPS_Z = 1e-12
PHOTO_DELTA = 0.05
TERMS = ("sil", "mv_sil", "depth", "photo", "size", "y")


@dataclass
class LossWeights:
    sil: float = 1.0
    mv_sil: float = 1.0
    depth: float = 0.5
    photo: float = 10.0
    size: float = 0.5
    y: float = 1.0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise ValueError(f"loss weight {k} must be non-negative")

    def scaled(self, factor: float) -> "LossWeights":
        return LossWeights(**{k: v * factor for k, v in asdict(self).items()})


@dataclass
class Priors:
    size_mean: tuple = (1.53, 1.63, 3.88)  # h, w, l
    y_plane: float = 1.65  # camera-frame y of the road surface

    def __post_init__(self):
        self.size_mean = tuple(float(s) for s in self.size_mean)
        if len(self.size_mean) != 3 or any(s <= 0 for s in self.size_mean):
            raise ValueError("size_mean needs three positive components")


@dataclass(frozen=True)
class MaskObs:
    fg: np.ndarray
    bg: np.ndarray

    def __post_init__(self):
        fg = np.asarray(self.fg, dtype=bool)
        bg = np.asarray(self.bg, dtype=bool)
        if fg.shape != bg.shape:
            raise ValueError("fg and bg masks differ in shape")
        if np.any(fg & bg):
            raise ValueError("fg and bg masks overlap")
        object.__setattr__(self, "fg", fg)
        object.__setattr__(self, "bg", bg)

    @classmethod
    def from_fg(cls, fg, ignore=None) -> "MaskObs":
        fg = np.asarray(fg, dtype=bool)
        bg = ~fg if ignore is None else ~fg & ~np.asarray(ignore, dtype=bool)
        return cls(fg, bg)


@dataclass
class LossBreakdown:
    terms: Dict[str, float]
    total: float
    grad_t: np.ndarray
    grad_size: np.ndarray
    flags: List[str] = field(default_factory=list)

    def to_json(self, **extra) -> str:
        rec = dict(extra)
        rec.update(
            terms=self.terms,
            total=self.total,
            grad_t=[float(x) for x in self.grad_t],
            grad_size=[float(x) for x in self.grad_size],
            flags=list(self.flags),
        )
        return json.dumps(rec, sort_keys=True)


# ---------------------------------------------------------------- single terms


def sil_loss(sil, mask: MaskObs):
    """Mean binary cross-entropy over labelled pixels; returns (loss, d loss / d prob).

    Pixels that are neither fg nor bg (e.g. other objects) are ignored.
    """
    prob = sil.prob if isinstance(sil, SilhouetteMap) else np.asarray(sil, dtype=float)
    if prob.shape != mask.fg.shape:
        raise ValueError(f"silhouette {prob.shape} and mask {mask.fg.shape} differ in shape")
    labelled = mask.fg | mask.bg
    n = int(labelled.sum())
    if n == 0:
        return 0.0, np.zeros_like(prob)
    p = np.clip(prob, EPS_PROB, 1.0 - EPS_PROB)
    fg, bg = mask.fg.astype(float), mask.bg.astype(float)
    q = np.where(labelled, p * fg + (1.0 - p) * bg, 1.0)
    loss = float(-np.log(q)[labelled].sum() / n)
    inside = (prob > EPS_PROB) & (prob < 1.0 - EPS_PROB)
    cot = np.where(labelled & inside, -(fg - bg) / q / n, 0.0)
    return loss, cot


def depth_center_loss(target, mesh_centre):
    """Squared distance between the depth-derived centre and the mesh vertex mean.

    Returns (loss, gradient w.r.t. the mesh centre). The mesh centre moves
    one-for-one with t_c, so this is also the t_c gradient.
    """
    d = np.asarray(mesh_centre, dtype=float) - np.asarray(target, dtype=float)
    return float(d @ d), 2.0 * d


def vertical_loss(pose: ObjectPose, priors: Priors):
    """Squared offset of the box bottom face from the road plane.

    Returns (loss, {"t_c": grad, "size": grad}); y points down so the bottom
    face sits at ``t_c.y + h / 2``.
    """
    r = pose.t_c[1] + pose.size[0] / 2.0 - priors.y_plane
    g_t = np.array([0.0, 2.0 * r, 0.0])
    g_s = np.array([r, 0.0, 0.0])
    return float(r * r), {"t_c": g_t, "size": g_s}


def size_loss(size, priors: Priors):
    d = np.asarray(size, dtype=float) - np.asarray(priors.size_mean, dtype=float)
    return float(d @ d), 2.0 * d


def smooth_l1(r, delta: float = PHOTO_DELTA):
    a = abs(r) if not isinstance(r, torch.Tensor) else r.abs()
    if isinstance(r, torch.Tensor):
        return torch.where(a < delta, 0.5 * r * r / delta, a - 0.5 * delta)
    return np.where(a < delta, 0.5 * np.square(r) / delta, a - 0.5 * delta)


def total_loss(term_results: Dict[str, tuple], weights: LossWeights) -> LossBreakdown:
    """Weighted sum of per-term (value, grad_t, grad_size) triples.

    Missing or gated-off terms contribute exactly zero.
    """
    w = asdict(weights)
    terms = {k: 0.0 for k in TERMS}
    gt, gs = np.zeros(3), np.zeros(3)
    total = 0.0
    for name, res in term_results.items():
        if name not in w:
            raise KeyError(f"unknown loss term {name!r}")
        if res is None:
            continue
        value, g_t, g_s = res
        terms[name] = float(value)
        total += w[name] * float(value)
        gt = gt + w[name] * np.asarray(g_t, dtype=float)
        gs = gs + w[name] * np.asarray(g_s, dtype=float)
    return LossBreakdown(terms, total, gt, gs)


# ---------------------------------------------------------------- view batches


@dataclass
class ViewObs:
    """Observation of the object in one frame, cropped to a render grid.

    ``g_ik``/``v`` carry poses from the reference frame i into this frame.
    ``image`` is the full grayscale frame in [0, 1] (needed for photometric terms).
    """

    frame: int
    cfg: RenderConfig
    mask: MaskObs
    g_ik: SE3Transform = field(default_factory=SE3Transform.identity)
    v: np.ndarray = field(default_factory=lambda: np.zeros(3))
    image: Optional[np.ndarray] = None


class LossProblem:
    """All observations needed to score one object pose at reference frame i.

    ``ref`` is the frame-i view (silhouette + photometric source); ``others`` are
    the sampled neighbour views. Yaw and embedding are fixed for the problem's
    lifetime; translation and size are the free variables.
    """

    def __init__(
        self,
        space: ShapeSpace,
        yaw: float,
        embedding,
        intr: CameraIntrinsics,
        ref: ViewObs,
        others: Sequence[ViewObs] = (),
        depth_target=None,
        priors: Priors | None = None,
        weights: LossWeights | None = None,
        photo: bool = True,
    ):
        self.space = space
        self.intr = intr
        self.ref = ref
        self.others = list(others)
        self.priors = priors or Priors()
        self.weights = weights or LossWeights()
        self.depth_target = None if depth_target is None else torch.as_tensor(np.asarray(depth_target, float), dtype=DTYPE)
        self.yaw = float(yaw)
        self.embedding = torch.as_tensor(np.asarray(embedding, float).reshape(-1), dtype=DTYPE)
        self.faces = torch.as_tensor(space.faces)
        views = [ref] + self.others
        self.sigma_px2 = sigma_pixels(ref.cfg.sigma, intr)
        self.near = ref.cfg.near
        self.far = ref.cfg.far
        # padded batch of render grids; padding pixels are unlabelled
        grids = [v.cfg.pixel_grid() for v in views]
        p_max = max(len(g) for g in grids)
        self.n_views = len(views)
        grid = np.zeros((len(views), p_max, 2))
        fg = np.zeros((len(views), p_max))
        bg = np.zeros((len(views), p_max))
        for b, (v, g) in enumerate(zip(views, grids)):
            grid[b, : len(g)] = g
            grid[b, len(g):] = g[0]
            fg[b, : len(g)] = v.mask.fg.ravel()
            bg[b, : len(g)] = v.mask.bg.ravel()
        self.grid = torch.as_tensor(grid, dtype=DTYPE)
        self.fg = torch.as_tensor(fg, dtype=DTYPE)
        self.bg = torch.as_tensor(bg, dtype=DTYPE)
        self.n_lab = (self.fg + self.bg).sum(1)
        rots = np.stack([v.g_ik.rotation for v in views])
        trans = np.stack([v.g_ik.translation + np.asarray(v.v, float) for v in views])
        self.rot = torch.as_tensor(rots, dtype=DTYPE)
        self.trans = torch.as_tensor(trans, dtype=DTYPE)
        self.yaws = torch.as_tensor(
            [self.yaw + math.atan2(r[0, 2] - r[2, 0], r[0, 0] + r[2, 2]) for r in rots], dtype=DTYPE
        )
        self.photo_ready = photo and ref.image is not None and any(v.image is not None for v in self.others)
        if self.photo_ready:
            # photometric source pixels: labelled foreground of the reference crop
            gi = grids[0][ref.mask.fg.ravel()]
            img_i = np.asarray(ref.image, float)
            ui = np.clip(np.round(gi[:, 0]).astype(int), 0, img_i.shape[1] - 1)
            vi = np.clip(np.round(gi[:, 1]).astype(int), 0, img_i.shape[0] - 1)
            self.ref_grid = torch.as_tensor(gi, dtype=DTYPE)
            self.ref_intensity = torch.as_tensor(img_i[vi, ui], dtype=DTYPE)
            idx = [b for b, v in enumerate(self.others, start=1) if v.image is not None]
            shapes = {np.shape(self.others[b - 1].image) for b in idx}
            if len(shapes) != 1:
                raise ValueError("neighbour images must share one size")
            self.photo_idx = torch.as_tensor(idx)
            self.photo_images = torch.as_tensor(
                np.stack([np.asarray(self.others[b - 1].image, float) for b in idx])[:, None], dtype=DTYPE
            )

        self._prepare_numpy()

    # numpy fast path ----------------------------------------------------------

    def _prepare_numpy(self):
        """Constant arrays for the hand-differentiated evaluation used by the optimiser."""
        base = self.space.mean_vertices + (
            np.tensordot(self.embedding.numpy(), self.space.basis, axes=1) if self.space.dim else 0.0
        )
        self.np_base = np.ascontiguousarray(base, dtype=float)
        self.np_faces = np.asarray(self.space.faces)
        self.np_rot = self.rot.numpy()
        self.np_trans = self.trans.numpy()
        self.np_m = np.stack([_rot_y_np(float(y)) for y in self.yaws])  # per-view object rotation
        self.np_grid = np.ascontiguousarray(self.grid.numpy())
        self.np_fg = self.fg.numpy()
        self.np_bg = self.bg.numpy()
        self.np_lab = (self.np_fg + self.np_bg) > 0
        self.np_nlab = np.maximum(self.n_lab.numpy(), 1.0)
        n = len(self.np_base)
        self.np_scatter = np.zeros((n, self.np_faces.size))
        self.np_scatter[self.np_faces.ravel(), np.arange(self.np_faces.size)] = 1.0
        if self.photo_ready:
            self.np_ref_grid = np.ascontiguousarray(self.ref_grid.numpy())
            self.np_ref_int = self.ref_intensity.numpy()
            self.np_photo_idx = self.photo_idx.numpy()
            self.np_images = self.photo_images.numpy()[:, 0]

    def _project_np(self, cam):
        intr = self.intr
        z = np.maximum(cam[..., 2], _EPS_Z)
        return np.stack([intr.fx * cam[..., 0] / z + intr.cx, intr.fy * cam[..., 1] / z + intr.cy], -1)

    def _photo_np(self, cam0, flags, want_grad=True):
        """Photometric term and its gradient w.r.t. the reference-view vertices."""
        n = len(cam0)
        g_v = np.zeros((n, 3))
        if not self.photo_ready or len(self.np_ref_grid) == 0:
            if self.photo_ready:
                flags.append("photo:no-covered-pixels")
            return 0.0, g_v
        intr = self.intr
        faces = self.np_faces
        tri = cam0[faces]  # (F,3,3)
        face_ok = (tri[..., 2] > self.near).all(-1)
        uv = self._project_np(cam0)[faces]
        fidx = _zbuffer(
            np.ascontiguousarray(uv[None]), np.ascontiguousarray(tri[..., 2][None]), face_ok[None],
            self.np_ref_grid[None], self.near, self.far,
        )[0]
        use = fidx >= 0
        if not use.any():
            flags.append("photo:no-covered-pixels")
            return 0.0, g_v
        f = fidx[use]
        px = self.np_ref_grid[use]
        ray = np.stack([(px[:, 0] - intr.cx) / intr.fx, (px[:, 1] - intr.cy) / intr.fy, np.ones(len(px))], 1)
        a, b, c = tri[f, 0], tri[f, 1], tri[f, 2]
        e1, e2 = b - a, c - a
        nrm = np.cross(e1, e2)
        num = (nrm * a).sum(1)
        den = (nrm * ray).sum(1)
        d = num / den
        pts = ray * d[:, None]
        i_ref = self.np_ref_int[use]
        total = 0.0
        g_pts = np.zeros_like(pts)
        h, w = self.np_images.shape[1:]
        for j, bview in enumerate(self.np_photo_idx):
            r, tr = self.np_rot[bview], self.np_trans[bview]
            pk = pts @ r.T + tr
            front = pk[:, 2] > self.near
            z = np.where(front, pk[:, 2], 1.0)
            u = intr.fx * pk[:, 0] / z + intr.cx
            v = intr.fy * pk[:, 1] / z + intr.cy
            ok = front & (u >= 0) & (u <= w - 1) & (v >= 0) & (v <= h - 1)
            n_ok = int(ok.sum())
            if n_ok == 0:
                flags.append(f"photo:view{int(bview)}-out-of-frame")
                continue
            img = self.np_images[j]
            uc, vc = np.clip(u, 0, w - 1), np.clip(v, 0, h - 1)
            u0 = np.minimum(np.floor(uc), w - 2).astype(int)
            v0 = np.minimum(np.floor(vc), h - 2).astype(int)
            fu, fv = uc - u0, vc - v0
            i00, i01 = img[v0, u0], img[v0, u0 + 1]
            i10, i11 = img[v0 + 1, u0], img[v0 + 1, u0 + 1]
            val = (i00 * (1 - fu) + i01 * fu) * (1 - fv) + (i10 * (1 - fu) + i11 * fu) * fv
            res = i_ref - val
            ares = np.abs(res)
            quad = ares < PHOTO_DELTA
            lval = np.where(quad, 0.5 * res * res / PHOTO_DELTA, ares - 0.5 * PHOTO_DELTA)
            total += float(lval[ok].sum() / n_ok)
            if not want_grad:
                continue
            g_val = -np.where(quad, res / PHOTO_DELTA, np.sign(res)) * ok / n_ok
            g_u = g_val * ((i01 - i00) * (1 - fv) + (i11 - i10) * fv)
            g_vv = g_val * ((i10 - i00) * (1 - fu) + (i11 - i01) * fu)
            g_pk = np.stack(
                [g_u * intr.fx / z, g_vv * intr.fy / z, -(g_u * intr.fx * pk[:, 0] + g_vv * intr.fy * pk[:, 1]) / (z * z)],
                1,
            )
            g_pts += g_pk @ r
        if want_grad:
            g_d = (g_pts * ray).sum(1)
            g_n = g_d[:, None] * (a - d[:, None] * ray) / den[:, None]
            g_e1 = np.cross(e2, g_n)
            g_e2 = np.cross(g_n, e1)
            g_a = g_d[:, None] * nrm / den[:, None] - g_e1 - g_e2
            ids = faces[f]
            for k in range(3):
                g_v[:, k] = (
                    np.bincount(ids[:, 0], g_a[:, k], n)
                    + np.bincount(ids[:, 1], g_e1[:, k], n)
                    + np.bincount(ids[:, 2], g_e2[:, k], n)
                )
        return total, g_v

    def evaluate_np(self, t_c, size, weights: LossWeights | None = None, want_grad: bool = True) -> LossBreakdown:
        """Same quantities as :meth:`evaluate`, with hand-derived gradients (no autograd)."""
        w = asdict(weights or self.weights)
        t = np.asarray(t_c, dtype=float)
        sz = np.asarray(size, dtype=float)
        flags: list = []
        scale = sz[[2, 0, 1]]
        verts = self.np_base * scale
        t_views = t @ self.np_rot.transpose(0, 2, 1) + self.np_trans
        cam = np.einsum("nj,bij->bni", verts, self.np_m) + t_views[:, None]
        tri_uv = np.ascontiguousarray(self._project_np(cam)[:, self.np_faces])
        face_ok = np.ascontiguousarray((cam[..., 2][:, self.np_faces] > self.near).all(-1))
        prob = _sil_forward(tri_uv, face_ok, self.np_grid, self.sigma_px2)
        p = np.clip(prob, EPS_PROB, 1.0 - EPS_PROB)
        q = p * self.np_fg + (1.0 - p) * self.np_bg
        nll = np.where(self.np_lab, -np.log(np.where(self.np_lab, q, 1.0)), 0.0)
        bce = nll.sum(1) / self.np_nlab
        terms = {
            "sil": float(bce[0]),
            "mv_sil": float(bce[1:].sum()) if self.n_views > 1 else 0.0,
            "size": float(((sz - np.asarray(self.priors.size_mean)) ** 2).sum()),
            "y": float((t[1] + sz[0] / 2.0 - self.priors.y_plane) ** 2),
        }
        r0 = _rot_y_np(self.yaw)
        centre = verts.mean(0) @ r0.T + t
        if self.depth_target is not None:
            dt = self.depth_target.numpy()
            terms["depth"] = float(((centre - dt) ** 2).sum())
        else:
            terms["depth"] = 0.0
            flags.append("depth:gated")
        photo, g_ref = self._photo_np(cam[0], flags, want_grad)
        terms["photo"] = photo
        total = float(sum(w[k] * terms[k] for k in TERMS))
        g_t = np.zeros(3)
        g_s = np.zeros(3)
        if want_grad:
            wv = np.full(self.n_views, w["mv_sil"])
            wv[0] = w["sil"]
            inside = (prob >= EPS_PROB) & (prob <= 1.0 - EPS_PROB)
            cot = np.where(self.np_lab & inside, (-self.np_fg / p + self.np_bg / (1.0 - p)), 0.0)
            cot = cot * (wv / self.np_nlab)[:, None]
            g_tri = _sil_backward(tri_uv, face_ok, self.np_grid, self.sigma_px2, prob, np.ascontiguousarray(cot))
            g_uv = np.einsum("nk,bkd->bnd", self.np_scatter, g_tri.reshape(self.n_views, -1, 2))
            zc = cam[..., 2]
            zc_ok = zc > _EPS_Z
            zs = np.maximum(zc, _EPS_Z)
            intr = self.intr
            g_cam = np.stack(
                [
                    g_uv[..., 0] * intr.fx / zs,
                    g_uv[..., 1] * intr.fy / zs,
                    np.where(zc_ok, -(g_uv[..., 0] * intr.fx * cam[..., 0] + g_uv[..., 1] * intr.fy * cam[..., 1]) / (zs * zs), 0.0),
                ],
                -1,
            )
            g_cam[0] += w["photo"] * g_ref
            g_t += np.einsum("bi,bij->j", g_cam.sum(1), self.np_rot)
            g_scale = np.einsum("bni,bij,nj->j", g_cam, self.np_m, self.np_base)
            if self.depth_target is not None:
                g_c = 2.0 * w["depth"] * (centre - dt)
                g_t += g_c
                g_scale += (g_c @ r0) * self.np_base.mean(0)
            g_s += g_scale[[1, 2, 0]]
            ry = 2.0 * w["y"] * (t[1] + sz[0] / 2.0 - self.priors.y_plane)
            g_t[1] += ry
            g_s[0] += 0.5 * ry
            g_s += 2.0 * w["size"] * (sz - np.asarray(self.priors.size_mean))
        return LossBreakdown(terms, total, g_t, g_s, flags)

    # torch pieces -----------------------------------------------------------

    def vertices(self, size: torch.Tensor) -> torch.Tensor:
        return decode_vertices(self.space, self.embedding, size)

    def silhouettes(self, verts: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        t_views = t @ self.rot.transpose(-1, -2) + self.trans  # (B,3)
        vc = posed_vertices(verts, self.yaws, t_views)
        return soft_silhouette(vc, self.faces, self.grid, self.intr, self.sigma_px2, self.near)

    def bce_per_view(self, prob: torch.Tensor) -> torch.Tensor:
        p = prob.clamp(EPS_PROB, 1.0 - EPS_PROB)
        q = p * self.fg + (1.0 - p) * self.bg
        lab = (self.fg + self.bg) > 0
        nll = torch.where(lab, -torch.log(torch.where(lab, q, torch.ones_like(q))), torch.zeros_like(q))
        return nll.sum(1) / self.n_lab.clamp_min(1.0)

    def photometric(self, verts: torch.Tensor, t: torch.Tensor, flags: list) -> torch.Tensor:
        zero = t.sum() * 0.0
        if not self.photo_ready or len(self.ref_grid) == 0:
            if self.photo_ready:
                flags.append("photo:no-covered-pixels")
            return zero
        vc = posed_vertices(verts, torch.tensor(self.yaw, dtype=DTYPE), t).unsqueeze(0)
        depth, valid, _ = hard_depth(vc, self.faces, self.ref_grid.unsqueeze(0), self.intr, self.near, self.far)
        use = valid[0]
        if not bool(use.any()):
            flags.append("photo:no-covered-pixels")
            return zero
        d = depth[0][use]
        uv = self.ref_grid[use]
        intr = self.intr
        pts = torch.stack([(uv[:, 0] - intr.cx) / intr.fx * d, (uv[:, 1] - intr.cy) / intr.fy * d, d], -1)
        i_ref = self.ref_intensity[use]
        rot = self.rot[self.photo_idx]  # (V,3,3)
        pk = pts.unsqueeze(0) @ rot.transpose(-1, -2) + self.trans[self.photo_idx].unsqueeze(1)  # (V,K,3)
        front = pk[..., 2] > self.near
        z = torch.where(front, pk[..., 2], torch.ones_like(pk[..., 2]))
        u = intr.fx * pk[..., 0] / z + intr.cx
        v = intr.fy * pk[..., 1] / z + intr.cy
        h, w = self.photo_images.shape[-2:]
        ok = front & (u >= 0) & (u <= w - 1) & (v >= 0) & (v <= h - 1)
        g = torch.stack([u / (w - 1) * 2.0 - 1.0, v / (h - 1) * 2.0 - 1.0], -1).unsqueeze(1)  # (V,1,K,2)
        val = torch.nn.functional.grid_sample(
            self.photo_images, g, mode="bilinear", padding_mode="border", align_corners=True
        )[:, 0, 0]
        okf = ok.to(DTYPE)
        n_ok = okf.sum(1)
        for b in torch.nonzero(n_ok == 0).flatten().tolist():
            flags.append(f"photo:view{int(self.photo_idx[b])}-out-of-frame")
        per_view = (smooth_l1(i_ref.unsqueeze(0) - val) * okf).sum(1) / n_ok.clamp_min(1.0)
        return per_view.sum()

    def term_tensors(self, t: torch.Tensor, size: torch.Tensor, flags: list) -> Dict[str, torch.Tensor]:
        verts = self.vertices(size)
        prob = self.silhouettes(verts, t)
        bce = self.bce_per_view(prob)
        zero = t.sum() * 0.0
        out = {
            "sil": bce[0],
            "mv_sil": bce[1:].sum() if self.n_views > 1 else zero,
            "photo": self.photometric(verts, t, flags),
            "size": ((size - torch.as_tensor(self.priors.size_mean, dtype=DTYPE)) ** 2).sum(),
            "y": (t[1] + size[0] / 2.0 - self.priors.y_plane) ** 2,
        }
        if self.depth_target is not None:
            centre = verts.mean(0) @ torch.as_tensor(
                _rot_y_np(self.yaw).T, dtype=DTYPE
            ) + t
            out["depth"] = ((centre - self.depth_target) ** 2).sum()
        else:
            out["depth"] = zero
        return out

    def evaluate(self, t_c, size, weights: LossWeights | None = None, per_term_grads: bool = False) -> LossBreakdown:
        """Weighted total, term values and gradients at (t_c, size)."""
        w = asdict(weights or self.weights)
        t = torch.as_tensor(np.asarray(t_c, float), dtype=DTYPE).requires_grad_(True)
        s = torch.as_tensor(np.asarray(size, float), dtype=DTYPE).requires_grad_(True)
        flags: list = []
        terms = self.term_tensors(t, s, flags)
        if self.depth_target is None:
            flags.append("depth:gated")
        total = sum(w[k] * terms[k] for k in TERMS)
        if total.requires_grad:
            gt, gs = torch.autograd.grad(total, (t, s), allow_unused=True)
        else:
            gt = gs = None
        gt = np.zeros(3) if gt is None else gt.numpy().copy()
        gs = np.zeros(3) if gs is None else gs.numpy().copy()
        return LossBreakdown({k: float(terms[k].detach()) for k in TERMS}, float(total.detach()), gt, gs, flags)

    def term_gradient(self, name: str, t_c, size):
        """(value, grad_t, grad_size) of one unweighted term."""
        t = torch.as_tensor(np.asarray(t_c, float), dtype=DTYPE).requires_grad_(True)
        s = torch.as_tensor(np.asarray(size, float), dtype=DTYPE).requires_grad_(True)
        val = self.term_tensors(t, s, [])[name]
        if not val.requires_grad:
            return float(val), np.zeros(3), np.zeros(3)
        gt, gs = torch.autograd.grad(val, (t, s), allow_unused=True)
        gt = np.zeros(3) if gt is None else gt.numpy().copy()
        gs = np.zeros(3) if gs is None else gs.numpy().copy()
        return float(val.detach()), gt, gs


def _rot_y_np(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def mv_sil_loss(problem: LossProblem, t_c, size):
    """Sum over neighbour views of the silhouette BCE of the warped pose."""
    return problem.term_gradient("mv_sil", t_c, size)


def photo_loss(problem: LossProblem, t_c, size):
    """Photometric consistency of rendered-depth pixels warped into the neighbour views."""
    return problem.term_gradient("photo", t_c, size)
