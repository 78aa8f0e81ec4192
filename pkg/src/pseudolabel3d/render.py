"""Differentiable soft-silhouette and z-buffer depth rendering of posed meshes.

Silhouettes use soft aggregation: each face contributes
``p_f = sigmoid(delta * d^2 / sigma)`` where ``d`` is the distance from the pixel
to the projected triangle boundary and ``delta`` is +1 inside / -1 outside; the
pixel probability is ``1 - prod_f (1 - p_f)``. Distances are measured in
normalised device units, where the shorter image side spans [-1, 1], so ``sigma``
does not depend on image resolution or on the render crop.

Depth uses hard nearest-face selection with perspective-correct barycentric
interpolation; gradients flow through the interpolated depth only.

All tensors are float64. Rendering is done on a regular pixel grid
``(u0 + stride * j, v0 + stride * i)`` so that losses can be evaluated on a
subsampled crop around the object.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from numba import njit

from .geom import CameraIntrinsics, ObjectPose
from .shape import Mesh, ShapeSpace, decode_vertices

DTYPE = torch.float64
_EPS = 1e-12
# |d^2 / sigma| beyond which a face term is saturated (contribution < 1e-17)
_CUT = 40.0


@dataclass(frozen=True)
class RenderConfig:
    width: int
    height: int
    sigma: float = 1e-4
    near: float = 0.1
    far: float = 200.0
    u0: float = 0.0
    v0: float = 0.0
    stride: float = 1.0

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if not (0 < self.near < self.far):
            raise ValueError("need 0 < near < far")
        if self.width < 1 or self.height < 1 or self.stride <= 0:
            raise ValueError("render grid must be non-empty")

    def pixel_grid(self) -> np.ndarray:
        """(height*width, 2) array of (u, v) pixel coordinates, row-major."""
        us = self.u0 + self.stride * np.arange(self.width)
        vs = self.v0 + self.stride * np.arange(self.height)
        uu, vv = np.meshgrid(us, vs)
        return np.stack([uu.ravel(), vv.ravel()], axis=1)


@dataclass(frozen=True)
class SilhouetteMap:
    prob: np.ndarray  # (H, W) in [0, 1]
    empty: bool = False


@dataclass(frozen=True)
class DepthMap:
    depth: np.ndarray  # (H, W) meters, NaN where invalid
    empty: bool = False

    @property
    def valid(self) -> np.ndarray:
        return np.isfinite(self.depth)


def sigma_pixels(sigma: float, intr: CameraIntrinsics) -> float:
    half = 0.5 * min(intr.width, intr.height)
    return sigma * half * half


def _t(x) -> torch.Tensor:
    return torch.as_tensor(np.asarray(x, dtype=float), dtype=DTYPE)


def rot_y_torch(yaw: torch.Tensor) -> torch.Tensor:
    c, s = torch.cos(yaw), torch.sin(yaw)
    o, z = torch.ones_like(c), torch.zeros_like(c)
    return torch.stack(
        [torch.stack([c, z, s], -1), torch.stack([z, o, z], -1), torch.stack([-s, z, c], -1)], -2
    )


def posed_vertices(verts_obj: torch.Tensor, yaw: torch.Tensor, t_c: torch.Tensor) -> torch.Tensor:
    """Object-frame vertices (N,3) -> camera frame; ``yaw``/``t_c`` may carry a batch dim."""
    r = rot_y_torch(yaw)
    return verts_obj @ r.transpose(-1, -2) + t_c.unsqueeze(-2)


def project_torch(pts: torch.Tensor, intr: CameraIntrinsics) -> torch.Tensor:
    z = pts[..., 2].clamp_min(_EPS)
    return torch.stack([intr.fx * pts[..., 0] / z + intr.cx, intr.fy * pts[..., 1] / z + intr.cy], -1)


@njit(cache=True)
def _seg_closest(px, py, ax, ay, bx, by):
    abx, aby = bx - ax, by - ay
    den = abx * abx + aby * aby + 1e-12
    t = ((px - ax) * abx + (py - ay) * aby) / den
    if t < 0.0:
        t = 0.0
    elif t > 1.0:
        t = 1.0
    qx, qy = ax + t * abx, ay + t * aby
    return (px - qx) * (px - qx) + (py - qy) * (py - qy), t, px - qx, py - qy


@njit(cache=True)
def _face_eval(tri, px, py):
    """Squared distance to the triangle boundary, inside flag, nearest edge data."""
    ax, ay, bx, by, cx, cy = tri[0, 0], tri[0, 1], tri[1, 0], tri[1, 1], tri[2, 0], tri[2, 1]
    e0 = (bx - ax) * (py - ay) - (by - ay) * (px - ax)
    e1 = (cx - bx) * (py - by) - (cy - by) * (px - bx)
    e2 = (ax - cx) * (py - cy) - (ay - cy) * (px - cx)
    inside = (e0 >= 0 and e1 >= 0 and e2 >= 0) or (e0 <= 0 and e1 <= 0 and e2 <= 0)
    d2, t, dx, dy = _seg_closest(px, py, ax, ay, bx, by)
    edge = 0
    d2b, tb, dxb, dyb = _seg_closest(px, py, bx, by, cx, cy)
    if d2b < d2:
        d2, t, dx, dy, edge = d2b, tb, dxb, dyb, 1
    d2c, tc, dxc, dyc = _seg_closest(px, py, cx, cy, ax, ay)
    if d2c < d2:
        d2, t, dx, dy, edge = d2c, tc, dxc, dyc, 2
    return d2, inside, edge, t, dx, dy


@njit(cache=True)
def _face_boxes(tri_uv, margin):
    nb, nf = tri_uv.shape[0], tri_uv.shape[1]
    out = np.empty((nb, nf, 4))
    for b in range(nb):
        for f in range(nf):
            out[b, f, 0] = min(tri_uv[b, f, 0, 0], tri_uv[b, f, 1, 0], tri_uv[b, f, 2, 0]) - margin
            out[b, f, 1] = max(tri_uv[b, f, 0, 0], tri_uv[b, f, 1, 0], tri_uv[b, f, 2, 0]) + margin
            out[b, f, 2] = min(tri_uv[b, f, 0, 1], tri_uv[b, f, 1, 1], tri_uv[b, f, 2, 1]) - margin
            out[b, f, 3] = max(tri_uv[b, f, 0, 1], tri_uv[b, f, 1, 1], tri_uv[b, f, 2, 1]) + margin
    return out


@njit(cache=True)
def _sil_forward(tri_uv, face_ok, grid, sigma):
    nb, nf = face_ok.shape
    npx = grid.shape[1]
    boxes = _face_boxes(tri_uv, np.sqrt(_CUT * sigma))
    prob = np.zeros((nb, npx))
    for b in range(nb):
        for p in range(npx):
            px, py = grid[b, p, 0], grid[b, p, 1]
            s = 0.0
            saturated = False
            for f in range(nf):
                if not face_ok[b, f]:
                    continue
                bx = boxes[b, f]
                if px < bx[0] or px > bx[1] or py < bx[2] or py > bx[3]:
                    continue
                d2, inside, _, _, _, _ = _face_eval(tri_uv[b, f], px, py)
                x = d2 / sigma if inside else -d2 / sigma
                if x > _CUT:
                    saturated = True
                    break
                if x < -_CUT:
                    continue
                s += max(x, 0.0) + np.log1p(np.exp(-abs(x)))
            prob[b, p] = 1.0 if saturated else -np.expm1(-s)
    return prob


@njit(cache=True)
def _sil_backward(tri_uv, face_ok, grid, sigma, prob, cot):
    nb, nf = face_ok.shape
    npx = grid.shape[1]
    boxes = _face_boxes(tri_uv, np.sqrt(_CUT * sigma))
    grad = np.zeros(tri_uv.shape)
    for b in range(nb):
        for p in range(npx):
            g_s = cot[b, p] * (1.0 - prob[b, p])
            if g_s == 0.0:
                continue
            px, py = grid[b, p, 0], grid[b, p, 1]
            for f in range(nf):
                if not face_ok[b, f]:
                    continue
                bx = boxes[b, f]
                if px < bx[0] or px > bx[1] or py < bx[2] or py > bx[3]:
                    continue
                d2, inside, edge, t, dx, dy = _face_eval(tri_uv[b, f], px, py)
                sgn = 1.0 if inside else -1.0
                x = sgn * d2 / sigma
                if x > _CUT or x < -_CUT:
                    continue
                g_d2 = g_s / (1.0 + np.exp(-x)) * sgn / sigma
                ia, ib = edge, (edge + 1) % 3
                grad[b, f, ia, 0] -= 2.0 * g_d2 * dx * (1.0 - t)
                grad[b, f, ia, 1] -= 2.0 * g_d2 * dy * (1.0 - t)
                grad[b, f, ib, 0] -= 2.0 * g_d2 * dx * t
                grad[b, f, ib, 1] -= 2.0 * g_d2 * dy * t
    return grad


@njit(cache=True)
def _zbuffer(tri_uv, tri_z, face_ok, grid, near, far):
    nb, nf = face_ok.shape
    npx = grid.shape[1]
    boxes = _face_boxes(tri_uv, 0.0)
    face = np.full((nb, npx), -1, dtype=np.int64)
    for b in range(nb):
        for p in range(npx):
            px, py = grid[b, p, 0], grid[b, p, 1]
            best = np.inf
            for f in range(nf):
                if not face_ok[b, f]:
                    continue
                bx = boxes[b, f]
                if px < bx[0] or px > bx[1] or py < bx[2] or py > bx[3]:
                    continue
                tri = tri_uv[b, f]
                ax, ay, bx_, by, cx, cy = tri[0, 0], tri[0, 1], tri[1, 0], tri[1, 1], tri[2, 0], tri[2, 1]
                area = (bx_ - ax) * (cy - ay) - (by - ay) * (cx - ax)
                if abs(area) <= 1e-12:
                    continue
                w0 = ((cx - bx_) * (py - by) - (cy - by) * (px - bx_)) / area
                w1 = ((ax - cx) * (py - cy) - (ay - cy) * (px - cx)) / area
                w2 = ((bx_ - ax) * (py - ay) - (by - ay) * (px - ax)) / area
                if w0 < 0 or w1 < 0 or w2 < 0:
                    continue
                zinv = w0 / tri_z[b, f, 0] + w1 / tri_z[b, f, 1] + w2 / tri_z[b, f, 2]
                if zinv <= 0:
                    continue
                d = 1.0 / zinv
                if d < best:
                    best = d
                    face[b, p] = f
            if not (near <= best <= far):
                face[b, p] = -1
    return face


@njit(cache=True)
def raster_image(tri_uv, tri_z, width, height, near, far):
    """Face-major hard z-buffer over a full (height, width) pixel raster.

    Same inside test and tie rule (earlier face wins) as the grid z-buffer.
    Returns the winning face index per pixel, -1 where nothing is hit.
    """
    nf = tri_uv.shape[0]
    face = np.full((height, width), -1, dtype=np.int64)
    zbuf = np.full((height, width), np.inf)
    for f in range(nf):
        ax, ay = tri_uv[f, 0, 0], tri_uv[f, 0, 1]
        bx, by = tri_uv[f, 1, 0], tri_uv[f, 1, 1]
        cx, cy = tri_uv[f, 2, 0], tri_uv[f, 2, 1]
        area = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
        if abs(area) <= 1e-12:
            continue
        u0 = max(int(np.ceil(min(ax, bx, cx))), 0)
        u1 = min(int(np.floor(max(ax, bx, cx))), width - 1)
        v0 = max(int(np.ceil(min(ay, by, cy))), 0)
        v1 = min(int(np.floor(max(ay, by, cy))), height - 1)
        for v in range(v0, v1 + 1):
            py = float(v)
            for u in range(u0, u1 + 1):
                px = float(u)
                w0 = ((cx - bx) * (py - by) - (cy - by) * (px - bx)) / area
                w1 = ((ax - cx) * (py - cy) - (ay - cy) * (px - cx)) / area
                w2 = ((bx - ax) * (py - ay) - (by - ay) * (px - ax)) / area
                if w0 < 0 or w1 < 0 or w2 < 0:
                    continue
                zinv = w0 / tri_z[f, 0] + w1 / tri_z[f, 1] + w2 / tri_z[f, 2]
                if zinv <= 0:
                    continue
                d = 1.0 / zinv
                if d < zbuf[v, u] and near <= d <= far:
                    zbuf[v, u] = d
                    face[v, u] = f
    return face


class _SoftSilhouette(torch.autograd.Function):
    @staticmethod
    def forward(ctx, tri_uv, face_ok, grid, sigma):
        tri = tri_uv.detach().numpy()
        ok = face_ok.numpy()
        g = grid.detach().numpy()
        prob = _sil_forward(tri, ok, g, sigma)
        ctx.save_for_backward(tri_uv, face_ok, grid)
        ctx.sigma = sigma
        ctx.prob = prob
        return torch.from_numpy(prob)

    @staticmethod
    def backward(ctx, grad_prob):
        tri_uv, face_ok, grid = ctx.saved_tensors
        g = _sil_backward(
            tri_uv.detach().numpy(), face_ok.numpy(), grid.detach().numpy(), ctx.sigma, ctx.prob,
            grad_prob.detach().numpy().astype(np.float64),
        )
        return torch.from_numpy(g), None, None, None


def _face_data(verts_cam: torch.Tensor, faces: torch.Tensor, intr: CameraIntrinsics, near: float):
    zv = verts_cam[..., 2]
    face_ok = (zv[:, faces] > near).all(-1)
    uv = project_torch(verts_cam, intr)
    return uv[:, faces], zv[:, faces], face_ok


def soft_silhouette(
    verts_cam: torch.Tensor,
    faces: torch.Tensor,
    grid: torch.Tensor,
    intr: CameraIntrinsics,
    sigma_px2: float,
    near: float,
) -> torch.Tensor:
    """verts_cam (B,N,3), faces (F,3), grid (B,P,2) -> probabilities (B,P)."""
    tri_uv, _, face_ok = _face_data(verts_cam, faces, intr, near)
    return _SoftSilhouette.apply(tri_uv.contiguous(), face_ok.contiguous(), grid.contiguous(), float(sigma_px2))


def hard_depth(
    verts_cam: torch.Tensor,
    faces: torch.Tensor,
    grid: torch.Tensor,
    intr: CameraIntrinsics,
    near: float,
    far: float,
):
    """Nearest-surface depth on the grid. Returns (depth (B,P), valid (B,P), face index (B,P)).

    Face selection is a hard z-test; depth of the selected face is recomputed in
    torch from screen-space barycentrics so gradients reach the vertices.
    """
    tri_uv, tri_z, face_ok = _face_data(verts_cam, faces, intr, near)
    fidx = torch.from_numpy(
        _zbuffer(
            tri_uv.detach().numpy(), tri_z.detach().numpy(), face_ok.numpy(), grid.detach().numpy(), near, far
        )
    )
    valid = fidx >= 0
    depth = torch.zeros(fidx.shape, dtype=verts_cam.dtype)
    if bool(valid.any()):
        bi, pi = torch.nonzero(valid, as_tuple=True)
        fi = fidx[bi, pi]
        tri = tri_uv[bi, fi]  # (K,3,2)
        z = tri_z[bi, fi]  # (K,3)
        p = grid[bi, pi]
        a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
        area = _cross2(b - a, c - a)
        w0 = _cross2(c - b, p - b) / area
        w1 = _cross2(a - c, p - c) / area
        w2 = _cross2(b - a, p - a) / area
        d = 1.0 / (w0 / z[:, 0] + w1 / z[:, 1] + w2 / z[:, 2])
        depth = depth.index_put((bi, pi), d)
    return depth, valid, fidx


def _cross2(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]


def _pose_tensors(pose: ObjectPose):
    return _t(pose.t_c), torch.tensor(float(pose.yaw), dtype=DTYPE)


def _grid_tensor(cfg: RenderConfig) -> torch.Tensor:
    return _t(cfg.pixel_grid()).unsqueeze(0)


def _behind(verts_cam: torch.Tensor, cfg: RenderConfig) -> bool:
    return bool((verts_cam[..., 2] <= cfg.near).all())


def render_silhouette(mesh: Mesh, obj_in_cam: ObjectPose, intr: CameraIntrinsics, cfg: RenderConfig) -> SilhouetteMap:
    t, yaw = _pose_tensors(obj_in_cam)
    with torch.no_grad():
        vc = posed_vertices(_t(mesh.vertices), yaw, t).unsqueeze(0)
        if _behind(vc, cfg):
            return SilhouetteMap(np.zeros((cfg.height, cfg.width)), empty=True)
        prob = soft_silhouette(vc, torch.as_tensor(mesh.faces), _grid_tensor(cfg), intr, sigma_pixels(cfg.sigma, intr), cfg.near)
    return SilhouetteMap(prob[0].numpy().reshape(cfg.height, cfg.width))


def render_depth(mesh: Mesh, obj_in_cam: ObjectPose, intr: CameraIntrinsics, cfg: RenderConfig) -> DepthMap:
    t, yaw = _pose_tensors(obj_in_cam)
    with torch.no_grad():
        vc = posed_vertices(_t(mesh.vertices), yaw, t).unsqueeze(0)
        if _behind(vc, cfg):
            return DepthMap(np.full((cfg.height, cfg.width), np.nan), empty=True)
        d, valid, _ = hard_depth(vc, torch.as_tensor(mesh.faces), _grid_tensor(cfg), intr, cfg.near, cfg.far)
    out = np.where(valid[0].numpy(), d[0].numpy(), np.nan)
    return DepthMap(out.reshape(cfg.height, cfg.width))


def _vjp(space: ShapeSpace, pose: ObjectPose, intr, cfg, cotangent, channel: str) -> dict:
    cot = np.asarray(cotangent, dtype=float)
    if cot.shape != (cfg.height, cfg.width):
        raise ValueError(f"cotangent shape {cot.shape} does not match render grid {(cfg.height, cfg.width)}")
    t = _t(pose.t_c).requires_grad_(True)
    size = _t(pose.size).requires_grad_(True)
    emb = _t(pose.embedding).requires_grad_(True)
    yaw = torch.tensor(float(pose.yaw), dtype=DTYPE)
    verts = decode_vertices(space, emb, size)
    vc = posed_vertices(verts, yaw, t).unsqueeze(0)
    zero = {"t_c": np.zeros(3), "size": np.zeros(3), "embedding": np.zeros(space.dim)}
    if _behind(vc, cfg):
        return zero
    faces = torch.as_tensor(space.faces)
    grid = _grid_tensor(cfg)
    if channel == "silhouette":
        out = soft_silhouette(vc, faces, grid, intr, sigma_pixels(cfg.sigma, intr), cfg.near)
    else:
        out, _, _ = hard_depth(vc, faces, grid, intr, cfg.near, cfg.far)
    obj = (out[0] * _t(cot.ravel())).sum()
    if not obj.requires_grad:
        return zero
    gt, gs, ge = torch.autograd.grad(obj, (t, size, emb), allow_unused=True)
    as_np = lambda g, n: np.zeros(n) if g is None else g.numpy().copy()
    return {"t_c": as_np(gt, 3), "size": as_np(gs, 3), "embedding": as_np(ge, space.dim)}


def silhouette_vjp(space: ShapeSpace, obj_in_cam: ObjectPose, intr: CameraIntrinsics, cfg: RenderConfig, cotangent) -> dict:
    """Gradients of ``sum(cotangent * silhouette)`` w.r.t. t_c, size and embedding."""
    return _vjp(space, obj_in_cam, intr, cfg, cotangent, "silhouette")


def depth_vjp(space: ShapeSpace, obj_in_cam: ObjectPose, intr: CameraIntrinsics, cfg: RenderConfig, cotangent) -> dict:
    """Gradients of ``sum(cotangent * depth)`` over covered pixels."""
    return _vjp(space, obj_in_cam, intr, cfg, cotangent, "depth")


def save_debug_png(values: np.ndarray, path, vmax: float | None = None) -> None:
    """Grayscale PNG of a silhouette (``vmax=1``) or depth map; invalid pixels black."""
    from PIL import Image

    v = np.nan_to_num(np.asarray(values, dtype=float), nan=0.0)
    top = vmax if vmax is not None else (v.max() if v.size and v.max() > 0 else 1.0)
    Image.fromarray(np.clip(v / top * 255.0, 0, 255).round().astype(np.uint8)).save(path)
