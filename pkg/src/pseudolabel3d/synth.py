"""Deterministic synthetic driving sequences written in the on-disk sequence layout.

Objects are cuboids from the shape space; the camera follows a straight or
constant-turn path at a fixed height above a flat ground plane. Images carry a
smooth procedural texture (objects textured in their own frame so the pattern
moves with them), masks and depth come from an exact z-buffer.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .geom import CameraIntrinsics, ObjectPose, SE3Transform, compose, invert, rot_y, wrap_angle, yaw_of_rotation
from .kitti_io import (
    CalibRecord,
    LabelRecord,
    MaskSet,
    label_from_pose,
    location_convention,
    oxts_from_pose,
    save_depth,
    save_image,
    write_calib,
    write_label_dir,
    write_masks,
    write_oxts_record,
)
from .motion import MOVING, STATIC
from .render import raster_image
from .shape import cuboid_space, decode_vertices

LAT0, LON0 = 49.0, 8.4
MIN_VISIBLE_PIXELS = 50
MAX_LABEL_DEPTH = 60.0
GROUND_MAX_DEPTH = 80.0


@dataclass
class NoiseModel:
    sigma_t_base: float = 0.5
    sigma_t_per_m: float = 0.05
    sigma_size: float = 0.0
    sigma_yaw: float = 0.05
    dropout: float = 0.0

    def __post_init__(self):
        if min(self.sigma_t_base, self.sigma_t_per_m, self.sigma_size, self.sigma_yaw) < 0:
            raise ValueError("noise parameters must be non-negative")
        if not 0.0 <= self.dropout <= 1.0:
            raise ValueError("dropout must lie in [0, 1]")


@dataclass
class ObjectSpec:
    size: Tuple[float, float, float]  # h, w, l
    position: Tuple[float, float, float]  # world box centre at frame 0
    yaw: float = 0.0  # world heading about the vertical axis
    velocity: Tuple[float, float, float] = (0.0, 0.0, 0.0)  # world m/frame
    albedo: float = 0.6
    cls: str = "Car"

    @property
    def moving(self) -> bool:
        return float(np.linalg.norm(self.velocity)) > 0.0


@dataclass
class SceneSpec:
    n_frames: int = 20
    trajectory: str = "straight"  # or "arc"
    speed: float = 1.0  # camera m/frame
    yaw_rate: float = 0.0  # rad/frame, arc only
    camera_height: float = 1.65
    objects: List[ObjectSpec] = field(default_factory=list)
    image_size: Tuple[int, int] = (1242, 375)
    focal: float = 721.5377
    texture: str = "procedural"  # or "flat"
    noise: NoiseModel = field(default_factory=NoiseModel)
    seed: int = 0

    def __post_init__(self):
        if self.n_frames < 2:
            raise ValueError("a scene needs at least two frames")
        if self.trajectory not in ("straight", "arc"):
            raise ValueError(f"unknown trajectory {self.trajectory!r}")
        if self.texture not in ("procedural", "flat"):
            raise ValueError(f"unknown texture mode {self.texture!r}")
        self.objects = [o if isinstance(o, ObjectSpec) else ObjectSpec(**o) for o in self.objects]
        if isinstance(self.noise, dict):
            self.noise = NoiseModel(**self.noise)
        self.image_size = tuple(self.image_size)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def intrinsics(self) -> CameraIntrinsics:
        w, h = self.image_size
        return CameraIntrinsics(self.focal, self.focal, w / 2.0 - 11.5, h / 2.0 - 15.0, w, h)


def random_scene(seed: int, n_static: int = 3, n_moving: int = 2, n_frames: int = 20, noise: NoiseModel | None = None) -> SceneSpec:
    """Straight drive past parked cars, with moving cars alternating between
    the lane to the right (same direction, slightly faster) and the oncoming lane."""
    rng = np.random.default_rng(seed)
    objs = []
    placed = {-1: [], 1: []}
    while len(objs) < n_static:
        side = 1 if rng.random() < 0.5 else -1
        z = rng.uniform(14.0, 40.0)
        if any(abs(z - q) < 6.0 for q in placed[side]):
            continue
        placed[side].append(z)
        x = side * rng.uniform(5.5, 7.0)
        heading = (-math.pi / 2 if rng.random() < 0.5 else math.pi / 2) + rng.normal(0.0, 0.1)
        objs.append(_car(rng, (x, z), heading, (0.0, 0.0, 0.0)))
    for j in range(n_moving):
        if j % 2 == 0:
            z, v = rng.uniform(10.0, 20.0), rng.uniform(1.2, 1.5)
            x = 2.8 + rng.uniform(-0.3, 0.3)
        else:
            z, v = rng.uniform(30.0, 45.0), -rng.uniform(0.5, 1.0)
            x = -2.8 + rng.uniform(-0.3, 0.3)
        heading = -math.pi / 2 if v > 0 else math.pi / 2
        objs.append(_car(rng, (x, z + 8.0 * (j // 2)), heading, (0.0, 0.0, v)))
    return SceneSpec(n_frames=n_frames, objects=objs, noise=noise or NoiseModel(), seed=seed)


def _car(rng, xz, heading, velocity) -> ObjectSpec:
    h = 1.53 + rng.normal(0.0, 0.06)
    w = 1.63 + rng.normal(0.0, 0.06)
    l = 3.88 + rng.normal(0.0, 0.2)
    return ObjectSpec((h, w, l), (xz[0], 1.65 - h / 2.0, xz[1]), float(heading), velocity, float(rng.uniform(0.25, 0.85)))


# ---------------------------------------------------------------- geometry


def camera_poses(spec: SceneSpec) -> List[SE3Transform]:
    poses = []
    pos = np.zeros(3)
    psi = 0.0
    rate = spec.yaw_rate if spec.trajectory == "arc" else 0.0
    for _ in range(spec.n_frames):
        poses.append(SE3Transform(rot_y(psi), pos.copy()))
        pos = pos + spec.speed * np.array([math.sin(psi), 0.0, math.cos(psi)])
        psi += rate
    return poses


def object_world(obj: ObjectSpec, frame: int) -> SE3Transform:
    return SE3Transform(rot_y(obj.yaw), np.asarray(obj.position, float) + np.asarray(obj.velocity, float) * frame)


def object_in_camera(obj: ObjectSpec, frame: int, cam: SE3Transform) -> ObjectPose:
    g = compose(invert(cam), object_world(obj, frame))
    return ObjectPose(g.translation, yaw_of_rotation(g.rotation), obj.size)


def default_calib(spec: SceneSpec) -> CalibRecord:
    intr = spec.intrinsics
    f, cx, cy = intr.fx, intr.cx, intr.cy
    p = lambda bx: np.array([f, 0, cx, bx * f, 0, f, cy, 0, 0, 0, 1, 0], float)
    mats = {
        "P0": p(0.0),
        "P1": p(-0.54),
        "P2": p(0.06),
        "P3": p(-0.47),
        "R0_rect": np.eye(3).ravel(),
        "Tr_velo_to_cam": np.array([0, -1, 0, 0, 0, 0, -1, -0.08, 1, 0, 0, -0.27], float),
        "Tr_imu_to_velo": np.array([1, 0, 0, -0.81, 0, 1, 0, 0.32, 0, 0, 1, -0.8], float),
    }
    return CalibRecord(mats, list(mats))


# ---------------------------------------------------------------- rasterisation


@dataclass
class FrameRender:
    image: np.ndarray  # (H, W, 3) in [0, 1]
    depth: np.ndarray  # (H, W), NaN = invalid
    owner: np.ndarray  # (H, W) object index or -1
    full_pixels: Dict[int, int]  # unoccluded silhouette size per rendered object


def _object_triangles(pose: ObjectPose, space, intr: CameraIntrinsics):
    verts = decode_vertices(space, pose.embedding, pose.size)
    cam = verts @ pose.rotation().T + pose.t_c
    tri = cam[space.faces]
    uv = np.stack([intr.fx * tri[..., 0] / tri[..., 2] + intr.cx, intr.fy * tri[..., 1] / tri[..., 2] + intr.cy], -1)
    return tri, uv


def _ray_plane_depth(tri, grid, intr):
    """Exact depth along each pixel ray to the plane of its triangle."""
    a = tri[:, 0]
    n = np.cross(tri[:, 1] - a, tri[:, 2] - a)
    d = np.stack([(grid[:, 0] - intr.cx) / intr.fx, (grid[:, 1] - intr.cy) / intr.fy, np.ones(len(grid))], 1)
    return (n * a).sum(1) / (n * d).sum(1), n


def render_frame(poses: Sequence[Optional[ObjectPose]], albedo: Sequence[float], intr, cam: SE3Transform, spec: SceneSpec, space=None) -> FrameRender:
    """Rasterise every posed object (None = not rendered) plus ground and sky."""
    space = space or cuboid_space()
    w, h = intr.width, intr.height
    uu, vv = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
    grid = np.stack([uu.ravel(), vv.ravel()], 1)
    tris, uvs, owners = [], [], []
    for j, p in enumerate(poses):
        if p is None:
            continue
        tri, uv = _object_triangles(p, space, intr)
        tris.append(tri)
        uvs.append(uv)
        owners += [j] * len(tri)
    depth = np.full(len(grid), np.nan)
    owner = np.full(len(grid), -1)
    intensity = np.empty(len(grid))
    full = {}
    if tris:
        tri = np.concatenate(tris)
        uv = np.concatenate(uvs)
        owners = np.asarray(owners)
        fidx = raster_image(uv, tri[..., 2], w, h, 0.1, 500.0).ravel()
        hit = fidx >= 0
        z, normal = _ray_plane_depth(tri[fidx[hit]], grid[hit], intr)
        depth[hit] = z
        owner[hit] = owners[fidx[hit]]
        for j in sorted(set(owners.tolist())):
            sel = owners == j
            full[j] = int((raster_image(uv[sel], tri[sel][..., 2], w, h, 0.1, 500.0) >= 0).sum())
    # ground plane at the camera height; the camera stays level on every trajectory
    ray_y = (grid[:, 1] - intr.cy) / intr.fy
    with np.errstate(divide="ignore"):
        zg = np.where(ray_y > 1e-9, spec.camera_height / np.maximum(ray_y, 1e-9), np.inf)
    ground = (owner < 0) & (zg <= GROUND_MAX_DEPTH)
    depth[ground] = zg[ground]

    rays = np.stack([(grid[:, 0] - intr.cx) / intr.fx, ray_y, np.ones(len(grid))], 1)
    light = cam.rotation.T @ _unit([0.3, -0.8, -0.5])
    sky = (owner < 0) & ~ground
    intensity[sky] = 0.85 - 0.3 * grid[sky, 1] / h
    # ground texture in world coordinates
    pg = rays[ground] * depth[ground][:, None]
    wg = pg @ cam.rotation.T + cam.translation
    if spec.texture == "procedural":
        intensity[ground] = (
            0.42
            + 0.12 * np.sin(2 * np.pi * wg[:, 0] / 1.7) * np.cos(2 * np.pi * wg[:, 2] / 2.3)
            + 0.06 * np.sin(2 * np.pi * (wg[:, 0] + wg[:, 2]) / 0.9)
        )
    else:
        intensity[ground] = 0.42
    if tris:
        objs = owner >= 0
        pc = rays[objs] * depth[objs][:, None]
        nrm = normal / np.linalg.norm(normal, axis=1, keepdims=True)
        shade = 0.55 + 0.45 * np.abs(nrm @ light)
        base = np.asarray(albedo, float)[owner[objs]] * shade
        if spec.texture == "procedural":
            local = np.empty_like(pc)
            for j in np.unique(owner[objs]):
                sel = owner[objs] == j
                local[sel] = (pc[sel] - poses[j].t_c) @ poses[j].rotation()
            base = base + 0.12 * np.sin(2 * np.pi * local[:, 0] / 0.6) * np.sin(2 * np.pi * local[:, 1] / 0.5 + 1.3) * np.cos(
                2 * np.pi * local[:, 2] / 0.7
            )
        intensity[objs] = base
    intensity = np.clip(intensity, 0.0, 1.0)
    img = np.repeat(intensity.reshape(h, w, 1), 3, axis=2)
    return FrameRender(img, depth.reshape(h, w), owner.reshape(h, w), full)


def _unit(v):
    v = np.asarray(v, float)
    return v / np.linalg.norm(v)


def _projected_box(pose: ObjectPose, intr):
    from .geom import box_corners

    c = box_corners(pose)
    u = intr.fx * c[:, 0] / c[:, 2] + intr.cx
    v = intr.fy * c[:, 1] / c[:, 2] + intr.cy
    return u.min(), v.min(), u.max(), v.max()


def _occlusion_level(visible: int, full: int) -> int:
    frac = visible / max(full, 1)
    if frac >= 0.8:
        return 0
    if frac >= 0.5:
        return 1
    if frac >= 0.2:
        return 2
    return 3


# ---------------------------------------------------------------- noise


def perturb(
    labels: Dict[int, List[LabelRecord]], noise: NoiseModel, seed: int
) -> Tuple[Dict[int, List[LabelRecord]], Dict[int, List[int]]]:
    """Noisy detections from ground-truth labels.

    Returns (detections per frame, for each frame the gt row of every kept detection).
    Translation noise per axis has std ``sigma_t_base + sigma_t_per_m * z``; the
    score decays with the translation error magnitude.
    """
    rng = np.random.default_rng(seed)
    out, rows = {}, {}
    for f in sorted(labels):
        dets, kept = [], []
        for row, lab in enumerate(labels[f]):
            pose = location_convention(lab)
            sig = noise.sigma_t_base + noise.sigma_t_per_m * pose.t_c[2]
            dt = rng.normal(0.0, 1.0, 3) * sig
            ds = rng.normal(0.0, 1.0, 3) * noise.sigma_size
            dyaw = rng.normal() * noise.sigma_yaw
            u = rng.random()
            drop = rng.random() < noise.dropout
            if drop:
                continue
            noisy = ObjectPose(
                pose.t_c + dt, wrap_angle(pose.yaw + dyaw), np.clip(pose.size + ds, 0.3, 8.0), pose.embedding
            )
            score = (0.9 + 0.1 * u) / (1.0 + float(np.linalg.norm(dt)))
            dets.append(label_from_pose(noisy, lab.bbox, lab.cls, round(score, 4), lab.truncated, lab.occluded))
            kept.append(row)
        out[f] = dets
        rows[f] = kept
    return out, rows


# ---------------------------------------------------------------- generation


@dataclass
class GroundTruth:
    labels: Dict[int, List[LabelRecord]]
    object_rows: Dict[int, List[int]]  # frame -> object index of each label row
    detections: Dict[int, List[LabelRecord]]
    detection_rows: Dict[int, List[int]]  # frame -> gt label row of each detection
    camera: List[SE3Transform]

    def motion(self, spec: SceneSpec) -> Dict[int, List[str]]:
        return {f: [MOVING if spec.objects[j].moving else STATIC for j in objs] for f, objs in self.object_rows.items()}


def generate(spec: SceneSpec, out_dir, space=None) -> GroundTruth:
    """Write a full sequence for ``spec`` under ``out_dir``; byte-deterministic."""
    space = space or cuboid_space()
    out = Path(out_dir)
    for sub in ("image_2", "depth", "masks", "labels", "detections", "oxts"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    intr = spec.intrinsics
    calib = default_calib(spec)
    (out / "calib.txt").write_text(write_calib(calib))
    cams = camera_poses(spec)
    t_ic = calib.imu_to_cam()
    for f, cam in enumerate(cams):
        imu = compose(invert(t_ic), compose(cam, t_ic))
        (out / "oxts" / f"{f:06d}.txt").write_text(write_oxts_record(oxts_from_pose(imu, LAT0, LON0)))

    labels, object_rows, renders = {}, {}, {}
    for f, cam in enumerate(cams):
        poses = []
        for obj in spec.objects:
            p = object_in_camera(obj, f, cam)
            corners_ok = p.t_c[2] < MAX_LABEL_DEPTH + 10 and _min_corner_depth(p) > 0.5
            poses.append(p if corners_ok else None)
        r = render_frame(poses, [o.albedo for o in spec.objects], intr, cam, spec, space)
        labs, rows = [], []
        for j, p in enumerate(poses):
            if p is None or p.t_c[2] > MAX_LABEL_DEPTH:
                continue
            visible = int((r.owner == j).sum())
            if visible < MIN_VISIBLE_PIXELS:
                continue
            u0, v0, u1, v1 = _projected_box(p, intr)
            cu0, cv0 = max(u0, 0.0), max(v0, 0.0)
            cu1, cv1 = min(u1, intr.width - 1.0), min(v1, intr.height - 1.0)
            trunc = 1.0 - (cu1 - cu0) * (cv1 - cv0) / ((u1 - u0) * (v1 - v0))
            lab = label_from_pose(p, (cu0, cv0, cu1, cv1), spec.objects[j].cls, None, round(trunc, 2), _occlusion_level(visible, r.full_pixels[j]))
            labs.append(lab)
            rows.append(j)
        labels[f] = labs
        object_rows[f] = rows
        renders[f] = r

    dets, det_rows = perturb(labels, spec.noise, spec.seed)
    write_label_dir(labels, out / "labels")
    write_label_dir(dets, out / "detections")
    for f, r in renders.items():
        save_image(r.image, out / "image_2" / f"{f:06d}.png")
        save_depth(r.depth, out / "depth" / f"{f:06d}.png")
        det_of_obj = {object_rows[f][g]: d for d, g in enumerate(det_rows[f])}
        masks = {j: r.owner == j for j in object_rows[f]}
        write_masks(MaskSet(masks, {j: det_of_obj.get(j, -1) for j in masks}), out / "masks" / f"{f:06d}")

    index = {
        "seed": spec.seed,
        "objects": [
            {
                "id": j,
                "motion_class": MOVING if o.moving else STATIC,
                "velocity": [float(v) for v in o.velocity],
                "frames": {str(f): object_rows[f].index(j) for f in sorted(object_rows) if j in object_rows[f]},
            }
            for j, o in enumerate(spec.objects)
        ],
        "scene": spec.to_dict(),
    }
    (out / "tracks.json").write_text(json.dumps(index, indent=1, sort_keys=True) + "\n")
    return GroundTruth(labels, object_rows, dets, det_rows, cams)


def _min_corner_depth(p: ObjectPose) -> float:
    from .geom import box_corners

    return float(box_corners(p)[:, 2].min())


def load_gt_motion(seq_dir) -> Dict[int, List[str]]:
    """Per-frame motion class of every ground-truth label row, from tracks.json."""
    idx = json.loads((Path(seq_dir) / "tracks.json").read_text())
    out: Dict[int, Dict[int, str]] = {}
    for o in idx["objects"]:
        for f, row in o["frames"].items():
            out.setdefault(int(f), {})[row] = o["motion_class"]
    return {f: [rows[r] for r in sorted(rows)] for f, rows in out.items()}
