"""Per-(track, frame) multi-view pose refinement and the sequence driver."""

from __future__ import annotations

import json
import logging
import math
import multiprocessing as mp
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch

from .geom import (
    CameraIntrinsics,
    GeometryError,
    ObjectPose,
    allocentric_angle,
    backproject,
    box_corners,
    frame_transform,
    wrap_angle,
    warp_pose,
)
from .kitti_io import FrameBundle, LabelRecord, label_from_pose, location_convention
from .losses import LossBreakdown, LossProblem, LossWeights, MaskObs, Priors, ViewObs
from .motion import MOVING, Detection, MotionConfig, Track, associate, displacement_vector, fit_track
from .render import RenderConfig
from .shape import ShapeSpace, cuboid_space

log = logging.getLogger(__name__)

SIZE_MIN, SIZE_MAX = 0.3, 8.0


@dataclass
class RefineConfig:
    n_views: int = 4
    window: int = 15
    steps: int = 100
    lr_translation: float = 0.02
    lr_size: float = 0.005
    beta1: float = 0.9
    beta2: float = 0.999
    depth_gate_radius: float = 6.0
    depth_range: Tuple[float, float] = (0.0, 80.0)
    patience: int = 15
    plateau_tol: float = 1e-4
    min_depth_pixels: int = 10
    mad_factor: float = 3.0
    crop_pad: float = 0.2
    max_crop_pixels: int = 900
    sigma: float = 1e-4
    photo: bool = True
    autograd: bool = False  # use the torch reference evaluation instead of the numpy path

    def __post_init__(self):
        if self.n_views < 1 or self.steps < 0:
            raise ValueError("n_views must be >= 1 and steps >= 0")
        if self.max_crop_pixels < 16:
            raise ValueError("max_crop_pixels must be at least 16")
        if self.depth_gate_radius <= 0 or self.depth_range[1] <= self.depth_range[0]:
            raise ValueError("depth gates must be positive")
        self.depth_range = tuple(self.depth_range)


@dataclass
class RefineResult:
    refined: ObjectPose
    initial: ObjectPose
    history: List[LossBreakdown] = field(default_factory=list)
    gates: Dict[str, object] = field(default_factory=dict)
    views: List[int] = field(default_factory=list)
    flags: List[str] = field(default_factory=list)
    initial_loss: Optional[float] = None
    final_loss: Optional[float] = None

    @property
    def loss_decreased(self) -> bool:
        return self.initial_loss is not None and self.final_loss is not None and self.final_loss < self.initial_loss


# ---------------------------------------------------------------- view sampling


def sample_views(track: Track, i: int, frames: Mapping[int, FrameBundle] | None, cfg: RefineConfig) -> Tuple[List[int], List[str]]:
    """Neighbour frames for refining the pose at frame ``i`` (``i`` itself excluded).

    Static objects: greedy max-min spread of allocentric angle within the window.
    Moving objects: the temporally nearest observed frames.
    Returns (frames, flags); with no usable neighbour the result is [i], flagged single-view.
    """
    if track.at(i) is None:
        raise KeyError(f"track {track.id} has no detection at frame {i}")
    cands = [
        d for d in track.detections
        if d.frame != i and abs(d.frame - i) <= cfg.window and (frames is None or d.frame in frames)
    ]
    if not cands:
        return [i], ["single-view"]
    if track.motion_class == MOVING:
        cands.sort(key=lambda d: (abs(d.frame - i), d.frame))
        return sorted(d.frame for d in cands[: cfg.n_views]), []

    def angle(d: Detection) -> float:
        try:
            return allocentric_angle(d.pose)
        except GeometryError:
            return 0.0

    chosen = [angle(track.at(i))]
    picked: List[int] = []
    pool = {d.frame: angle(d) for d in cands}
    while pool and len(picked) < cfg.n_views:
        best = max(
            pool,
            key=lambda f: (min(abs(wrap_angle(pool[f] - a)) for a in chosen), -abs(f - i), -f),
        )
        picked.append(best)
        chosen.append(pool.pop(best))
    return sorted(picked), []


# ---------------------------------------------------------------- depth cue


def depth_center(mask_fg: np.ndarray, depth: np.ndarray, intr: CameraIntrinsics, cfg: RefineConfig | None = None):
    """Mean back-projected point of the masked depth after a median/MAD outlier cut.

    Returns (point or None, reason).
    """
    cfg = cfg or RefineConfig()
    if depth is None:
        return None, "no-depth-map"
    fg = np.asarray(mask_fg, dtype=bool)
    d = np.asarray(depth, dtype=float)
    ok = fg & np.isfinite(d) & (d > 0)
    if ok.sum() < cfg.min_depth_pixels:
        return None, f"too-few-depth-pixels:{int(ok.sum())}"
    vs, us = np.nonzero(ok)
    z = d[vs, us]
    med = np.median(z)
    mad = np.median(np.abs(z - med))
    keep = np.abs(z - med) <= cfg.mad_factor * mad
    pts = backproject(intr, np.stack([us[keep], vs[keep]], 1).astype(float), z[keep])
    return pts.mean(0), "ok"


def gate_depth(center, initial: ObjectPose, cfg: RefineConfig | None = None) -> Tuple[bool, str]:
    cfg = cfg or RefineConfig()
    if center is None:
        return False, "no-center"
    c = np.asarray(center, dtype=float)
    lo, hi = cfg.depth_range
    if not (lo < c[2] < hi):
        return False, "out-of-range"
    if np.linalg.norm(c - initial.t_c) > cfg.depth_gate_radius:
        return False, "too-far-from-initial"
    return True, "accepted"


# ---------------------------------------------------------------- crops


def _bbox_of(mask: np.ndarray):
    vs, us = np.nonzero(mask)
    if len(us) == 0:
        return None
    return float(us.min()), float(vs.min()), float(us.max()), float(vs.max())


def _projected_bbox(pose: ObjectPose, intr: CameraIntrinsics, near: float):
    c = box_corners(pose)
    if np.any(c[:, 2] <= near):
        return None
    u = intr.fx * c[:, 0] / c[:, 2] + intr.cx
    v = intr.fy * c[:, 1] / c[:, 2] + intr.cy
    return u.min(), v.min(), u.max(), v.max()


def make_crop(boxes, intr: CameraIntrinsics, cfg: RefineConfig) -> Optional[RenderConfig]:
    boxes = [b for b in boxes if b is not None]
    if not boxes:
        return None
    u0 = min(b[0] for b in boxes)
    v0 = min(b[1] for b in boxes)
    u1 = max(b[2] for b in boxes)
    v1 = max(b[3] for b in boxes)
    pu, pv = cfg.crop_pad * (u1 - u0), cfg.crop_pad * (v1 - v0)
    u0 = max(0, int(math.floor(u0 - pu)))
    v0 = max(0, int(math.floor(v0 - pv)))
    u1 = min(intr.width - 1, int(math.ceil(u1 + pu)))
    v1 = min(intr.height - 1, int(math.ceil(v1 + pv)))
    if u1 <= u0 or v1 <= v0:
        return None
    w, h = u1 - u0 + 1, v1 - v0 + 1
    stride = max(1, int(math.ceil(math.sqrt(w * h / cfg.max_crop_pixels))))
    return RenderConfig(
        width=(w + stride - 1) // stride,
        height=(h + stride - 1) // stride,
        sigma=cfg.sigma,
        u0=u0,
        v0=v0,
        stride=stride,
    )


def _sample_mask(mask: np.ndarray, rc: RenderConfig) -> np.ndarray:
    us = (rc.u0 + rc.stride * np.arange(rc.width)).astype(int)
    vs = (rc.v0 + rc.stride * np.arange(rc.height)).astype(int)
    us = np.clip(us, 0, mask.shape[1] - 1)
    vs = np.clip(vs, 0, mask.shape[0] - 1)
    return mask[np.ix_(vs, us)]


def _instance_masks(bundle: FrameBundle, det: Detection):
    """(fg, union of the other instances) at full resolution, or (None, None)."""
    ms = bundle.masks
    inst = det.mask_id if det.mask_id is not None else ms.for_detection(det.row)
    if inst is None or inst not in ms.masks:
        return None, None
    others = np.zeros_like(ms.masks[inst])
    for k, m in ms.masks.items():
        if k != inst:
            others |= m
    return ms.masks[inst], others


def _view_obs(bundle, det, pose_in_view, g_ik, v, cfg, with_image) -> Optional[ViewObs]:
    fg, others = _instance_masks(bundle, det)
    if fg is None:
        return None
    rc = make_crop(
        [_bbox_of(fg), tuple(det.bbox2d), _projected_bbox(pose_in_view, bundle.intr, 0.1)], bundle.intr, cfg
    )
    if rc is None:
        return None
    fg_s = _sample_mask(fg, rc)
    ignore = _sample_mask(others & ~fg, rc)
    mask = MaskObs.from_fg(fg_s, ignore)
    image = bundle.gray if with_image else None
    return ViewObs(bundle.frame, rc, mask, g_ik, np.asarray(v, float), image)


# ---------------------------------------------------------------- optimisation


def build_problem(track, i, frames, space, weights, priors, cfg, poses=None):
    """Assemble the loss problem for (track, i); returns (problem or None, result skeleton)."""
    det = track.at(i)
    init = det.pose
    poses = poses if poses is not None else {f: b.pose for f, b in frames.items()}
    result = RefineResult(refined=init, initial=init)
    views, flags = sample_views(track, i, frames, cfg)
    result.flags += flags
    bundle = frames[i]
    ref = _view_obs(bundle, det, init, frame_transform(poses, i, i), np.zeros(3), cfg, cfg.photo)
    others = []
    for k in views:
        if k == i:
            continue
        g = frame_transform(poses, i, k)
        v = displacement_vector(track, i, k, poses)
        warped = warp_pose(init, g, v)
        if warped.t_c[2] <= 0.5:
            result.flags.append(f"view{k}:behind-camera")
            continue
        ob = _view_obs(frames[k], track.at(k), warped, g, v, cfg, cfg.photo)
        if ob is None:
            result.flags.append(f"view{k}:no-mask")
            continue
        others.append(ob)
    result.views = [o.frame for o in others]
    fg_i = _instance_masks(bundle, det)[0]
    if fg_i is None:
        centre, reason = None, "no-mask"
    else:
        centre, reason = depth_center(fg_i, bundle.depth, bundle.intr, cfg)
    accepted, gate_reason = gate_depth(centre, init, cfg)
    result.gates = {
        "depth": gate_reason if centre is not None else reason,
        "depth_accepted": bool(accepted),
    }
    if centre is not None:
        result.gates["depth_center"] = [float(x) for x in centre]
    if ref is None:
        result.flags.append("ref:no-mask")
        if not others and not accepted:
            return None, result
        # keep the frame-i geometry but leave every pixel unlabelled
        rc = make_crop([tuple(det.bbox2d)], bundle.intr, cfg)
        ref = ViewObs(i, rc, MaskObs(np.zeros((rc.height, rc.width), bool), np.zeros((rc.height, rc.width), bool)))
    problem = LossProblem(
        space, init.yaw, init.embedding, bundle.intr, ref, others,
        depth_target=centre if accepted else None, priors=priors, weights=weights, photo=cfg.photo,
    )
    return problem, result


def _active_terms(problem: LossProblem, weights: LossWeights) -> List[str]:
    w = asdict(weights)
    have = {
        "sil": bool(problem.fg[0].sum() + problem.bg[0].sum() > 0),
        "mv_sil": problem.n_views > 1,
        "depth": problem.depth_target is not None,
        "photo": problem.photo_ready,
        "size": True,
        "y": True,
    }
    return [k for k in have if have[k] and w[k] > 0]


def optimise(problem: LossProblem, init: ObjectPose, cfg: RefineConfig, result: RefineResult) -> RefineResult:
    """Adam on (t_c, size) with fixed yaw/embedding; keeps the best iterate."""
    x = np.concatenate([init.t_c, init.size]).astype(float)
    lr = np.array([cfg.lr_translation] * 3 + [cfg.lr_size] * 3)
    m = np.zeros(6)
    v = np.zeros(6)
    best_x, best_f = x.copy(), math.inf
    last_improve = 0
    for step in range(cfg.steps):
        b = problem.evaluate(x[:3], x[3:]) if cfg.autograd else problem.evaluate_np(x[:3], x[3:])
        result.history.append(b)
        if step == 0:
            result.initial_loss = b.total
        if b.total < best_f:
            if best_f == math.inf or (best_f - b.total) > cfg.plateau_tol * abs(best_f):
                last_improve = step
            best_f, best_x = b.total, x.copy()
        if step - last_improve >= cfg.patience:
            result.flags.append(f"plateau@{step}")
            break
        g = np.concatenate([b.grad_t, b.grad_size])
        m = cfg.beta1 * m + (1 - cfg.beta1) * g
        v = cfg.beta2 * v + (1 - cfg.beta2) * g * g
        mhat = m / (1 - cfg.beta1 ** (step + 1))
        vhat = v / (1 - cfg.beta2 ** (step + 1))
        x = x - lr * mhat / (np.sqrt(vhat) + 1e-8)
        clamped = np.clip(x[3:], SIZE_MIN, SIZE_MAX)
        if np.any(clamped != x[3:]) and "size-clamped" not in result.flags:
            result.flags.append("size-clamped")
        x[3:] = clamped
    if result.history:
        result.final_loss = best_f
        result.refined = init.with_(t_c=best_x[:3], size=best_x[3:])
    return result


def refine_pose(
    track: Track,
    i: int,
    frames: Mapping[int, FrameBundle],
    space: ShapeSpace | None = None,
    weights: LossWeights | None = None,
    priors: Priors | None = None,
    cfg: RefineConfig | None = None,
    seed: int = 0,
    poses=None,
) -> RefineResult:
    """Refine translation and size of ``track`` at frame ``i``.

    The optimiser is deterministic; ``seed`` is accepted so that callers can
    thread one seed through the whole pipeline.
    """
    space = space or cuboid_space()
    weights = weights or LossWeights()
    priors = priors or Priors()
    cfg = cfg or RefineConfig()
    problem, result = build_problem(track, i, frames, space, weights, priors, cfg, poses)
    if problem is None or not _active_terms(problem, weights):
        result.flags.append("unoptimized")
        return result
    if cfg.steps == 0:
        return result
    return optimise(problem, track.at(i).pose, cfg, result)


# ---------------------------------------------------------------- sequences


def detections_from_labels(labels: Mapping[int, Sequence[LabelRecord]], classes=("Car",)) -> Dict[int, List[Detection]]:
    out = {}
    for f in sorted(labels):
        dets = []
        for row, lab in enumerate(labels[f]):
            if lab.cls not in classes:
                continue
            u0, v0, u1, v1 = lab.bbox
            if not (u0 < u1 and v0 < v1):
                continue
            score = 1.0 if lab.score is None else float(np.clip(lab.score, 0.0, 1.0))
            dets.append(Detection(f, location_convention(lab), tuple(lab.bbox), score, None, row))
        out[f] = dets
    return out


def build_tracks(dets_per_frame, poses, motion_cfg: MotionConfig) -> List[Track]:
    tracks = associate(dets_per_frame, poses, motion_cfg)
    for t in tracks:
        fit_track(t, poses, motion_cfg)
    return tracks


def tracks_to_json(tracks: Sequence[Track], motion_cfg: MotionConfig) -> dict:
    return {
        "seed": motion_cfg.seed,
        "motion_config": asdict(motion_cfg),
        "tracks": [
            {
                "id": t.id,
                "motion_class": t.motion_class,
                "direction": None if t.direction is None else [float(x) for x in t.direction],
                "speed": float(t.speed),
                "low_confidence": t.low_confidence,
                "detections": [{"frame": d.frame, "row": d.row} for d in t.detections],
            }
            for t in tracks
        ],
    }


_WORKER_STATE: dict = {}


def _run_item(item):
    tid, frame = item
    st = _WORKER_STATE
    torch.set_num_threads(1)
    track = st["tracks"][tid]
    try:
        res = refine_pose(track, frame, st["frames"], st["space"], st["weights"], st["priors"], st["cfg"], st["seed"], st["poses"])
        return tid, frame, res, None
    except Exception as exc:  # recorded per item, never aborts the sequence
        log.warning("refinement failed for track %d frame %d: %s", tid, frame, exc)
        return tid, frame, None, f"{type(exc).__name__}: {exc}"


def _summarise(res: RefineResult) -> dict:
    return {
        "views": res.views,
        "flags": res.flags,
        "gates": res.gates,
        "steps": len(res.history),
        "initial_loss": res.initial_loss,
        "final_loss": res.final_loss,
        "initial_t": [round(float(x), 6) for x in res.initial.t_c],
        "refined_t": [round(float(x), 6) for x in res.refined.t_c],
        "refined_size": [round(float(x), 6) for x in res.refined.size],
    }


def refine_sequence(
    detections: Mapping[int, Sequence[LabelRecord]],
    frames: Mapping[int, FrameBundle],
    cfg: RefineConfig | None = None,
    weights: LossWeights | None = None,
    priors: Priors | None = None,
    motion_cfg: MotionConfig | None = None,
    space: ShapeSpace | None = None,
    seed: int = 0,
    jobs: int = 1,
):
    """Track, classify, fit and refine every (track, frame); returns (labels per frame, report)."""
    cfg = cfg or RefineConfig()
    weights = weights or LossWeights()
    priors = priors or Priors()
    motion_cfg = motion_cfg or MotionConfig(seed=seed)
    space = space or cuboid_space()
    poses = {f: b.pose for f, b in frames.items()}
    dets = detections_from_labels(detections)
    dets = {f: d for f, d in dets.items() if f in poses}
    tracks = build_tracks(dets, poses, motion_cfg)
    items = sorted((t.id, d.frame) for t in tracks for d in t.detections)
    _WORKER_STATE.update(
        tracks={t.id: t for t in tracks}, frames=frames, space=space, weights=weights,
        priors=priors, cfg=cfg, seed=seed, poses=poses,
    )
    if jobs > 1 and len(items) > 1:
        ctx = mp.get_context("fork")
        with ctx.Pool(jobs) as pool:
            outcomes = pool.map(_run_item, items, chunksize=1)
    else:
        outcomes = [_run_item(it) for it in items]
    _WORKER_STATE.clear()

    refined: Dict[Tuple[int, int], RefineResult] = {}
    records, failures = [], []
    for tid, frame, res, err in outcomes:
        if res is None:
            failures.append({"track": tid, "frame": frame, "error": err})
            continue
        refined[(frame, tid)] = res
        rec = {"track": tid, "frame": frame}
        rec.update(_summarise(res))
        records.append(rec)

    row_of = {(d.frame, t.id): d.row for t in tracks for d in t.detections}
    out_labels: Dict[int, List[LabelRecord]] = {}
    for f in sorted(detections):
        labs = []
        refined_rows = {row_of[(fr, tid)]: r for (fr, tid), r in refined.items() if fr == f}
        for row, lab in enumerate(detections[f]):
            if row in refined_rows:
                pose = refined_rows[row].refined
                new = label_from_pose(pose, lab.bbox, lab.cls, lab.score if lab.score is not None else 1.0, lab.truncated, lab.occluded)
                labs.append(new)
            else:
                labs.append(LabelRecord(**{**asdict(lab), "score": lab.score if lab.score is not None else 1.0}))
        out_labels[f] = labs

    reductions = [
        (r.initial_loss - r.final_loss) / r.initial_loss
        for r in refined.values()
        if r.initial_loss and r.final_loss is not None
    ]
    gate_counts: Dict[str, int] = {}
    for r in refined.values():
        key = str(r.gates.get("depth", "none"))
        key = key.split(":")[0]
        gate_counts[key] = gate_counts.get(key, 0) + 1
    report = {
        "seed": seed,
        "counts": {
            "frames": len(frames),
            "detections": sum(len(v) for v in dets.values()),
            "tracks": len(tracks),
            "static_tracks": sum(t.motion_class != MOVING for t in tracks),
            "moving_tracks": sum(t.motion_class == MOVING for t in tracks),
            "items": len(items),
            "optimized": sum(1 for r in refined.values() if r.history),
            "unoptimized": sum(1 for r in refined.values() if "unoptimized" in r.flags),
            "failed": len(failures),
        },
        "gates": dict(sorted(gate_counts.items())),
        "mean_loss_reduction": float(np.mean(reductions)) if reductions else 0.0,
        "optimizer": {"type": "adam", **asdict(cfg)},
        "weights": asdict(weights),
        "priors": asdict(priors),
        "motion": asdict(motion_cfg),
        "tracks": tracks_to_json(tracks, motion_cfg)["tracks"],
        "items": records,
        "failures": failures,
    }
    return out_labels, report


def report_json(report: dict) -> str:
    return json.dumps(report, indent=1, sort_keys=True, default=_json_default) + "\n"


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"not JSON serialisable: {type(o)}")
