"""Tracking, static/moving classification and robust line-motion fitting."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

from .geom import ObjectPose, SE3Transform

log = logging.getLogger(__name__)

STATIC = "static"
MOVING = "moving"


class DegenerateFitError(ValueError):
    pass


@dataclass(frozen=True)
class Detection:
    frame: int
    pose: ObjectPose
    bbox2d: tuple
    score: float = 1.0
    mask_id: Optional[int] = None
    row: int = -1  # line index in the frame's detection file

    def __post_init__(self):
        u0, v0, u1, v1 = self.bbox2d
        if not (u0 < u1 and v0 < v1):
            raise ValueError(f"degenerate 2D box {self.bbox2d}")
        if not (0.0 <= self.score <= 1.0):
            raise ValueError(f"score {self.score} outside [0, 1]")


@dataclass
class MotionConfig:
    gate_radius: float = 3.0
    max_misses: int = 3
    velocity_window: int = 5
    motion_threshold: float = 0.1  # m/frame
    ransac_iters: int = 100
    inlier_threshold: float = 0.5  # m, point-to-line distance
    seed: int = 0


@dataclass
class Track:
    id: int
    detections: List[Detection] = field(default_factory=list)
    motion_class: str = STATIC
    direction: Optional[np.ndarray] = None
    speed: float = 0.0
    inliers: Optional[np.ndarray] = None
    low_confidence: bool = False

    @property
    def frames(self) -> List[int]:
        return [d.frame for d in self.detections]

    def at(self, frame: int) -> Optional[Detection]:
        for d in self.detections:
            if d.frame == frame:
                return d
        return None


def _camera_pose(poses, frame) -> SE3Transform:
    try:
        return poses[frame]
    except (KeyError, IndexError):
        raise KeyError(f"no camera pose for frame {frame}") from None


def world_positions(track: Track, poses) -> np.ndarray:
    """Box centres of ``track`` in the world frame (camera at time 0), shape (n, 3)."""
    return np.array(
        [_camera_pose(poses, d.frame).apply(d.pose.t_c) for d in track.detections]
    ).reshape(-1, 3)


def _predict(positions: List[np.ndarray], frames: List[int], frame: int, window: int) -> np.ndarray:
    """Constant-velocity prediction from a least-squares fit to the last ``window`` positions."""
    if len(positions) == 1:
        return positions[-1]
    p = np.array(positions[-window:])
    f = np.array(frames[-window:], dtype=float)
    fc = f - f.mean()
    vel = (fc[:, None] * (p - p.mean(0))).sum(0) / (fc @ fc)
    return p.mean(0) + vel * (frame - f.mean())


def associate(
    detections_per_frame: Mapping[int, Sequence[Detection]],
    poses,
    config: MotionConfig | None = None,
) -> List[Track]:
    """Greedy frame-to-frame association on predicted 3D world centres.

    Candidate (track, detection) pairs are sorted by distance and accepted while
    both are free and the distance is within ``gate_radius``; ties resolve by
    track id then detection order.
    """
    cfg = config or MotionConfig()
    tracks: List[Track] = []
    active: Dict[int, dict] = {}
    for frame in sorted(detections_per_frame):
        dets = list(detections_per_frame[frame])
        g = _camera_pose(poses, frame) if dets or active else None
        centres = [g.apply(d.pose.t_c) for d in dets]
        pairs = []
        for tid, st in active.items():
            pred = _predict(st["pos"], st["frames"], frame, cfg.velocity_window)
            for j, c in enumerate(centres):
                dist = float(np.linalg.norm(c - pred))
                if dist <= cfg.gate_radius:
                    pairs.append((dist, tid, j))
        pairs.sort()
        used_t, used_d = set(), set()
        for dist, tid, j in pairs:
            if tid in used_t or j in used_d:
                continue
            used_t.add(tid)
            used_d.add(j)
            st = active[tid]
            st["track"].detections.append(dets[j])
            st["pos"].append(centres[j])
            st["frames"].append(frame)
            st["miss"] = 0
        for tid in list(active):
            if tid not in used_t:
                active[tid]["miss"] += 1
                if active[tid]["miss"] > cfg.max_misses:
                    del active[tid]
        for j, d in enumerate(dets):
            if j in used_d:
                continue
            t = Track(id=len(tracks), detections=[d])
            tracks.append(t)
            active[t.id] = {"track": t, "pos": [centres[j]], "frames": [frame], "miss": 0}
    return tracks


def _line_inliers(points, origin, direction, threshold):
    rel = points - origin
    perp = rel - np.outer(rel @ direction, direction)
    return np.linalg.norm(perp, axis=1) <= threshold


def _principal_direction(points: np.ndarray) -> np.ndarray:
    centred = points - points.mean(0)
    _, _, vt = np.linalg.svd(centred, full_matrices=False)
    return vt[0]


def fit_direction_ransac(positions, config: MotionConfig | None = None, frames=None, rng=None):
    """Robust line direction through world positions.

    Returns (unit direction oriented along increasing frame order, inlier mask).
    """
    cfg = config or MotionConfig()
    pts = np.asarray(positions, dtype=float).reshape(-1, 3)
    n = len(pts)
    if n < 2 or len(np.unique(np.round(pts, 12), axis=0)) < 2:
        raise DegenerateFitError("need at least two distinct positions to fit a line")
    t = np.arange(n, dtype=float) if frames is None else np.asarray(frames, dtype=float)
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    best_count, best = -1, None
    for _ in range(cfg.ransac_iters):
        i, j = rng.choice(n, size=2, replace=False)
        d = pts[j] - pts[i]
        norm = np.linalg.norm(d)
        if norm < 1e-12:
            continue
        d = d / norm
        mask = _line_inliers(pts, pts[i], d, cfg.inlier_threshold)
        count = int(mask.sum())
        if count > best_count:
            best_count, best = count, mask
    if best is None or best.sum() < 2:
        best = np.ones(n, dtype=bool)
    inl = pts[best]
    if len(np.unique(np.round(inl, 12), axis=0)) < 2:
        raise DegenerateFitError("inlier set collapses to a single point")
    direction = _principal_direction(inl)
    mask = _line_inliers(pts, inl.mean(0), direction, cfg.inlier_threshold)
    if mask.sum() >= 2 and len(np.unique(np.round(pts[mask], 12), axis=0)) >= 2:
        inl = pts[mask]
        direction = _principal_direction(inl)
    else:
        mask = best
    s = (pts[mask] - pts[mask].mean(0)) @ direction
    tm = t[mask] - t[mask].mean()
    if tm @ s < 0:
        direction = -direction
    return direction / np.linalg.norm(direction), mask


def speed_estimate(positions, inlier_mask, frames=None, direction=None) -> float:
    """Mean per-frame displacement over consecutive inliers (meters/frame).

    With ``direction`` given, each displacement is measured along that line,
    which keeps cross-track noise from inflating the estimate.
    """
    pts = np.asarray(positions, dtype=float).reshape(-1, 3)
    mask = np.asarray(inlier_mask, dtype=bool)
    t = np.arange(len(pts), dtype=float) if frames is None else np.asarray(frames, dtype=float)
    if mask.sum() < 2:
        raise DegenerateFitError("need at least two inliers for a speed estimate")
    p, tt = pts[mask], t[mask]
    d = np.diff(p, axis=0)
    gaps = np.diff(tt)
    if direction is None:
        steps = np.linalg.norm(d, axis=1)
    else:
        steps = d @ np.asarray(direction, dtype=float)
    return float(max(np.mean(steps / gaps), 0.0))


def mean_velocity(positions, inlier_mask, frames=None) -> np.ndarray:
    """Least-squares velocity (m/frame) over the inlier positions."""
    pts = np.asarray(positions, dtype=float).reshape(-1, 3)
    mask = np.asarray(inlier_mask, dtype=bool)
    t = np.arange(len(pts), dtype=float) if frames is None else np.asarray(frames, dtype=float)
    p, tt = pts[mask], t[mask]
    tc = tt - tt.mean()
    den = tc @ tc
    if den == 0:
        return np.zeros(3)
    return (tc[:, None] * (p - p.mean(0))).sum(0) / den


def classify_motion(positions, config: MotionConfig | None = None, frames=None):
    """Return (motion class, fit) where fit is (direction, inliers) or None.

    Moving iff the least-squares speed over the RANSAC inliers exceeds
    ``motion_threshold``. A single position is static and flagged low-confidence
    through a ``None`` fit.
    """
    cfg = config or MotionConfig()
    pts = np.asarray(positions, dtype=float).reshape(-1, 3)
    if len(pts) < 2:
        return STATIC, None
    try:
        direction, inliers = fit_direction_ransac(pts, cfg, frames)
    except DegenerateFitError:
        return STATIC, None
    vel = mean_velocity(pts, inliers, frames)
    if np.linalg.norm(vel) > cfg.motion_threshold:
        return MOVING, (direction, inliers)
    return STATIC, (direction, inliers)


def fit_track(track: Track, poses, config: MotionConfig | None = None) -> Track:
    """Classify ``track`` and attach direction/speed in place; returns the track."""
    cfg = config or MotionConfig()
    pts = world_positions(track, poses)
    frames = track.frames
    cls, fit = classify_motion(pts, cfg, frames)
    track.motion_class = cls
    track.low_confidence = len(pts) < 2
    track.direction = None
    track.speed = 0.0
    track.inliers = None if fit is None else fit[1]
    if cls == MOVING:
        direction, inliers = fit
        track.direction = direction
        track.speed = speed_estimate(pts, inliers, frames, direction)
    return track


def displacement_vector(track: Track, i: int, k: int, poses) -> np.ndarray:
    """Object displacement between frames i and k, in frame-k camera coordinates."""
    if track.motion_class != MOVING or k == i:
        return np.zeros(3)
    if track.direction is None:
        raise DegenerateFitError(f"moving track {track.id} has no fitted direction")
    g_k = _camera_pose(poses, k)
    _camera_pose(poses, i)
    world = track.direction * track.speed * (k - i)
    return g_k.rotation.T @ world
