"""Rigid transforms, pinhole projection and the motion-aware pose warp.

Camera frame convention throughout: x right, y down, z forward. Object yaw is
a rotation about the camera y axis, with the KITTI sign convention: an object
with yaw ``theta`` points along ``(cos theta, 0, -sin theta)``.

Composition convention: ``compose(a, b)`` applies ``b`` first, so that
``compose(a, b).apply(p) == a.apply(b.apply(p))``. Camera poses map frame-f
camera coordinates into world (frame 0) coordinates, hence the transform from
frame i to frame k is ``compose(invert(poses[k]), poses[i])``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence, Union

import numpy as np

ORTHO_TOL = 1e-9


class GeometryError(ValueError):
    """Raised for degenerate or physically invalid geometric input."""


def wrap_angle(a):
    """Wrap an angle (scalar or array) into (-pi, pi]."""
    w = np.mod(np.asarray(a, dtype=float) + np.pi, 2.0 * np.pi) - np.pi
    w = np.where(w <= -np.pi, w + 2.0 * np.pi, w)
    if np.ndim(w) == 0:
        return float(w)
    return w


def rot_x(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def orthonormalize(r: np.ndarray) -> np.ndarray:
    """Nearest rotation matrix in the Frobenius sense."""
    u, _, vt = np.linalg.svd(r)
    out = u @ vt
    if np.linalg.det(out) < 0:
        u[:, -1] *= -1
        out = u @ vt
    return out


@dataclass(frozen=True)
class SE3Transform:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "SE3Transform":
        return cls()

    @classmethod
    def from_matrix(cls, m) -> "SE3Transform":
        m = np.asarray(m, dtype=float)
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, p) -> np.ndarray:
        """Transform a point (3,) or a point array (N, 3)."""
        p = np.asarray(p, dtype=float)
        return p @ self.rotation.T + self.translation

    def is_valid(self, tol: float = ORTHO_TOL) -> bool:
        r = self.rotation
        return bool(
            np.all(np.abs(r.T @ r - np.eye(3)) <= tol)
            and abs(np.linalg.det(r) - 1.0) <= tol
        )

    def __matmul__(self, other: "SE3Transform") -> "SE3Transform":
        return compose(self, other)


def compose(a: SE3Transform, b: SE3Transform) -> SE3Transform:
    """Return the transform applying ``b`` first, then ``a``."""
    r = a.rotation @ b.rotation
    t = a.rotation @ b.translation + a.translation
    if np.max(np.abs(r.T @ r - np.eye(3))) > ORTHO_TOL:
        r = orthonormalize(r)
    return SE3Transform(r, t)


def invert(g: SE3Transform) -> SE3Transform:
    rt = g.rotation.T
    return SE3Transform(rt, -rt @ g.translation)


def frame_transform(
    poses: Union[Sequence[SE3Transform], Mapping[int, SE3Transform]], i: int, k: int
) -> SE3Transform:
    """Transform taking frame-i camera points to frame-k camera points."""
    for f in (i, k):
        try:
            poses[f]
        except (KeyError, IndexError):
            raise KeyError(f"no camera pose for frame {f}") from None
    if i == k:
        return SE3Transform.identity()
    return compose(invert(poses[k]), poses[i])


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise GeometryError("principal point outside the image")

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def scaled(self, factor: float) -> "CameraIntrinsics":
        return CameraIntrinsics(
            self.fx * factor,
            self.fy * factor,
            self.cx * factor,
            self.cy * factor,
            max(1, int(round(self.width * factor))),
            max(1, int(round(self.height * factor))),
        )


def project(intr: CameraIntrinsics, p) -> np.ndarray:
    """Pinhole projection of a point (3,) or points (N, 3) to pixels."""
    p = np.asarray(p, dtype=float)
    z = p[..., 2]
    if np.any(z <= 0):
        raise GeometryError("point behind the camera (z <= 0)")
    u = intr.fx * p[..., 0] / z + intr.cx
    v = intr.fy * p[..., 1] / z + intr.cy
    return np.stack([u, v], axis=-1)


def backproject(intr: CameraIntrinsics, px, depth) -> np.ndarray:
    px = np.asarray(px, dtype=float)
    depth = np.asarray(depth, dtype=float)
    if np.any(depth <= 0):
        raise GeometryError("depth must be positive for back-projection")
    x = (px[..., 0] - intr.cx) / intr.fx * depth
    y = (px[..., 1] - intr.cy) / intr.fy * depth
    return np.stack([x, y, np.broadcast_to(depth, x.shape)], axis=-1)


@dataclass(frozen=True)
class ObjectPose:
    """Box-center pose in a camera frame; ``size`` is (height, width, length)."""

    t_c: np.ndarray
    yaw: float
    size: np.ndarray
    embedding: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        t = np.array(self.t_c, dtype=float).reshape(3)
        s = np.array(self.size, dtype=float).reshape(3)
        e = np.array(self.embedding, dtype=float).reshape(-1)
        if np.any(s <= 0):
            raise GeometryError(f"object size must be positive, got {s.tolist()}")
        for a in (t, s, e):
            a.setflags(write=False)
        object.__setattr__(self, "t_c", t)
        object.__setattr__(self, "size", s)
        object.__setattr__(self, "embedding", e)
        object.__setattr__(self, "yaw", wrap_angle(float(self.yaw)))

    def with_(self, **kw) -> "ObjectPose":
        return replace(self, **kw)

    def rotation(self) -> np.ndarray:
        return rot_y(self.yaw)

    def object_to_camera(self) -> SE3Transform:
        return SE3Transform(self.rotation(), self.t_c)


def yaw_of_rotation(r: np.ndarray) -> float:
    """Rotation angle about the camera vertical (y) axis contained in ``r``."""
    return math.atan2(r[0, 2] - r[2, 0], r[0, 0] + r[2, 2])


def warp_translation(t_c, g_ik: SE3Transform, v) -> np.ndarray:
    return g_ik.rotation @ np.asarray(t_c, dtype=float) + g_ik.translation + np.asarray(v, dtype=float)


def warp_pose(pose: ObjectPose, g_ik: SE3Transform, v=(0.0, 0.0, 0.0)) -> ObjectPose:
    """Carry a frame-i pose into frame k: ``t_k = R t_i + t + v``, ``yaw_k = yaw_i + yaw(R)``.

    ``v`` is the object displacement expressed in frame-k camera coordinates
    (zero for static objects). Size and embedding are untouched.
    """
    t_k = warp_translation(pose.t_c, g_ik, v)
    yaw_k = wrap_angle(pose.yaw + yaw_of_rotation(g_ik.rotation))
    return replace(pose, t_c=t_k, yaw=yaw_k)


def warp_jacobian(g_ik: SE3Transform) -> np.ndarray:
    """d t_k / d t_i of :func:`warp_pose` (constant: the rotation block)."""
    return g_ik.rotation.copy()


def allocentric_angle(pose: ObjectPose) -> float:
    x, z = float(pose.t_c[0]), float(pose.t_c[2])
    if math.hypot(x, z) == 0.0:
        raise GeometryError("allocentric angle undefined for an object at the camera origin")
    return wrap_angle(pose.yaw - math.atan2(x, z))


def box_corners(pose: ObjectPose) -> np.ndarray:
    """Eight box corners in camera coordinates; length along object x, width along z."""
    h, w, l = pose.size
    xs = np.array([1, 1, -1, -1, 1, 1, -1, -1]) * l / 2
    ys = np.array([1, 1, 1, 1, -1, -1, -1, -1]) * h / 2
    zs = np.array([1, -1, -1, 1, 1, -1, -1, 1]) * w / 2
    return pose.object_to_camera().apply(np.stack([xs, ys, zs], axis=1))
