"""Linear shape space (mean + basis) decoded into object-frame triangle meshes.

Object frame: x along the object's length, y down along its height, z along its
width, matching KITTI box corners. ``size`` is always (height, width, length),
so the per-axis scale applied to a unit-box shape is (length, height, width).

Asset file layout (all little-endian)::

    magic   4 bytes  b"SHPS"
    version uint32   1
    N, M, d int32 x3 vertex, face and basis counts
    mean    float32  N*3
    basis   float32  d*N*3
    faces   int32    M*3
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"SHPS"
VERSION = 1


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class ShapeSpace:
    mean_vertices: np.ndarray  # (N, 3)
    basis: np.ndarray  # (d, N, 3)
    faces: np.ndarray  # (M, 3) int

    def __post_init__(self):
        mean = np.asarray(self.mean_vertices, dtype=float).reshape(-1, 3)
        basis = np.asarray(self.basis, dtype=float).reshape(-1, mean.shape[0], 3)
        faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if faces.size and (faces.min() < 0 or faces.max() >= mean.shape[0]):
            raise ShapeError("face index out of range")
        for a in (mean, basis, faces):
            a.setflags(write=False)
        object.__setattr__(self, "mean_vertices", mean)
        object.__setattr__(self, "basis", basis)
        object.__setattr__(self, "faces", faces)

    @property
    def dim(self) -> int:
        return self.basis.shape[0]

    @property
    def n_vertices(self) -> int:
        return self.mean_vertices.shape[0]


@dataclass(frozen=True)
class Mesh:
    vertices: np.ndarray  # (N, 3) meters, object frame
    faces: np.ndarray  # (M, 3)


def size_to_axis_scale(size):
    """(h, w, l) -> per-axis scale for object-frame (x, y, z) = (l, h, w)."""
    return size[..., [2, 0, 1]]


def decode_vertices(space: ShapeSpace, e, size):
    """Vertex array for embedding ``e`` and size; works on numpy or torch inputs."""
    try:
        import torch
    except ImportError:  # pragma: no cover
        torch = None
    if torch is not None and (isinstance(e, torch.Tensor) or isinstance(size, torch.Tensor)):
        ref = size if isinstance(size, torch.Tensor) else e
        mean = torch.as_tensor(space.mean_vertices, dtype=ref.dtype)
        basis = torch.as_tensor(space.basis, dtype=ref.dtype)
        e = torch.as_tensor(e, dtype=ref.dtype)
        size = torch.as_tensor(size, dtype=ref.dtype)
        verts = mean + torch.tensordot(e, basis, dims=1) if space.dim else mean
        return verts * size_to_axis_scale(size)
    e = np.asarray(e, dtype=float).reshape(-1)
    size = np.asarray(size, dtype=float)
    verts = space.mean_vertices + np.tensordot(e, space.basis, axes=1) if space.dim else space.mean_vertices
    return verts * size_to_axis_scale(size)


def decode(space: ShapeSpace, e, size) -> Mesh:
    e = np.asarray(e, dtype=float).reshape(-1)
    size = np.asarray(size, dtype=float).reshape(3)
    if e.shape[0] != space.dim:
        raise ShapeError(f"embedding has {e.shape[0]} components, shape space expects {space.dim}")
    if np.any(size <= 0):
        raise ShapeError("size components must be positive")
    return Mesh(decode_vertices(space, e, size), space.faces)


def mesh_center(m: Mesh) -> np.ndarray:
    if len(m.vertices) == 0:
        raise ShapeError("mesh has no vertices")
    return np.asarray(m.vertices, dtype=float).mean(axis=0)


def face_areas(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    tri = vertices[faces]
    return 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)


def signed_volume(vertices: np.ndarray, faces: np.ndarray) -> float:
    tri = vertices[faces]
    return float(np.einsum("ij,ij->i", tri[:, 0], np.cross(tri[:, 1], tri[:, 2])).sum() / 6.0)


def cuboid_space() -> ShapeSpace:
    """Unit box centred at the origin, 8 vertices, 12 outward-facing triangles."""
    v = np.array(
        [[x, y, z] for x in (-0.5, 0.5) for y in (-0.5, 0.5) for z in (-0.5, 0.5)]
    )
    # vertex index = 4*ix + 2*iy + iz
    quads = [
        (0, 1, 3, 2),  # x = -0.5
        (4, 6, 7, 5),  # x = +0.5
        (0, 4, 5, 1),  # y = -0.5
        (2, 3, 7, 6),  # y = +0.5
        (0, 2, 6, 4),  # z = -0.5
        (1, 5, 7, 3),  # z = +0.5
    ]
    faces = []
    for a, b, c, d in quads:
        faces += [(a, b, c), (a, c, d)]
    return ShapeSpace(v, np.zeros((0, 8, 3)), np.array(faces))


def save_shape_space(space: ShapeSpace, path) -> None:
    n, m, d = space.n_vertices, len(space.faces), space.dim
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I3i", VERSION, n, m, d))
        fh.write(np.ascontiguousarray(space.mean_vertices, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(space.basis, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(space.faces, dtype="<i4").tobytes())


def load_shape_space(path) -> ShapeSpace:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ShapeError(f"{path}: not a shape-space file")
    version, n, m, d = struct.unpack_from("<I3i", data, 4)
    if version != VERSION or min(n, m, d) < 0:
        raise ShapeError(f"{path}: unsupported header {(version, n, m, d)}")
    off = 20
    expected = off + 4 * (3 * n + 3 * n * d + 3 * m)
    if len(data) != expected:
        raise ShapeError(f"{path}: expected {expected} bytes, found {len(data)}")
    mean = np.frombuffer(data, "<f4", 3 * n, off).reshape(n, 3)
    off += 12 * n
    basis = np.frombuffer(data, "<f4", 3 * n * d, off).reshape(d, n, 3)
    off += 12 * n * d
    faces = np.frombuffer(data, "<i4", 3 * m, off).reshape(m, 3)
    return ShapeSpace(mean.astype(float), basis.astype(float), faces.astype(np.int64))
