"""Readers and writers for the KITTI-style files consumed and produced by the pipeline.

Sequence directory layout::

    <seq>/
      calib.txt                 P0..P3, R0_rect, Tr_velo_to_cam, Tr_imu_to_velo
      oxts/000000.txt ...       one 30-field GPS/IMU line per frame
      poses.txt                 optional: 12 floats per line, camera-to-world 3x4
      image_2/000000.png ...    RGB frames
      depth/000000.png ...      uint16 depth, meters * 256, 0 = invalid
      masks/000000/<id>.png     8-bit instance masks (0 bg, 255 fg)
      masks/000000/index.txt    "<instance id> <detection row>" per line (-1 = none)
      detections/000000.txt     detector output in label format with score
      labels/000000.txt         ground truth (optional, evaluation only)
      tracks.json               optional ground-truth identities and motion classes

When ``poses.txt`` exists it takes precedence over ``oxts/``.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .geom import CameraIntrinsics, ObjectPose, SE3Transform, compose, invert, rot_x, rot_y, rot_z, wrap_angle

EARTH_RADIUS = 6378137.0
OXTS_FIELDS = 30
CALIB_SIZES = {"P0": 12, "P1": 12, "P2": 12, "P3": 12, "R0_rect": 9, "Tr_velo_to_cam": 12, "Tr_imu_to_velo": 12}
DONT_CARE = "DontCare"


class FormatError(ValueError):
    """Malformed input; message carries file, line and column where known."""

    def __init__(self, msg: str, path=None, line: int | None = None, column: int | None = None):
        where = ":".join(str(x) for x in (path, line, column) if x is not None)
        super().__init__(f"{where}: {msg}" if where else msg)
        self.path, self.line, self.column = path, line, column


def _floats(tokens: Sequence[str], path, line: int, first_col: int = 1) -> List[float]:
    out = []
    for j, tok in enumerate(tokens):
        try:
            out.append(float(tok))
        except ValueError:
            raise FormatError(f"non-numeric token {tok!r}", path, line, first_col + j) from None
    return out


def _fmt(x: float) -> str:
    return repr(float(x))


# ---------------------------------------------------------------- calibration


@dataclass
class CalibRecord:
    matrices: Dict[str, np.ndarray]
    order: List[str] = field(default_factory=list)

    @property
    def P2(self) -> np.ndarray:
        return self.matrices["P2"].reshape(3, 4)

    def intrinsics(self, width: int, height: int) -> CameraIntrinsics:
        p = self.P2
        return CameraIntrinsics(p[0, 0], p[1, 1], p[0, 2], p[1, 2], width, height)

    def imu_to_cam(self) -> SE3Transform:
        """IMU -> rectified camera-2 frame via R0_rect, Tr_velo_to_cam and Tr_imu_to_velo.

        The horizontal offset of camera 2 w.r.t. the reference camera (P2's fourth
        column) is included so camera-2 coordinates are produced.
        """
        m = self.matrices
        r0 = np.eye(4)
        r0[:3, :3] = m.get("R0_rect", np.eye(3).ravel()).reshape(3, 3)
        v2c = np.eye(4)
        v2c[:3] = m.get("Tr_velo_to_cam", np.eye(4)[:3].ravel()).reshape(3, 4)
        i2v = np.eye(4)
        i2v[:3] = m.get("Tr_imu_to_velo", np.eye(4)[:3].ravel()).reshape(3, 4)
        p2 = self.P2
        shift = np.eye(4)
        shift[0, 3] = p2[0, 3] / p2[0, 0]
        return SE3Transform.from_matrix(shift @ r0 @ v2c @ i2v)


def parse_calib(text: str, path=None) -> CalibRecord:
    mats, order = {}, []
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if ":" not in line:
            raise FormatError("expected 'KEY: values'", path, ln, 1)
        key, rest = line.split(":", 1)
        key = key.strip()
        vals = _floats(rest.split(), path, ln, 2)
        want = CALIB_SIZES.get(key)
        if want is not None and len(vals) != want:
            raise FormatError(f"{key} needs {want} values, found {len(vals)}", path, ln)
        mats[key] = np.array(vals)
        order.append(key)
    if "P2" not in mats:
        raise FormatError("missing required key P2", path)
    rec = CalibRecord(mats, order)
    p = rec.P2
    if not (p[0, 0] > 0 and p[1, 1] > 0):
        raise FormatError("P2 focal lengths must be positive", path)
    return rec


def write_calib(rec: CalibRecord) -> str:
    keys = rec.order or list(rec.matrices)
    return "".join(f"{k}: " + " ".join(_fmt(v) for v in rec.matrices[k]) + "\n" for k in keys)


# ---------------------------------------------------------------- oxts


@dataclass(frozen=True)
class OxtsRecord:
    values: tuple  # 30 floats: lat, lon, alt, roll, pitch, yaw, ...

    lat = property(lambda self: self.values[0])
    lon = property(lambda self: self.values[1])
    alt = property(lambda self: self.values[2])
    roll = property(lambda self: self.values[3])
    pitch = property(lambda self: self.values[4])
    yaw = property(lambda self: self.values[5])


def parse_oxts_records(lines: Sequence[str], path=None) -> List[OxtsRecord]:
    out = []
    for ln, raw in enumerate(lines, start=1):
        toks = raw.split()
        if not toks:
            continue
        if len(toks) != OXTS_FIELDS:
            raise FormatError(f"oxts line needs {OXTS_FIELDS} fields, found {len(toks)}", path, ln)
        out.append(OxtsRecord(tuple(_floats(toks, path, ln))))
    return out


def write_oxts_record(rec: OxtsRecord) -> str:
    return " ".join(_fmt(v) for v in rec.values) + "\n"


def _mercator(lat: float, lon: float, scale: float):
    mx = scale * EARTH_RADIUS * math.radians(lon)
    my = scale * EARTH_RADIUS * math.log(math.tan(math.pi * (90.0 + lat) / 360.0))
    return mx, my


def oxts_poses(records: Sequence[OxtsRecord]) -> List[SE3Transform]:
    """IMU poses relative to the first frame (Mercator projection, Rz*Ry*Rx)."""
    if not records:
        return []
    scale = math.cos(math.radians(records[0].lat))
    raw = []
    for r in records:
        mx, my = _mercator(r.lat, r.lon, scale)
        rot = rot_z(r.yaw) @ rot_y(r.pitch) @ rot_x(r.roll)
        raw.append(SE3Transform(rot, [mx, my, r.alt]))
    origin_inv = invert(raw[0])
    return [compose(origin_inv, g) for g in raw]


def parse_oxts(lines: Sequence[str], path=None) -> List[SE3Transform]:
    return oxts_poses(parse_oxts_records(lines, path))


def oxts_from_pose(pose: SE3Transform, lat0: float, lon0: float, alt0: float = 0.0, scale: float | None = None) -> OxtsRecord:
    """Inverse of the Mercator mapping for a pose given relative to (lat0, lon0, alt0).

    Pose rotation must be a pure Rz*Ry*Rx product; remaining 24 fields are zero.
    """
    scale = math.cos(math.radians(lat0)) if scale is None else scale
    mx0, my0 = _mercator(lat0, lon0, scale)
    x, y, z = pose.translation
    lon = math.degrees((mx0 + x) / (scale * EARTH_RADIUS))
    lat = math.degrees(2.0 * math.atan(math.exp((my0 + y) / (scale * EARTH_RADIUS)))) - 90.0
    r = pose.rotation
    pitch = -math.asin(max(-1.0, min(1.0, r[2, 0])))
    roll = math.atan2(r[2, 1], r[2, 2])
    yaw = math.atan2(r[1, 0], r[0, 0])
    return OxtsRecord((lat, lon, alt0 + z, roll, pitch, yaw) + (0.0,) * 24)


def camera_poses_from_imu(imu_poses: Sequence[SE3Transform], imu_to_cam: SE3Transform) -> List[SE3Transform]:
    """Camera-to-world poses with the world anchored at the frame-0 camera."""
    c2i = invert(imu_to_cam)
    return [compose(imu_to_cam, compose(g, c2i)) for g in imu_poses]


def parse_pose_file(text: str, path=None) -> List[SE3Transform]:
    poses = []
    for ln, raw in enumerate(text.splitlines(), start=1):
        toks = raw.split()
        if not toks:
            continue
        if len(toks) != 12:
            raise FormatError(f"pose line needs 12 values, found {len(toks)}", path, ln)
        m = np.array(_floats(toks, path, ln)).reshape(3, 4)
        poses.append(SE3Transform(m[:, :3], m[:, 3]))
    return poses


def write_pose_file(poses: Sequence[SE3Transform]) -> str:
    return "".join(
        " ".join(_fmt(v) for v in np.hstack([g.rotation, g.translation[:, None]]).ravel()) + "\n" for g in poses
    )


# ---------------------------------------------------------------- labels


@dataclass
class LabelRecord:
    cls: str
    truncated: float
    occluded: int
    alpha: float
    bbox: tuple  # u_min, v_min, u_max, v_max
    dimensions: tuple  # h, w, l
    location: tuple  # x, y, z of the bottom-face centre
    rotation_y: float
    score: Optional[float] = None

    @property
    def is_dont_care(self) -> bool:
        return self.cls == DONT_CARE


def parse_labels(text: str, path=None) -> List[LabelRecord]:
    out = []
    for ln, raw in enumerate(text.splitlines(), start=1):
        toks = raw.split()
        if not toks:
            continue
        if len(toks) not in (15, 16):
            raise FormatError(f"label line needs 15 or 16 fields, found {len(toks)}", path, ln)
        vals = _floats(toks[1:], path, ln, 2)
        rec = LabelRecord(
            cls=toks[0],
            truncated=vals[0],
            occluded=int(round(vals[1])),
            alpha=vals[2],
            bbox=tuple(vals[3:7]),
            dimensions=tuple(vals[7:10]),
            location=tuple(vals[10:13]),
            rotation_y=vals[13],
            score=vals[14] if len(vals) == 15 else None,
        )
        if not rec.is_dont_care and min(rec.dimensions) <= 0:
            raise FormatError("non-positive box dimension", path, ln, 9)
        out.append(rec)
    return out


def format_label(rec: LabelRecord) -> str:
    fields = [rec.cls, f"{rec.truncated:.2f}", str(int(rec.occluded)), f"{rec.alpha:.2f}"]
    fields += [f"{x:.2f}" for x in rec.bbox]
    fields += [f"{x:.2f}" for x in rec.dimensions]
    fields += [f"{x:.2f}" for x in rec.location]
    fields.append(f"{rec.rotation_y:.2f}")
    if rec.score is not None:
        fields.append(f"{rec.score:.4f}")
    return " ".join(fields)


def write_labels(records: Sequence[LabelRecord]) -> str:
    return "".join(format_label(r) + "\n" for r in records)


def location_convention(label: LabelRecord) -> ObjectPose:
    """KITTI bottom-centre label -> box-centre pose (y points down)."""
    h, w, l = label.dimensions
    x, y, z = label.location
    return ObjectPose((x, y - h / 2.0, z), label.rotation_y, (h, w, l))


def label_from_pose(
    pose: ObjectPose, bbox, cls: str = "Car", score=None, truncated: float = 0.0, occluded: int = 0
) -> LabelRecord:
    h, w, l = (float(v) for v in pose.size)
    x, y, z = (float(v) for v in pose.t_c)
    alpha = wrap_angle(pose.yaw - math.atan2(x, z))
    return LabelRecord(
        cls, truncated, occluded, alpha, tuple(float(b) for b in bbox), (h, w, l), (x, y + h / 2.0, z), float(pose.yaw), score
    )


# ---------------------------------------------------------------- depth and masks


def encode_depth(depth: np.ndarray) -> np.ndarray:
    d = np.nan_to_num(np.asarray(depth, dtype=float), nan=0.0)
    return np.clip(np.round(d * 256.0), 0, 65535).astype(np.uint16)


def decode_depth(raw: np.ndarray) -> np.ndarray:
    raw = np.asarray(raw)
    if raw.dtype != np.uint16:
        raise FormatError(f"depth image must be 16-bit, got {raw.dtype}")
    out = raw.astype(float) / 256.0
    out[raw == 0] = np.nan
    return out


def save_depth(depth: np.ndarray, path) -> None:
    from PIL import Image

    Image.fromarray(encode_depth(depth)).save(path)


def load_depth(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        if im.mode not in ("I;16", "I;16B", "I;16L", "I"):
            raise FormatError(f"depth image must be 16-bit, got mode {im.mode}", path)
        arr = np.array(im)
    if arr.dtype != np.uint16:
        if arr.min() < 0 or arr.max() > 65535:
            raise FormatError("depth values outside the 16-bit range", path)
        arr = arr.astype(np.uint16)
    return decode_depth(arr)


def save_mask(mask: np.ndarray, path) -> None:
    from PIL import Image

    Image.fromarray(np.where(np.asarray(mask, bool), 255, 0).astype(np.uint8)).save(path)


def load_mask(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        if im.mode not in ("L", "1", "P"):
            raise FormatError(f"mask must be 8-bit single channel, got mode {im.mode}", path)
        return np.array(im.convert("L")) > 127


@dataclass
class MaskSet:
    masks: Dict[int, np.ndarray]  # instance id -> bool (H, W)
    index: Dict[int, int]  # instance id -> detection row (-1 = unmatched)

    def for_detection(self, row: int) -> Optional[int]:
        for inst, r in sorted(self.index.items()):
            if r == row:
                return inst
        return None


def write_masks(mask_set: MaskSet, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for inst in sorted(mask_set.masks):
        save_mask(mask_set.masks[inst], d / f"{inst}.png")
    (d / "index.txt").write_text("".join(f"{i} {mask_set.index.get(i, -1)}\n" for i in sorted(mask_set.masks)))


def load_masks(directory, frame: Optional[int] = None, shape=None) -> MaskSet:
    d = Path(directory) if frame is None else Path(directory) / f"{frame:06d}"
    masks, index = {}, {}
    if not d.is_dir():
        return MaskSet({}, {})
    for p in sorted(d.glob("*.png"), key=lambda q: int(q.stem) if q.stem.isdigit() else q.stem):
        if not p.stem.isdigit():
            continue
        m = load_mask(p)
        if shape is not None and m.shape != tuple(shape):
            raise FormatError(f"mask shape {m.shape} differs from image shape {tuple(shape)}", p)
        masks[int(p.stem)] = m
    idx = d / "index.txt"
    if idx.exists():
        for ln, raw in enumerate(idx.read_text().splitlines(), start=1):
            toks = raw.split()
            if not toks:
                continue
            if len(toks) != 2 or not all(re.fullmatch(r"-?\d+", t) for t in toks):
                raise FormatError("index line must be '<instance id> <detection row>'", idx, ln)
            index[int(toks[0])] = int(toks[1])
    return MaskSet(masks, index)


def load_image(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def save_image(rgb: np.ndarray, path) -> None:
    from PIL import Image

    Image.fromarray(np.clip(np.round(np.asarray(rgb) * 255.0), 0, 255).astype(np.uint8)).save(path)


def to_gray(rgb: np.ndarray) -> np.ndarray:
    return rgb @ np.array([0.299, 0.587, 0.114])


# ---------------------------------------------------------------- sequences


@dataclass
class FrameBundle:
    frame: int
    pose: SE3Transform  # camera -> world
    intr: CameraIntrinsics
    image_path: Optional[Path] = None
    depth_path: Optional[Path] = None
    mask_dir: Optional[Path] = None

    @cached_property
    def gray(self) -> Optional[np.ndarray]:
        if self.image_path is None or not self.image_path.exists():
            return None
        return to_gray(load_image(self.image_path))

    @cached_property
    def depth(self) -> Optional[np.ndarray]:
        if self.depth_path is None or not self.depth_path.exists():
            return None
        return load_depth(self.depth_path)

    @cached_property
    def masks(self) -> MaskSet:
        if self.mask_dir is None:
            return MaskSet({}, {})
        return load_masks(self.mask_dir, shape=(self.intr.height, self.intr.width))


def frame_ids(directory, suffix: str) -> List[int]:
    d = Path(directory)
    if not d.is_dir():
        return []
    return sorted(int(p.stem) for p in d.glob(f"*{suffix}") if p.stem.isdigit())


class SequenceDir:
    """Lazily loaded sequence directory (see module docstring for the layout)."""

    def __init__(self, root, image_size=None):
        self.root = Path(root)
        if not self.root.is_dir():
            raise FileNotFoundError(f"sequence directory {self.root} does not exist")
        calib_path = self.root / "calib.txt"
        if not calib_path.exists():
            raise FileNotFoundError(f"{calib_path} missing")
        self.calib = parse_calib(calib_path.read_text(), calib_path)
        if image_size is None:
            image_size = self._probe_image_size()
        self.width, self.height = image_size
        self.intr = self.calib.intrinsics(self.width, self.height)
        self.poses = self._load_poses()

    def _probe_image_size(self):
        from PIL import Image

        imgs = sorted((self.root / "image_2").glob("*.png"))
        if not imgs:
            raise FileNotFoundError(f"no images under {self.root / 'image_2'}")
        with Image.open(imgs[0]) as im:
            return im.size

    def _load_poses(self) -> Dict[int, SE3Transform]:
        pose_path = self.root / "poses.txt"
        if pose_path.exists():
            return dict(enumerate(parse_pose_file(pose_path.read_text(), pose_path)))
        ids = frame_ids(self.root / "oxts", ".txt")
        if not ids:
            raise FileNotFoundError(f"no poses.txt and no oxts under {self.root}")
        lines = []
        for f in ids:
            p = self.root / "oxts" / f"{f:06d}.txt"
            recs = [ln for ln in p.read_text().splitlines() if ln.strip()]
            if len(recs) != 1:
                raise FormatError("oxts file must hold exactly one record", p)
            parse_oxts_records(recs, p)
            lines.append(recs[0])
        imu = parse_oxts(lines, self.root / "oxts")
        cams = camera_poses_from_imu(imu, self.calib.imu_to_cam())
        return dict(zip(ids, cams))

    @property
    def frames(self) -> List[int]:
        return sorted(self.poses)

    def bundle(self, frame: int) -> FrameBundle:
        return FrameBundle(
            frame,
            self.poses[frame],
            self.intr,
            self.root / "image_2" / f"{frame:06d}.png",
            self.root / "depth" / f"{frame:06d}.png",
            self.root / "masks" / f"{frame:06d}",
        )

    def bundles(self) -> Dict[int, FrameBundle]:
        return {f: self.bundle(f) for f in self.frames}

    def _labels(self, sub: str, frame: int) -> List[LabelRecord]:
        p = self.root / sub / f"{frame:06d}.txt"
        return parse_labels(p.read_text(), p) if p.exists() else []

    def detections(self, frame: int) -> List[LabelRecord]:
        return self._labels("detections", frame)

    def labels(self, frame: int) -> List[LabelRecord]:
        return self._labels("labels", frame)




def read_label_dir(directory) -> Dict[int, List[LabelRecord]]:
    d = Path(directory)
    return {f: parse_labels((d / f"{f:06d}.txt").read_text(), d / f"{f:06d}.txt") for f in frame_ids(d, ".txt")}


def write_label_dir(labels: Dict[int, List[LabelRecord]], directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for f in sorted(labels):
        (d / f"{f:06d}.txt").write_text(write_labels(labels[f]))
