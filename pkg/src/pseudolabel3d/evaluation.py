"""Rotated-box IoU, interpolated AP, difficulty levels, motion splits, depth errors."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .kitti_io import LabelRecord

AREA_EPS = 1e-12
DIFFICULTIES = ("easy", "moderate", "hard")
METRICS = ("bev", "3d", "2d")


@dataclass
class EvalConfig:
    iou_threshold: float = 0.5
    recall_points: int = 40
    # easy / moderate / hard; public benchmark constants
    min_height: Tuple[float, float, float] = (40.0, 25.0, 25.0)
    max_occlusion: Tuple[int, int, int] = (0, 1, 2)
    max_truncation: Tuple[float, float, float] = (0.15, 0.30, 0.50)
    classes: Tuple[str, ...] = ("Car",)

    def __post_init__(self):
        if not (0.0 < self.iou_threshold <= 1.0):
            raise ValueError(f"iou_threshold {self.iou_threshold} outside (0, 1]")
        if self.recall_points not in (11, 40):
            raise ValueError("recall_points must be 11 or 40")
        self.min_height = tuple(self.min_height)
        self.max_occlusion = tuple(self.max_occlusion)
        self.max_truncation = tuple(self.max_truncation)
        self.classes = tuple(self.classes)


@dataclass
class PRCurve:
    recall: np.ndarray
    precision: np.ndarray
    ap: Optional[float]  # None when there is no ground truth to recall
    n_gt: int
    n_det: int = 0

    def to_dict(self):
        return {"ap": self.ap, "n_gt": self.n_gt, "n_det": self.n_det}


# ---------------------------------------------------------------- IoU


def bev_corners(box) -> np.ndarray:
    """(x, z, w, l, yaw) -> (4, 2) corners in (x, z), counter-clockwise in that plane."""
    x, z, w, l, yaw = (float(v) for v in box)
    c, s = math.cos(yaw), math.sin(yaw)
    ax = np.array([c, -s]) * (l / 2.0)  # object length axis
    az = np.array([s, c]) * (w / 2.0)
    ctr = np.array([x, z])
    pts = np.array([ctr + ax + az, ctr - ax + az, ctr - ax - az, ctr + ax - az])
    if _signed_area(pts) < 0:
        pts = pts[::-1]
    return pts


def _signed_area(poly) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def clip_convex(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clip of a convex polygon by a counter-clockwise convex polygon."""
    out = [tuple(p) for p in subject]
    n = len(clip)
    for i in range(n):
        a, b = clip[i], clip[(i + 1) % n]
        ex, ey = b[0] - a[0], b[1] - a[1]
        inp, out = out, []
        if not inp:
            break

        def side(p):
            return ex * (p[1] - a[1]) - ey * (p[0] - a[0])

        prev = inp[-1]
        sp = side(prev)
        for cur in inp:
            sc = side(cur)
            if sc >= 0:
                if sp < 0:
                    out.append(_cross_point(prev, cur, sp, sc))
                out.append(cur)
            elif sp >= 0:
                out.append(_cross_point(prev, cur, sp, sc))
            prev, sp = cur, sc
    return np.array(out, dtype=float).reshape(-1, 2)


def _cross_point(p, q, sp, sq):
    t = sp / (sp - sq)
    return (p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1]))


def bev_intersection(a, b) -> float:
    pa, pb = bev_corners(a), bev_corners(b)
    if abs(_signed_area(pa)) < AREA_EPS or abs(_signed_area(pb)) < AREA_EPS:
        return 0.0
    return max(_signed_area(clip_convex(pa, pb)), 0.0)


def iou_bev(a, b) -> float:
    """IoU of two yawed rectangles on the ground plane, boxes as (x, z, w, l, yaw)."""
    area_a = float(a[2]) * float(a[3])
    area_b = float(b[2]) * float(b[3])
    if area_a < AREA_EPS or area_b < AREA_EPS:
        return 0.0
    inter = bev_intersection(a, b)
    union = area_a + area_b - inter
    return float(min(max(inter / union, 0.0), 1.0)) if union > AREA_EPS else 0.0


def iou_3d(a, b) -> float:
    """3D IoU of yaw-only boxes given as (x, y_centre, z, h, w, l, yaw)."""
    xa, ya, za, ha, wa, la, ra = (float(v) for v in a)
    xb, yb, zb, hb, wb, lb, rb = (float(v) for v in b)
    va, vb = ha * wa * la, hb * wb * lb
    if va < AREA_EPS or vb < AREA_EPS:
        return 0.0
    dy = min(ya + ha / 2, yb + hb / 2) - max(ya - ha / 2, yb - hb / 2)
    if dy <= 0:
        return 0.0
    inter = bev_intersection((xa, za, wa, la, ra), (xb, zb, wb, lb, rb)) * dy
    union = va + vb - inter
    return float(min(max(inter / union, 0.0), 1.0)) if union > AREA_EPS else 0.0


def iou_2d(a, b) -> float:
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return float(inter / union) if union > 0 else 0.0


def label_bev(lab: LabelRecord):
    h, w, l = lab.dimensions
    return (lab.location[0], lab.location[2], w, l, lab.rotation_y)


def label_box3d(lab: LabelRecord):
    h, w, l = lab.dimensions
    x, y, z = lab.location
    return (x, y - h / 2.0, z, h, w, l, lab.rotation_y)


def label_iou(a: LabelRecord, b: LabelRecord, metric: str) -> float:
    if metric == "bev":
        return iou_bev(label_bev(a), label_bev(b))
    if metric == "3d":
        return iou_3d(label_box3d(a), label_box3d(b))
    if metric == "2d":
        return iou_2d(a.bbox, b.bbox)
    raise ValueError(f"unknown metric {metric!r}")


# ---------------------------------------------------------------- difficulty


def _meets(lab: LabelRecord, cfg: EvalConfig, level: int) -> bool:
    height = lab.bbox[3] - lab.bbox[1]
    return (
        height >= cfg.min_height[level]
        and lab.occluded <= cfg.max_occlusion[level]
        and lab.truncated <= cfg.max_truncation[level]
    )


def assign_difficulty(gt: LabelRecord, cfg: EvalConfig | None = None) -> str:
    """Easiest level whose cuts the box satisfies (cuts are inclusive), else 'ignored'."""
    cfg = cfg or EvalConfig()
    for level, name in enumerate(DIFFICULTIES):
        if _meets(gt, cfg, level):
            return name
    return "ignored"


def _counts_at(gt: LabelRecord, cfg: EvalConfig, level: int) -> bool:
    # a box evaluated at a level must pass that level's cuts; easier boxes pass harder cuts too
    return gt.cls in cfg.classes and _meets(gt, cfg, level)


# ---------------------------------------------------------------- AP


def recall_grid(points: int) -> List[float]:
    if points == 11:
        return [k / 10 for k in range(11)]
    if points == 40:
        return [k / 40 for k in range(1, 41)]
    raise ValueError("recall_points must be 11 or 40")


def interpolated_ap(recall, precision, points: int) -> float:
    recall = np.asarray(recall, float)
    precision = np.asarray(precision, float)
    vals = []
    for r in recall_grid(points):
        sel = precision[recall >= r]
        vals.append(float(sel.max()) if len(sel) else 0.0)
    return math.fsum(vals) / len(vals)


@dataclass
class _Match:
    score: float
    order: int
    status: str  # "tp", "fp" or "ignore"
    gt_key: Optional[Tuple[int, int]] = None


def _match(dets, gts, cfg: EvalConfig, metric: str, level: int) -> Tuple[List[_Match], int, Dict]:
    """Greedy score-ordered matching over all frames at one difficulty.

    Returns (match records in rank order, number of counted gt, gt key -> counted flag).
    Ties in score keep detection input order (frame, then row).
    """
    ranked = []
    order = 0
    for f in sorted(set(dets) | set(gts)):
        for row, d in enumerate(dets.get(f, [])):
            if d.cls in cfg.classes:
                ranked.append((-(d.score if d.score is not None else 1.0), order, f, row, d))
            order += 1
    ranked.sort(key=lambda r: (r[0], r[1]))
    counted = {}
    for f, labs in gts.items():
        for j, g in enumerate(labs):
            if g.cls in cfg.classes:
                counted[(f, j)] = _counts_at(g, cfg, level)
            elif g.cls == "DontCare":
                counted[(f, j)] = False
    used = set()
    out = []
    for negscore, o, f, row, d in ranked:
        best_valid, best_ign = (-1.0, None), (-1.0, None)
        for j, g in enumerate(gts.get(f, [])):
            key = (f, j)
            if key not in counted or key in used:
                continue
            iou = label_iou(d, g, metric) if g.cls != "DontCare" else 0.0
            if iou < cfg.iou_threshold:
                continue
            if counted[key] and iou > best_valid[0]:
                best_valid = (iou, key)
            elif not counted[key] and iou > best_ign[0]:
                best_ign = (iou, key)
        if best_valid[1] is not None:
            used.add(best_valid[1])
            out.append(_Match(-negscore, o, "tp", best_valid[1]))
        elif best_ign[1] is not None:
            used.add(best_ign[1])
            out.append(_Match(-negscore, o, "ignore", best_ign[1]))
        elif d.bbox[3] - d.bbox[1] < cfg.min_height[level]:
            out.append(_Match(-negscore, o, "ignore"))
        else:
            out.append(_Match(-negscore, o, "fp"))
    return out, sum(counted.values()), counted


def _curve(flags: Sequence[bool], n_gt: int, points: int) -> PRCurve:
    flags = np.asarray(flags, dtype=bool)
    if n_gt == 0:
        return PRCurve(np.zeros(0), np.zeros(0), None, 0, len(flags))
    if len(flags) == 0:
        return PRCurve(np.zeros(0), np.zeros(0), 0.0, n_gt, 0)
    tp = np.cumsum(flags)
    rank = np.arange(1, len(flags) + 1)
    recall = tp / n_gt
    precision = tp / rank
    return PRCurve(recall, precision, interpolated_ap(recall, precision, points), n_gt, len(flags))


def average_precision(
    detections: Mapping[int, Sequence[LabelRecord]],
    ground_truth: Mapping[int, Sequence[LabelRecord]],
    cfg: EvalConfig | None = None,
    metric: str = "bev",
) -> Dict[str, PRCurve]:
    """PR curve and interpolated AP per difficulty for one metric ('bev', '3d' or '2d')."""
    cfg = cfg or EvalConfig()
    out = {}
    for level, name in enumerate(DIFFICULTIES):
        matches, n_gt, _ = _match(detections, ground_truth, cfg, metric, level)
        flags = [m.status == "tp" for m in matches if m.status != "ignore"]
        out[name] = _curve(flags, n_gt, cfg.recall_points)
    return out


def ap_from_flags(tp_flags: Sequence[bool], n_gt: int, points: int = 40) -> Optional[float]:
    """Interpolated AP of an already ranked TP/FP sequence."""
    return _curve(tp_flags, n_gt, points).ap


def motion_split_eval(
    detections,
    ground_truth,
    gt_motion: Mapping[int, Sequence[str]],
    cfg: EvalConfig | None = None,
    metric: str = "bev",
) -> Dict[str, Dict[str, PRCurve]]:
    """AP for {static, moving, overall}.

    A matched detection belongs to its ground truth's class; detections matched
    to the other class drop out of a split. Every unmatched detection counts as
    a false positive in both splits.
    """
    cfg = cfg or EvalConfig()
    result = {"overall": average_precision(detections, ground_truth, cfg, metric), "static": {}, "moving": {}}
    for level, name in enumerate(DIFFICULTIES):
        matches, _, counted = _match(detections, ground_truth, cfg, metric, level)
        for split in ("static", "moving"):
            flags = []
            for m in matches:
                if m.status == "fp":
                    flags.append(False)
                elif m.status == "tp" and gt_motion[m.gt_key[0]][m.gt_key[1]] == split:
                    flags.append(True)
            n_gt = sum(1 for k, c in counted.items() if c and gt_motion[k[0]][k[1]] == split)
            result[split][name] = _curve(flags, n_gt, cfg.recall_points)
    return result


# ---------------------------------------------------------------- depth error


def depth_error_stats(pred_depths, gt_depths, max_error: Optional[float] = None) -> dict:
    """Mean absolute depth error and Abs.Rel over matched pairs.

    Pairs with non-positive ground truth are excluded and counted; ``max_error``
    keeps only pairs whose absolute error is below it.
    """
    d = np.asarray(pred_depths, dtype=float).ravel()
    g = np.asarray(gt_depths, dtype=float).ravel()
    if d.shape != g.shape:
        raise ValueError("prediction and ground-truth depth arrays differ in length")
    ok = g > 0
    excluded = int((~ok).sum())
    d, g = d[ok], g[ok]
    err = np.abs(d - g)
    if max_error is not None:
        keep = err < max_error
        d, g, err = d[keep], g[keep], err[keep]
    if len(err) == 0:
        return {"mae": None, "abs_rel": None, "n": 0, "excluded": excluded}
    return {"mae": float(err.mean()), "abs_rel": float((err / g).mean()), "n": int(len(err)), "excluded": excluded}


def matched_pairs(detections, ground_truth, cfg: EvalConfig | None = None, metric: str = "bev"):
    """(detection, gt) label pairs from greedy matching at the loosest difficulty."""
    cfg = cfg or EvalConfig()
    matches, _, _ = _match(detections, ground_truth, cfg, metric, len(DIFFICULTIES) - 1)
    flat = {}
    order = 0
    for f in sorted(set(detections) | set(ground_truth)):
        for d in detections.get(f, []):
            flat[order] = d
            order += 1
    return [(flat[m.order], ground_truth[m.gt_key[0]][m.gt_key[1]]) for m in matches if m.status == "tp"]


def center_errors(detections, ground_truth, cfg: EvalConfig | None = None) -> np.ndarray:
    """3D centre distance for each gt to the same-row detection (aligned label files)."""
    out = []
    for f in sorted(ground_truth):
        for d, g in zip(detections.get(f, []), ground_truth[f]):
            out.append(np.linalg.norm(np.subtract(label_box3d(d)[:3], label_box3d(g)[:3])))
    return np.asarray(out)


# ---------------------------------------------------------------- reports


def evaluate(detections, ground_truth, cfg: EvalConfig | None = None, gt_motion=None, depth=True) -> dict:
    cfg = cfg or EvalConfig()
    rep = {"config": asdict(cfg), "ap": {}}
    for metric in METRICS:
        curves = average_precision(detections, ground_truth, cfg, metric)
        rep["ap"][metric] = {k: c.ap for k, c in curves.items()}
    if gt_motion is not None:
        rep["motion_split"] = {}
        for metric in ("bev", "3d"):
            sp = motion_split_eval(detections, ground_truth, gt_motion, cfg, metric)
            rep["motion_split"][metric] = {s: {k: c.ap for k, c in v.items()} for s, v in sp.items()}
    if depth:
        pairs = matched_pairs(detections, ground_truth, cfg)
        dz = [p[0].location[2] for p in pairs]
        gz = [p[1].location[2] for p in pairs]
        rep["depth_error"] = {"all": depth_error_stats(dz, gz), "below_6m": depth_error_stats(dz, gz, 6.0)}
    return rep


def _cell(v) -> str:
    return "-" if v is None else f"{100.0 * v:6.2f}"


def format_table(report: dict) -> str:
    rows = [f"{'':18s} {'Easy':>7s} {'Mod.':>7s} {'Hard':>7s}"]
    names = {"2d": "AP 2D", "bev": "AP BEV", "3d": "AP 3D"}
    for metric in ("2d", "bev", "3d"):
        if metric in report["ap"]:
            ap = report["ap"][metric]
            rows.append(f"{names[metric]:18s} " + " ".join(f"{_cell(ap[k]):>7s}" for k in DIFFICULTIES))
    for metric, splits in report.get("motion_split", {}).items():
        for split in ("static", "moving", "overall"):
            ap = splits[split]
            rows.append(f"{names[metric] + ' ' + split:18s} " + " ".join(f"{_cell(ap[k]):>7s}" for k in DIFFICULTIES))
    for key, st in report.get("depth_error", {}).items():
        if st["n"]:
            rows.append(f"depth {key}: MAE {st['mae']:.3f} m  Abs.Rel {st['abs_rel']:.4f}  n={st['n']}")
    return "\n".join(rows) + "\n"
