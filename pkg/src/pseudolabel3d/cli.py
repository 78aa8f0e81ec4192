"""Command-line entry point: track, refine, eval, synth, stats, overlay."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import warnings
from pathlib import Path

import numpy as np
import yaml

from . import config as config_mod
from .evaluation import evaluate, format_table
from .kitti_io import SequenceDir, read_label_dir, write_label_dir

log = logging.getLogger("pseudolabel3d")

EXIT_USAGE = 2
EXIT_FAILURE = 1


class CLIError(Exception):
    def __init__(self, kind: str, message: str, code: int = EXIT_FAILURE):
        super().__init__(message)
        self.kind = kind
        self.code = code


def _require_dir(path, what):
    p = Path(path)
    if not p.is_dir():
        raise CLIError("missing-path", f"{what} {p} is not a directory", EXIT_USAGE)
    return p


def _require_file(path, what):
    p = Path(path)
    if not p.is_file():
        raise CLIError("missing-path", f"{what} {p} does not exist", EXIT_USAGE)
    return p


def _config(args, overrides=None):
    ov = {k: v for k, v in (overrides or {}).items() if v}
    if getattr(args, "seed", None) is not None:
        ov.setdefault("motion", {})["seed"] = args.seed
    cfg = config_mod.load(args.config, ov)
    sys.stderr.write("# effective configuration\n" + cfg.dump())
    return cfg


def _write_json(obj, path: Path):
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


# ---------------------------------------------------------------- commands


def cmd_track(args) -> int:
    from .refine import build_tracks, detections_from_labels, tracks_to_json

    root = _require_dir(args.dataset, "dataset")
    cfg = _config(args)
    seq = SequenceDir(root)
    dets = detections_from_labels({f: seq.detections(f) for f in seq.frames})
    tracks = build_tracks(dets, seq.poses, cfg.motion)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_json(tracks_to_json(tracks, cfg.motion), out)
    return 0


def cmd_refine(args) -> int:
    from .refine import refine_sequence, report_json

    root = _require_dir(args.dataset, "dataset")
    cfg = _config(args)
    seq = SequenceDir(root)
    dets = {f: seq.detections(f) for f in seq.frames}
    seed = args.seed if args.seed is not None else cfg.motion.seed
    jobs = args.jobs or os.cpu_count() or 1
    labels, report = refine_sequence(
        dets, seq.bundles(), cfg.refine, cfg.weights, cfg.priors, cfg.motion, seed=seed, jobs=jobs
    )
    out = Path(args.out)
    write_label_dir(labels, out / "labels")
    (out / "report.json").write_text(report_json(report))
    return 0


def _motion_index(path):
    from .synth import load_gt_motion

    return load_gt_motion(Path(path).parent)


def cmd_eval(args) -> int:
    pred = _require_dir(args.pred, "prediction directory")
    gt_dir = _require_dir(args.gt, "ground-truth directory")
    ov = {"eval": {}}
    if args.recall_points is not None:
        ov["eval"]["recall_points"] = args.recall_points
    if args.iou_threshold is not None:
        ov["eval"]["iou_threshold"] = args.iou_threshold
    cfg = _config(args, ov)
    dets = read_label_dir(pred)
    gt = read_label_dir(gt_dir)
    for f in gt:
        dets.setdefault(f, [])
    motion = None
    if args.motion_split:
        index = Path(args.motion_index) if args.motion_index else gt_dir.parent / "tracks.json"
        _require_file(index, "motion index")
        motion = _motion_index(index)
        for f, labs in gt.items():
            if len(motion.get(f, [])) != len(labs):
                raise CLIError("format", f"motion index does not cover every label of frame {f}")
    report = evaluate(dets, gt, cfg.eval, gt_motion=motion, depth=args.depth_stats)
    text = format_table(report) if args.format == "table" else json.dumps(report, indent=1, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_synth(args) -> int:
    from .synth import NoiseModel, SceneSpec, generate, random_scene

    spec_file = _require_file(args.spec, "scene spec")
    try:
        data = yaml.safe_load(spec_file.read_text()) or {}
    except yaml.YAMLError as exc:
        raise CLIError("format", f"{spec_file}: {exc}") from None
    if "random" in data:
        r = dict(data["random"])
        noise = NoiseModel(**data.get("noise", {}))
        seed = args.seed if args.seed is not None else r.pop("seed", 0)
        r.pop("seed", None)
        spec = random_scene(seed, noise=noise, **r)
    else:
        if args.seed is not None:
            data["seed"] = args.seed
        spec = SceneSpec.from_dict(data)
    sys.stderr.write("# scene\n" + yaml.safe_dump(spec.to_dict(), sort_keys=True, default_flow_style=None))
    generate(spec, args.out)
    return 0


def cmd_stats(args) -> int:
    root = _require_dir(args.labels, "label directory")
    labels = read_label_dir(root)
    cars = [lab for labs in labels.values() for lab in labs if lab.cls in args.classes]
    if not cars:
        raise CLIError("empty", f"no labels of class {args.classes} under {root}")
    dims = np.array([lab.dimensions for lab in cars])
    bottom = np.array([lab.location[1] for lab in cars])
    priors = {
        "priors": {
            "size_mean": [round(float(x), 4) for x in dims.mean(0)],
            "y_plane": round(float(np.median(bottom)), 4),
        }
    }
    text = yaml.safe_dump(priors, sort_keys=True, default_flow_style=None)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


_EDGES = [(0, 1), (1, 3), (3, 2), (2, 0), (4, 5), (5, 7), (7, 6), (6, 4), (0, 4), (1, 5), (2, 6), (3, 7)]


def cmd_overlay(args) -> int:
    from PIL import Image, ImageDraw

    from .geom import box_corners
    from .kitti_io import location_convention

    root = _require_dir(args.dataset, "dataset")
    lab_dir = _require_dir(args.labels, "label directory")
    seq = SequenceDir(root)
    labels = read_label_dir(lab_dir)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    intr = seq.intr
    for f in sorted(labels):
        img_path = root / "image_2" / f"{f:06d}.png"
        if not img_path.exists():
            continue
        with Image.open(img_path) as im:
            im = im.convert("RGB")
        draw = ImageDraw.Draw(im)
        for lab in labels[f]:
            if lab.is_dont_care:
                continue
            c = box_corners(location_convention(lab))
            if np.any(c[:, 2] <= 0.1):
                continue
            uv = np.stack([intr.fx * c[:, 0] / c[:, 2] + intr.cx, intr.fy * c[:, 1] / c[:, 2] + intr.cy], 1)
            for a, b in _EDGES:
                draw.line([tuple(uv[a]), tuple(uv[b])], fill=(255, 64, 32), width=2)
        im.save(out / f"{f:06d}.png")
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pseudolabel3d", description="Multi-view pseudo-label refinement for monocular 3D boxes.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        sp.add_argument("--config", help="YAML configuration file")
        if seed:
            sp.add_argument("--seed", type=int, default=None, help="seed for every random choice")

    sp = sub.add_parser("track", help="associate detections into tracks and fit motion")
    sp.add_argument("dataset")
    common(sp)
    sp.add_argument("--out", required=True, help="output track index (JSON)")
    sp.set_defaults(func=cmd_track)

    sp = sub.add_parser("refine", help="refine detections into pseudo-labels")
    sp.add_argument("dataset")
    common(sp)
    sp.add_argument("--jobs", type=int, default=None, help="worker processes (default: available cores)")
    sp.add_argument("--out", required=True, help="output directory (labels/ and report.json)")
    sp.set_defaults(func=cmd_refine)

    sp = sub.add_parser("eval", help="AP tables for predicted labels against ground truth")
    sp.add_argument("pred")
    sp.add_argument("gt")
    common(sp)
    sp.add_argument("--recall-points", type=int, choices=(11, 40), default=None)
    sp.add_argument("--iou-threshold", type=float, default=None)
    sp.add_argument("--motion-split", action="store_true", help="static / moving / overall split")
    sp.add_argument("--motion-index", help="tracks.json with gt motion classes (default: next to gt dir)")
    sp.add_argument("--depth-stats", action="store_true", help="add matched-object depth errors")
    sp.add_argument("--format", choices=("json", "table"), default="table")
    sp.add_argument("--out", help="write the report here instead of stdout")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("synth", help="generate a synthetic sequence")
    sp.add_argument("spec", help="scene spec YAML")
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("stats", help="size and ground-plane priors from a label corpus")
    sp.add_argument("labels")
    sp.add_argument("--classes", nargs="+", default=["Car"])
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_stats)

    sp = sub.add_parser("overlay", help="draw projected boxes onto the images")
    sp.add_argument("dataset")
    sp.add_argument("labels")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_overlay)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    warnings.filterwarnings("ignore", category=UserWarning, module="torch")
    try:
        return args.func(args)
    except CLIError as exc:
        err = {"error": exc.kind, "message": str(exc)}
        code = exc.code
    except (FileNotFoundError, NotADirectoryError) as exc:
        err, code = {"error": "missing-path", "message": str(exc)}, EXIT_USAGE
    except (config_mod.ConfigError, ValueError, KeyError) as exc:
        err, code = {"error": type(exc).__name__, "message": str(exc)}, EXIT_FAILURE
    sys.stderr.write(json.dumps(err, sort_keys=True) + "\n")
    return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
