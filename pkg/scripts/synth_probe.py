"""Refine one synthetic sequence and compare against the noisy input."""

import argparse
import json
import time

import numpy as np

from pseudolabel3d.evaluation import EvalConfig, average_precision, label_box3d
from pseudolabel3d.kitti_io import SequenceDir, read_label_dir
from pseudolabel3d.losses import LossWeights
from pseudolabel3d.motion import MotionConfig
from pseudolabel3d.refine import RefineConfig, refine_sequence
from pseudolabel3d.synth import generate, random_scene


def centre_errors(dets, gt, det_rows):
    errs = []
    for f in sorted(dets):
        for d, g in zip(dets[f], det_rows[f]):
            errs.append(np.linalg.norm(np.subtract(label_box3d(d)[:3], label_box3d(gt[f][g])[:3])))
    return np.asarray(errs)


def run(seed, out, motion_cfg, cfg, jobs=1):
    truth = generate(random_scene(seed), out)
    seq = SequenceDir(out)
    gt = read_label_dir(f"{out}/labels")
    noisy = read_label_dir(f"{out}/detections")
    t = time.time()
    refined, report = refine_sequence(noisy, seq.bundles(), cfg, motion_cfg=motion_cfg, seed=seed, jobs=jobs)
    dt = time.time() - t
    e0 = centre_errors(noisy, gt, truth.detection_rows)
    e1 = centre_errors(refined, gt, truth.detection_rows)
    ecfg = EvalConfig()
    ap0 = average_precision(noisy, gt, ecfg, "bev")["hard"].ap
    ap1 = average_precision(refined, gt, ecfg, "bev")["hard"].ap
    return dict(seed=seed, time=dt, med0=float(np.median(e0)), med1=float(np.median(e1)), ap0=ap0, ap1=ap1,
                tracks=report["counts"], report=report, e0=e0, e1=e1)


if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--out", default="/tmp/probe")
    ap.add_argument("--motion", default="{}", help="JSON overrides for MotionConfig")
    ap.add_argument("--refine", default="{}", help="JSON overrides for RefineConfig")
    args = ap.parse_args()
    for s in args.seeds:
        mc = MotionConfig(**{"seed": s, **json.loads(args.motion)})
        r = run(s, f"{args.out}/{s}", mc, RefineConfig(**json.loads(args.refine)))
        print(json.dumps({k: r[k] for k in ("seed", "time", "med0", "med1", "ap0", "ap1", "tracks")}))
