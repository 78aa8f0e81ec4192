"""Acceptance criteria, one test per criterion.

Each test records a ``PASS``/``FAIL`` line (shown in the terminal summary and
printed with ``-s``) before asserting. Run alone with::

    pytest tests/test_acceptance.py -v
"""

import json
import time
from dataclasses import asdict, replace

import numpy as np
import pytest

import conftest
from oracles import central_difference, grad_close, monte_carlo_iou_3d, monte_carlo_iou_bev
from pseudolabel3d.cli import main
from pseudolabel3d.evaluation import EvalConfig, average_precision, iou_3d, iou_bev, label_box3d, motion_split_eval
from pseudolabel3d.geom import ObjectPose, SE3Transform, compose, frame_transform, warp_pose
from pseudolabel3d.kitti_io import (
    SequenceDir,
    load_depth,
    load_masks,
    parse_calib,
    parse_labels,
    parse_oxts_records,
    read_label_dir,
    save_depth,
    write_calib,
    write_labels,
    write_masks,
    write_oxts_record,
)
from pseudolabel3d.losses import TERMS, LossWeights, total_loss
from pseudolabel3d.motion import MotionConfig, fit_direction_ransac, speed_estimate
from pseudolabel3d.refine import RefineConfig, gate_depth, refine_sequence
from pseudolabel3d.synth import generate, load_gt_motion, random_scene
from scenarios import loss_problem, random_pose_chain, ransac_line


def record(n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}"
    conftest.ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


# 1 -------------------------------------------------------------------------

GRAD_TERMS = {"sil": "sil", "mv_sil": "mv_sil", "photo": "photo", "depth_center": "depth", "vertical": "y", "size": "size"}


def test_c1_gradient_suite():
    t0 = time.perf_counter()
    failures = {}
    for label, term in GRAD_TERMS.items():
        bad = 0
        for seed in range(20):
            prob, t, s = loss_problem(seed)
            _, gt, gs = prob.term_gradient(term, t, s)
            x = np.r_[t, s]
            num = central_difference(lambda x: prob.term_gradient(term, x[:3], x[3:])[0], x, 1e-6)
            bad += not grad_close(np.r_[gt, gs], num, rel=0.02, abs_=1e-4)
        failures[label] = bad
    dt = time.perf_counter() - t0
    ok = all(v == 0 for v in failures.values()) and dt < 120
    record(1, ok, f"FD failures per term {failures} over 20 seeds, {dt:.1f}s (< 120s)")
    assert ok


# 2 -------------------------------------------------------------------------


def _box_pair(rng):
    a = np.array([0.0, rng.uniform(-1, 1), 0.0, *rng.uniform([1.2, 1.3, 3.0], [2.0, 2.0, 5.0]), rng.uniform(-np.pi, np.pi)])
    b = a.copy()
    b[[0, 1, 2]] += rng.normal(scale=[0.8, 0.3, 0.8])
    b[3:6] *= rng.uniform(0.8, 1.2, 3)
    b[6] += rng.normal(scale=0.5)
    return a, b


def test_c2_iou_oracle():
    rng = np.random.default_rng(2)
    t0 = time.perf_counter()
    worst_bev = worst_3d = 0.0
    for k in range(200):
        a, b = _box_pair(rng)
        bev_a, bev_b = (a[0], a[2], a[4], a[5], a[6]), (b[0], b[2], b[4], b[5], b[6])
        worst_bev = max(worst_bev, abs(iou_bev(bev_a, bev_b) - monte_carlo_iou_bev(bev_a, bev_b, seed=k)))
        worst_3d = max(worst_3d, abs(iou_3d(a, b) - monte_carlo_iou_3d(a, b, seed=k)))
    dt = time.perf_counter() - t0
    ok = worst_bev <= 0.01 and worst_3d <= 0.01 and dt < 60
    record(2, ok, f"max |iou - MC(1e6)| BEV {worst_bev:.4f}, 3D {worst_3d:.4f} over 200 pairs, {dt:.1f}s (< 60s)")
    assert ok


# 3 -------------------------------------------------------------------------


def test_c3_ap_golden():
    from test_evaluation import golden_scene

    dets, gt = golden_scene()
    r11 = average_precision(dets, gt, EvalConfig(recall_points=11))["moderate"].ap
    r40 = average_precision(dets, gt, EvalConfig(recall_points=40))["moderate"].ap
    ok = r11 == 9.25 / 11 and r40 == 0.83125
    record(3, ok, f"R11 {r11!r} (want 9.25/11), R40 {r40!r} (want 0.83125)")
    assert ok


# 4 -------------------------------------------------------------------------


def test_c4_ransac_recovery():
    good, speed_err = 0, []
    for seed in range(100):
        pts, direction, speed, _ = ransac_line(seed, outlier_frac=0.3, sigma=0.2)
        d, inl = fit_direction_ransac(pts, MotionConfig(seed=seed))
        good += np.degrees(np.arccos(np.clip(d @ direction, -1, 1))) <= 2.0
        speed_err.append(abs(speed_estimate(pts, inl, direction=d) - speed) / speed)
    med = float(np.median(speed_err))
    ok = good >= 95 and med <= 0.10
    record(4, ok, f"direction within 2 deg in {good}/100 seeds (>= 95), median speed error {100 * med:.2f}% (<= 10%)")
    assert ok


# 5 -------------------------------------------------------------------------


def test_c5_warp_identity_and_chains():
    rng = np.random.default_rng(5)
    worst_id = 0.0
    for _ in range(200):
        p = ObjectPose(rng.uniform(-30, 30, 3), rng.uniform(-np.pi, np.pi), rng.uniform(0.5, 5, 3))
        q = warp_pose(p, SE3Transform.identity(), np.zeros(3))
        worst_id = max(worst_id, float(np.max(np.abs(q.t_c - p.t_c))), abs(q.yaw - p.yaw))
    worst_chain = 0.0
    for _ in range(50):
        poses = random_pose_chain(rng, 8)
        i, j, k = rng.choice(8, 3)
        chained = compose(frame_transform(poses, j, k), frame_transform(poses, i, j))
        worst_chain = max(worst_chain, float(np.max(np.abs(chained.matrix() - frame_transform(poses, i, k).matrix()))))
    ok = worst_id <= 1e-12 and worst_chain <= 1e-8
    record(5, ok, f"identity warp max error {worst_id:.1e} (<= 1e-12), chain inconsistency {worst_chain:.1e} (<= 1e-8)")
    assert ok


# 6 -------------------------------------------------------------------------


def test_c6_depth_gate():
    init = ObjectPose([2.0, 1.0, 30.0], 0.3, [1.5, 1.6, 3.9])
    far = ObjectPose([0.0, 1.0, 88.0], 0.0, [1.5, 1.6, 3.9])
    u = np.array([0.6, 0.0, 0.8])
    r90 = gate_depth([0.0, 1.0, 90.0], far)
    r61 = gate_depth(init.t_c + 6.1 * u, init)
    r59 = gate_depth(init.t_c + 5.9 * u, init)
    ok = not r90[0] and not r61[0] and r59[0]
    record(6, ok, f"z=90m -> {r90[1]}, 6.1m -> {r61[1]}, 5.9m -> {r59[1]}")
    assert ok


# 7 -------------------------------------------------------------------------


def test_c7_weights_and_linearity():
    defaults = tuple(asdict(LossWeights()).values())
    rng = np.random.default_rng(7)
    worst = 0.0
    prob, t, s = loss_problem(1)
    base = prob.evaluate(t, s)
    for _ in range(50):
        wa, wb = (LossWeights(*rng.uniform(0, 20, 6)) for _ in range(2))
        alpha, beta = rng.uniform(0, 3, 2)
        combo = LossWeights(**{k: alpha * asdict(wa)[k] + beta * asdict(wb)[k] for k in TERMS})
        res = {k: (base.terms[k], np.zeros(3), np.zeros(3)) for k in TERMS}
        lhs = total_loss(res, combo).total
        rhs = alpha * total_loss(res, wa).total + beta * total_loss(res, wb).total
        worst = max(worst, abs(lhs - rhs) / max(1.0, abs(rhs)))
        worst = max(worst, abs(prob.evaluate_np(t, s, combo).total - lhs) / max(1.0, abs(lhs)))
    ok = defaults == (1.0, 1.0, 0.5, 10.0, 0.5, 1.0) and worst <= 1e-9
    record(7, ok, f"defaults {defaults}, max relative linearity error {worst:.1e} (<= 1e-9)")
    assert ok


# 8 -------------------------------------------------------------------------

# association and classification tuned for the noise level of this scenario:
# at sigma_t = 0.5 + 0.05 z, per-frame centre jitter of parked cars reaches 2-3 m
SCENARIO_MOTION = dict(gate_radius=10.0, inlier_threshold=3.0, motion_threshold=0.45)


def _centre_errors(dets, gt, det_rows):
    return np.array(
        [
            np.linalg.norm(np.subtract(label_box3d(d)[:3], label_box3d(gt[f][g])[:3]))
            for f in sorted(dets)
            for d, g in zip(dets[f], det_rows[f])
        ]
    )


@pytest.mark.slow
def test_c8_end_to_end_synthetic(tmp_path):
    t0 = time.perf_counter()
    rows, wins = [], 0
    for seed in range(10):
        out = tmp_path / str(seed)
        truth = generate(random_scene(seed, n_static=3, n_moving=2, n_frames=20), out)
        gt = read_label_dir(out / "labels")
        noisy = read_label_dir(out / "detections")
        refined, _ = refine_sequence(
            noisy, SequenceDir(out).bundles(), RefineConfig(), motion_cfg=MotionConfig(seed=seed, **SCENARIO_MOTION), seed=seed
        )
        e0 = np.median(_centre_errors(noisy, gt, truth.detection_rows))
        e1 = np.median(_centre_errors(refined, gt, truth.detection_rows))
        ap0 = average_precision(noisy, gt, EvalConfig(), "bev")["hard"].ap
        ap1 = average_precision(refined, gt, EvalConfig(), "bev")["hard"].ap
        win = e1 <= 0.7 * e0 and ap1 > ap0
        wins += win
        rows.append(f"seed {seed}: median err {e0:.2f}->{e1:.2f} m, AP BEV {ap0:.3f}->{ap1:.3f} {'ok' if win else 'miss'}")
    dt = time.perf_counter() - t0
    print("\n".join(rows))
    ok = wins >= 9 and dt < 600
    record(8, ok, f"{wins}/10 seeds with error <= 70% and higher AP BEV@0.5 (>= 9), {dt:.0f}s (< 600s)")
    assert ok


# 9 -------------------------------------------------------------------------


def test_c9_motion_split(small_scene_dir):
    root, spec, truth = small_scene_dir
    gt = read_label_dir(root / "labels")
    motion = load_gt_motion(root)
    noisy = read_label_dir(root / "detections")
    equal = True
    for dets in (noisy, gt):
        for metric in ("bev", "3d"):
            split = motion_split_eval(dets, gt, motion, EvalConfig(), metric)["overall"]
            plain = average_precision(dets, gt, EvalConfig(), metric)
            equal &= all(split[k].ap == plain[k].ap for k in plain)
    perfect = {f: [replace(lab, score=0.5) for lab in labs] for f, labs in gt.items()}
    before = motion_split_eval(perfect, gt, motion)
    spoiled = {f: list(v) for f, v in perfect.items()}
    for f in spoiled:
        spoiled[f].append(replace(spoiled[f][0], location=(30.0, 1.6, 45.0), score=0.9))
    after = motion_split_eval(spoiled, gt, motion)
    drops = {s: (before[s]["hard"].ap, after[s]["hard"].ap) for s in ("static", "moving")}
    reduced = all(a < b for b, a in drops.values())
    ok = equal and reduced
    record(9, ok, f"overall == plain AP: {equal}; hard AP before/after injected FPs {drops}")
    assert ok


# 10 ------------------------------------------------------------------------


def test_c10_format_roundtrips(small_scene_dir, tmp_path):
    root, spec, _ = small_scene_dir
    checks = {}
    text = (root / "calib.txt").read_text()
    checks["calib"] = write_calib(parse_calib(write_calib(parse_calib(text)))) == text
    ok_ox = ok_lab = ok_dep = ok_mask = True
    for f in range(spec.n_frames):
        n = f"{f:06d}"
        line = (root / "oxts" / f"{n}.txt").read_text()
        ok_ox &= write_oxts_record(parse_oxts_records([line])[0]) == line
        for sub in ("labels", "detections"):
            t = (root / sub / f"{n}.txt").read_text()
            once = parse_labels(t)
            ok_lab &= write_labels(once) == t and parse_labels(write_labels(once)) == once
        d = load_depth(root / "depth" / f"{n}.png")
        save_depth(d, tmp_path / "d.png")
        ok_dep &= (tmp_path / "d.png").read_bytes() == (root / "depth" / f"{n}.png").read_bytes()
        ok_dep &= np.array_equal(load_depth(tmp_path / "d.png"), d, equal_nan=True)
        ms = load_masks(root / "masks", f)
        write_masks(ms, tmp_path / "m" / n)
        back = load_masks(tmp_path / "m", f)
        ok_mask &= back.index == ms.index and all(np.array_equal(back.masks[k], ms.masks[k]) for k in ms.masks)
        ok_mask &= all(
            (tmp_path / "m" / n / p.name).read_bytes() == p.read_bytes() for p in (root / "masks" / n).iterdir()
        )
    checks.update(oxts=ok_ox, labels=ok_lab, depth=ok_dep, masks=ok_mask)
    ok = all(checks.values())
    record(10, ok, f"fixed points and bit-exact synth re-read {checks}")
    assert ok


# 11 ------------------------------------------------------------------------


def test_c11_refine_determinism(small_scene_dir, tmp_path):
    root, _, _ = small_scene_dir
    runs = []
    for name, jobs in (("run1", 1), ("run2", 1), ("jobs2", 2)):
        out = tmp_path / name
        assert main(["refine", str(root), "--out", str(out), "--seed", "11", "--jobs", str(jobs)]) == 0
        runs.append({p.relative_to(out): p.read_bytes() for p in sorted(out.rglob("*")) if p.is_file()})
    same = runs[0] == runs[1] == runs[2] and len(runs[0]) > 1
    n_items = json.loads(runs[0][next(k for k in runs[0] if k.name == "report.json")])["counts"]["items"]
    record(11, same, f"{len(runs[0])} output files, {n_items} refined items, identical across reruns and --jobs 1/2: {same}")
    assert same
