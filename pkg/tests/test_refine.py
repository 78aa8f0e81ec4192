import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pseudolabel3d.geom import CameraIntrinsics, ObjectPose, allocentric_angle, backproject, wrap_angle
from pseudolabel3d.kitti_io import SequenceDir
from pseudolabel3d.losses import LossWeights
from pseudolabel3d.motion import MOVING, STATIC, Detection, MotionConfig, Track
from pseudolabel3d.refine import (
    RefineConfig,
    build_tracks,
    depth_center,
    detections_from_labels,
    gate_depth,
    refine_pose,
    refine_sequence,
    report_json,
    sample_views,
)
from pseudolabel3d.synth import NoiseModel, generate, random_scene

INTR = CameraIntrinsics(500.0, 500.0, 100.0, 80.0, 200, 160)
ZERO = NoiseModel(0.0, 0.0, 0.0, 0.0, 0.0)


def _det(frame, pose):
    return Detection(frame, pose, (10, 10, 60, 50), 0.9, row=0)


def _arc_track(n=20, cls=STATIC):
    # camera passes the car: viewing ray angle sweeps monotonically with the frame
    dets = [_det(f, ObjectPose([6.0, 1.0, 25.0 - 1.2 * f], math.pi / 2, [1.5, 1.6, 3.9])) for f in range(n)]
    return Track(0, dets, motion_class=cls)


@pytest.fixture(scope="module")
def static_scenes(tmp_path_factory):
    out = []
    for seed in (0, 1):
        spec = random_scene(seed, n_static=3, n_moving=0, n_frames=12, noise=ZERO)
        root = tmp_path_factory.mktemp(f"static{seed}")
        generate(spec, root)
        seq = SequenceDir(root)
        dets = detections_from_labels({f: seq.detections(f) for f in seq.frames})
        out.append((seq, seq.bundles(), build_tracks(dets, seq.poses, MotionConfig())))
    return out


def test_config_validation():
    with pytest.raises(ValueError):
        RefineConfig(n_views=0)
    with pytest.raises(ValueError):
        RefineConfig(depth_gate_radius=0.0)
    with pytest.raises(ValueError):
        RefineConfig(depth_range=(80, 0))
    assert (RefineConfig().n_views, RefineConfig().depth_gate_radius, RefineConfig().depth_range) == (4, 6.0, (0.0, 80.0))


def test_single_detection_track_is_single_view():
    tr = Track(0, [_det(3, ObjectPose([0, 1, 10], 0, [1.5, 1.6, 3.9]))])
    assert sample_views(tr, 3, None, RefineConfig()) == ([3], ["single-view"])
    with pytest.raises(KeyError):
        sample_views(tr, 4, None, RefineConfig())


def test_moving_track_uses_adjacent_frames():
    tr = _arc_track(cls=MOVING)
    assert sample_views(tr, 10, None, RefineConfig())[0] == [8, 9, 11, 12]
    assert sample_views(tr, 0, None, RefineConfig())[0] == [1, 2, 3, 4]


def test_static_views_spread_beats_any_contiguous_window():
    tr = _arc_track()
    cfg = RefineConfig()
    i = 10
    views, flags = sample_views(tr, i, None, cfg)
    assert len(views) == 4 and i not in views and not flags
    ang = {d.frame: allocentric_angle(d.pose) for d in tr.detections}

    def spread(frames):
        a = [ang[f] for f in frames]
        return max(abs(wrap_angle(x - y)) for x in a for y in a)

    cands = [f for f in ang if f != i and abs(f - i) <= cfg.window]
    best_window = max(spread(cands[s : s + 4]) for s in range(len(cands) - 3))
    assert spread(views) >= best_window - 1e-12
    assert sample_views(tr, i, None, cfg) == (views, flags)


def test_static_views_respect_window_and_observations():
    tr = _arc_track(40)
    views, _ = sample_views(tr, 20, None, RefineConfig(window=5))
    assert all(abs(v - 20) <= 5 for v in views)
    tr.detections = [d for d in tr.detections if d.frame not in (15, 25)]
    views, _ = sample_views(tr, 20, None, RefineConfig(window=5))
    assert 15 not in views and 25 not in views


def _disc(shape, c, r):
    vv, uu = np.mgrid[: shape[0], : shape[1]]
    return (uu - c[0]) ** 2 + (vv - c[1]) ** 2 <= r * r


def test_depth_center_uniform_disc():
    m = _disc((160, 200), (130, 60), 12)
    p, why = depth_center(m, np.full(m.shape, 10.0), INTR)
    assert why == "ok" and p[2] == pytest.approx(10.0)
    assert np.allclose(p, backproject(INTR, [130.0, 60.0], 10.0), atol=1e-9)


def test_depth_center_mad_filter_drops_sky_bleed(rng):
    m = _disc((160, 200), (100, 80), 15)
    d = np.full(m.shape, np.nan)
    d[m] = 10.0 + rng.normal(scale=0.1, size=m.sum())
    vs, us = np.nonzero(m)
    bleed = rng.random(len(vs)) < 0.2
    d[vs[bleed], us[bleed]] = 80.0
    p, _ = depth_center(m, d, INTR)
    good = ~bleed
    ref = backproject(INTR, np.stack([us[good], vs[good]], 1).astype(float), d[vs[good], us[good]]).mean(0)
    assert np.linalg.norm(p - ref) < 0.2


def test_depth_center_rejections():
    assert depth_center(np.zeros((10, 10), bool), np.ones((10, 10)), INTR)[0] is None
    assert depth_center(np.ones((10, 10), bool), None, INTR)[1] == "no-depth-map"
    few = np.zeros((10, 10), bool)
    few[0, :9] = True
    assert depth_center(few, np.ones((10, 10)), INTR)[1].startswith("too-few")


def test_depth_gate_constants():
    init = ObjectPose([0.0, 1.0, 40.0], 0.0, [1.5, 1.6, 3.9])
    assert gate_depth([0.0, 1.0, 90.0], ObjectPose([0, 1, 88.0], 0, [1, 1, 1])) == (False, "out-of-range")
    assert gate_depth(init.t_c + [0, 0, 5.9], init)[0]
    assert gate_depth(init.t_c + [0, 0, 6.1], init) == (False, "too-far-from-initial")
    assert gate_depth(init.t_c, init) == (True, "accepted")
    assert gate_depth(None, init) == (False, "no-center")


@given(st.floats(0.1, 20), st.floats(0.1, 20), st.floats(-10, 10), st.floats(-10, 10), st.floats(1, 90))
def test_depth_gate_monotone_in_radius(r1, r2, dx, dz, z):
    lo, hi = sorted([r1, r2])
    init = ObjectPose([0.0, 1.0, 30.0], 0.0, [1.5, 1.6, 3.9])
    c = [dx, 1.0, z + dz]
    if gate_depth(c, init, RefineConfig(depth_gate_radius=lo))[0]:
        assert gate_depth(c, init, RefineConfig(depth_gate_radius=hi))[0]


def _middle(track):
    return track.frames[len(track.frames) // 2]


def test_zero_steps_returns_input(static_scenes):
    seq, frames, tracks = static_scenes[0]
    tr = tracks[0]
    i = _middle(tr)
    res = refine_pose(tr, i, frames, cfg=RefineConfig(steps=0), poses=seq.poses)
    assert res.refined == tr.at(i).pose and not res.history


def test_all_terms_gated_is_unoptimized(static_scenes):
    seq, frames, tracks = static_scenes[0]
    tr = tracks[1]
    i = _middle(tr)
    res = refine_pose(tr, i, frames, weights=LossWeights(0, 0, 0, 0, 0, 0), poses=seq.poses)
    assert "unoptimized" in res.flags and res.refined == tr.at(i).pose


def test_refine_keeps_yaw_embedding_and_never_increases_loss(static_scenes):
    seq, frames, tracks = static_scenes[0]
    for tr in tracks:
        i = _middle(tr)
        noisy = [dataclasses.replace(d, pose=d.pose.with_(t_c=d.pose.t_c + [0.3, -0.1, 1.0])) for d in tr.detections]
        tr2 = dataclasses.replace(tr, detections=noisy)
        res = refine_pose(tr2, i, frames, cfg=RefineConfig(steps=40), poses=seq.poses)
        init = tr2.at(i).pose
        assert res.refined.yaw == init.yaw
        assert np.array_equal(res.refined.embedding, init.embedding)
        assert len(res.history) <= 40 and np.all(res.refined.size > 0)
        assert res.final_loss <= res.initial_loss + 1e-9
        assert res.final_loss <= min(b.total for b in res.history) + 1e-12
        assert len(res.views) >= 1 and res.gates["depth"] in ("accepted", "too-far-from-initial", "out-of-range", "no-center")


def test_ground_truth_start_does_not_drift(static_scenes):
    # depth term off: its target is the visible-surface mean, not the box centre
    drifts = []
    for seq, frames, tracks in static_scenes:
        for tr in tracks:
            i = _middle(tr)
            res = refine_pose(tr, i, frames, weights=LossWeights(depth=0.0), poses=seq.poses)
            drifts.append(np.linalg.norm(res.refined.t_c - tr.at(i).pose.t_c))
    assert max(drifts) < 0.35
    assert np.median(drifts) < 0.15


def test_depth_offset_is_mostly_recovered(static_scenes):
    errs = []
    for seq, frames, tracks in static_scenes:
        for tr in tracks:
            i = _middle(tr)
            truth = tr.at(i).pose.t_c
            off = [dataclasses.replace(d, pose=d.pose.with_(t_c=d.pose.t_c + [0.0, 0.0, 2.0])) for d in tr.detections]
            res = refine_pose(dataclasses.replace(tr, detections=off), i, frames, poses=seq.poses)
            errs.append(np.linalg.norm(res.refined.t_c - truth))
    assert np.median(errs) < 0.4 * 2.0
    assert max(errs) < 2.0


def test_empty_sequence():
    labels, report = refine_sequence({}, {})
    assert labels == {} and report["counts"]["items"] == 0
    assert report_json(report) == report_json(refine_sequence({}, {})[1])
