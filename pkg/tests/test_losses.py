import json
from dataclasses import asdict

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import central_difference, grad_close
from pseudolabel3d.geom import ObjectPose
from pseudolabel3d.losses import (
    TERMS,
    LossWeights,
    MaskObs,
    Priors,
    depth_center_loss,
    mv_sil_loss,
    photo_loss,
    sil_loss,
    size_loss,
    smooth_l1,
    total_loss,
    vertical_loss,
)
from scenarios import loss_problem

weights_st = st.builds(LossWeights, *[st.floats(0.0, 20.0) for _ in TERMS])


def test_default_weights():
    assert tuple(asdict(LossWeights()).values()) == (1.0, 1.0, 0.5, 10.0, 0.5, 1.0)
    with pytest.raises(ValueError):
        LossWeights(photo=-1.0)


def test_sil_loss_values_and_ignore():
    fg = np.array([[True, False], [False, False]])
    ign = np.array([[False, True], [False, False]])
    m = MaskObs.from_fg(fg, ign)
    prob = np.array([[0.9, 0.99], [0.2, 0.1]])
    loss, cot = sil_loss(prob, m)
    assert loss == pytest.approx(-(np.log(0.9) + np.log(0.8) + np.log(0.9)) / 3)
    assert cot[0, 1] == 0.0
    with pytest.raises(ValueError):
        sil_loss(np.zeros((3, 3)), m)
    with pytest.raises(ValueError):
        MaskObs(fg, fg)


def test_sil_loss_cotangent_matches_fd(rng):
    fg = rng.random((6, 7)) > 0.5
    m = MaskObs.from_fg(fg, rng.random((6, 7)) > 0.8)
    prob = rng.uniform(0.05, 0.95, (6, 7))
    _, cot = sil_loss(prob, m)
    num = central_difference(lambda p: sil_loss(p.reshape(6, 7), m)[0], prob.ravel(), 1e-7)
    assert grad_close(cot.ravel(), num)


def test_empty_label_set_is_zero():
    m = MaskObs(np.zeros((2, 2), bool), np.zeros((2, 2), bool))
    assert sil_loss(np.full((2, 2), 0.3), m)[0] == 0.0


@given(st.floats(-1, 3), st.floats(0.5, 3), st.floats(0.5, 3), st.floats(0.5, 3))
def test_closed_form_terms(y, h, w, l):
    pr = Priors()
    pose = ObjectPose([0.0, y, 10.0], 0.0, [h, w, l])
    val, g = vertical_loss(pose, pr)
    assert val == pytest.approx((y + h / 2 - 1.65) ** 2)
    assert g["t_c"][1] == pytest.approx(2 * (y + h / 2 - 1.65))
    val, g = size_loss([h, w, l], pr)
    num = central_difference(lambda s: size_loss(s, pr)[0], np.array([h, w, l]), 1e-6)
    assert grad_close(g, num)
    val, g = depth_center_loss([1.0, 2.0, 3.0], [1.0, 2.0, 3.0 + y])
    assert val == pytest.approx(y * y) and g[2] == pytest.approx(2 * y)


def test_smooth_l1_branches():
    r = np.array([-0.2, -0.01, 0.0, 0.03, 0.5])
    out = smooth_l1(r, 0.05)
    assert np.allclose(out, [0.175, 0.001, 0.0, 0.009, 0.475])


def test_total_loss_zero_weight_and_gated_terms():
    res = {"sil": (2.0, np.ones(3), np.ones(3)), "depth": None, "photo": (1.0, np.ones(3), np.zeros(3))}
    out = total_loss(res, LossWeights(photo=0.0))
    assert out.total == 2.0 and out.terms["depth"] == 0.0
    assert np.allclose(out.grad_t, 1.0)
    with pytest.raises(KeyError):
        total_loss({"bogus": (1.0, np.zeros(3), np.zeros(3))}, LossWeights())


@given(weights_st, weights_st, st.floats(-3, 3))
def test_total_loss_linear_in_weights(wa, wb, alpha):
    rng = np.random.default_rng(0)
    res = {k: (float(rng.random()), rng.normal(size=3), rng.normal(size=3)) for k in TERMS}
    combo = LossWeights(**{k: abs(alpha * asdict(wa)[k] + asdict(wb)[k]) for k in TERMS})
    direct = total_loss(res, combo).total
    by_term = sum(asdict(combo)[k] * res[k][0] for k in TERMS)
    assert abs(direct - by_term) <= 1e-9 * max(1.0, abs(by_term))
    a, b = total_loss(res, wa), total_loss(res, wb)
    sumw = LossWeights(**{k: asdict(wa)[k] + asdict(wb)[k] for k in TERMS})
    assert abs(total_loss(res, sumw).total - a.total - b.total) <= 1e-9 * max(1.0, a.total + b.total)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_numpy_path_agrees_with_autograd(seed):
    prob, t0, s0 = loss_problem(seed)
    a = prob.evaluate(t0, s0)
    b = prob.evaluate_np(t0, s0)
    for k in TERMS:
        assert b.terms[k] == pytest.approx(a.terms[k], rel=1e-9, abs=1e-11)
    assert np.allclose(a.grad_t, b.grad_t, rtol=1e-7, atol=1e-9)
    assert np.allclose(a.grad_size, b.grad_size, rtol=1e-7, atol=1e-9)


@pytest.mark.parametrize("seed", [3, 4])
def test_problem_gradients_fd(seed):
    prob, t0, s0 = loss_problem(seed)
    for name in ("mv_sil", "photo"):
        fn = mv_sil_loss if name == "mv_sil" else photo_loss
        _, gt, gs = fn(prob, t0, s0)
        x = np.r_[t0, s0]
        num = central_difference(lambda x: prob.term_gradient(name, x[:3], x[3:])[0], x, 1e-6)
        assert grad_close(np.r_[gt, gs], num), name


def test_problem_total_is_linear_in_weights():
    prob, t0, s0 = loss_problem(5)
    base = prob.evaluate(t0, s0)
    w = LossWeights(2.0, 0.3, 1.1, 4.0, 0.0, 7.0)
    out = prob.evaluate(t0, s0, w)
    assert abs(out.total - sum(asdict(w)[k] * base.terms[k] for k in TERMS)) <= 1e-9 * max(1.0, out.total)


def test_depth_term_gated_without_target():
    prob, t0, s0 = loss_problem(6, depth=False)
    out = prob.evaluate(t0, s0)
    assert out.terms["depth"] == 0.0 and "depth:gated" in out.flags


def test_photo_disabled_without_neighbours():
    prob, t0, s0 = loss_problem(7, n_views=1)
    out = prob.evaluate_np(t0, s0)
    assert out.terms["photo"] == 0.0 and out.terms["mv_sil"] == 0.0


def test_breakdown_json_roundtrip():
    prob, t0, s0 = loss_problem(8)
    rec = json.loads(prob.evaluate_np(t0, s0).to_json(frame=3))
    assert rec["frame"] == 3 and set(rec["terms"]) == set(TERMS)
