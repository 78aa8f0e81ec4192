import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from oracles import central_difference, dense_soft_silhouette, grad_close, ray_plane_depth
from pseudolabel3d.geom import CameraIntrinsics, ObjectPose
from pseudolabel3d.render import (
    RenderConfig,
    _face_data,
    _zbuffer,
    hard_depth,
    posed_vertices,
    raster_image,
    render_depth,
    render_silhouette,
    sigma_pixels,
    silhouette_vjp,
    soft_silhouette,
)
from pseudolabel3d.shape import (
    ShapeError,
    ShapeSpace,
    cuboid_space,
    decode,
    face_areas,
    load_shape_space,
    mesh_center,
    save_shape_space,
    signed_volume,
)

INTR = CameraIntrinsics(100.0, 100.0, 40.0, 30.0, 80, 60)
CFG = RenderConfig(80, 60, sigma=1e-3)
SPACE = cuboid_space()


def _vc(pose):
    m = decode(SPACE, [], pose.size)
    return posed_vertices(torch.as_tensor(m.vertices), torch.tensor(pose.yaw, dtype=torch.float64), torch.as_tensor(pose.t_c)).unsqueeze(0)


@given(
    st.floats(0.5, 3.0), st.floats(0.5, 3.0), st.floats(0.5, 6.0),
)
def test_decoded_cuboid_volume_and_centre(h, w, l):
    m = decode(SPACE, [], [h, w, l])
    assert signed_volume(m.vertices, m.faces) == pytest.approx(h * w * l)
    assert np.allclose(mesh_center(m), 0.0)
    assert face_areas(m.vertices, m.faces).sum() == pytest.approx(2 * (h * w + h * l + w * l))
    ext = m.vertices.max(0) - m.vertices.min(0)
    assert np.allclose(ext, [l, h, w])


def test_decode_rejects_bad_input():
    with pytest.raises(ShapeError):
        decode(SPACE, [0.1], [1, 1, 1])
    with pytest.raises(ShapeError):
        decode(SPACE, [], [1, 0, 1])
    with pytest.raises(ShapeError):
        ShapeSpace(np.zeros((3, 3)), np.zeros((0, 3, 3)), [[0, 1, 3]])


def test_shape_space_file_roundtrip(tmp_path, rng):
    mean = rng.normal(size=(8, 3)).astype(np.float32).astype(float)
    basis = rng.normal(size=(2, 8, 3)).astype(np.float32).astype(float)
    space = ShapeSpace(mean, basis, SPACE.faces)
    path = tmp_path / "s.shp"
    save_shape_space(space, path)
    back = load_shape_space(path)
    assert np.array_equal(back.mean_vertices, mean) and np.array_equal(back.basis, basis)
    assert np.array_equal(back.faces, SPACE.faces)
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(ShapeError):
        load_shape_space(path)


def test_embedding_moves_vertices(rng):
    basis = np.zeros((1, 8, 3))
    basis[0, :, 1] = 0.1
    space = ShapeSpace(SPACE.mean_vertices, basis, SPACE.faces)
    m = decode(space, [1.0], [2.0, 1.0, 1.0])
    assert np.allclose(mesh_center(m), [0.0, 0.2, 0.0])


def test_sigma_uses_short_side():
    assert sigma_pixels(1e-4, INTR) == pytest.approx(1e-4 * 30.0**2)


def test_soft_silhouette_matches_dense_oracle(rng):
    for _ in range(5):
        pose = ObjectPose(rng.uniform([-1, -0.5, 6], [1, 0.5, 12]), rng.uniform(-3, 3), rng.uniform(0.8, 3.0, 3))
        vc = _vc(pose)
        grid = torch.as_tensor(CFG.pixel_grid()).unsqueeze(0)
        s2 = sigma_pixels(CFG.sigma, INTR)
        ours = soft_silhouette(vc, torch.as_tensor(SPACE.faces), grid, INTR, s2, CFG.near)
        tri_uv, _, ok = _face_data(vc, torch.as_tensor(SPACE.faces), INTR, CFG.near)
        ref = dense_soft_silhouette(tri_uv, ok, grid, s2)
        assert torch.max(torch.abs(ours - ref)) < 1e-9


def test_silhouette_covers_projection_and_is_probability():
    pose = ObjectPose([0.0, 0.0, 10.0], 0.3, [1.5, 1.6, 4.0])
    sil = render_silhouette(decode(SPACE, [], pose.size), pose, INTR, CFG)
    assert sil.prob.shape == (60, 80)
    assert np.all((sil.prob >= 0) & (sil.prob <= 1))
    assert sil.prob[32, 36] > 0.99 and sil.prob[0, 0] < 1e-6


def test_object_behind_camera_renders_empty():
    pose = ObjectPose([0.0, 0.0, -10.0], 0.0, [1.5, 1.6, 4.0])
    m = decode(SPACE, [], pose.size)
    sil = render_silhouette(m, pose, INTR, CFG)
    assert sil.empty and not sil.prob.any()
    dep = render_depth(m, pose, INTR, CFG)
    assert dep.empty and not dep.valid.any()
    g = silhouette_vjp(SPACE, pose, INTR, CFG, np.ones((60, 80)))
    assert not np.any(g["t_c"])


def test_depth_of_front_face_matches_ray_plane(rng):
    pose = ObjectPose([0.2, 0.1, 10.0], 0.0, [1.5, 1.6, 4.0])
    dep = render_depth(decode(SPACE, [], pose.size), pose, INTR, CFG)
    # yaw 0: the face nearest the camera is the plane z = 10 - w/2
    for v, u in [(30, 40), (33, 38), (27, 44)]:
        expect = ray_plane_depth(INTR, u, v, np.array([0, 0, 10 - 0.8]), np.array([0, 0, 1.0]))
        assert dep.depth[v, u] == pytest.approx(expect, abs=1e-9)
    pose = ObjectPose([0.2, 0.1, 10.0], 0.6, [1.5, 1.6, 4.0])
    dep = render_depth(decode(SPACE, [], pose.size), pose, INTR, CFG)
    assert np.nanmax(dep.depth) <= 10.0 + 2.0 + 1e-9 and np.nanmin(dep.depth) > 10.0 - 2.2


def test_raster_image_agrees_with_grid_zbuffer(rng):
    for _ in range(3):
        poses = [ObjectPose(rng.uniform([-2, -0.5, 5], [2, 0.5, 15]), rng.uniform(-3, 3), rng.uniform(0.8, 3.0, 3)) for _ in range(2)]
        vc = torch.cat([_vc(p) for p in poses], 1)
        faces = torch.cat([torch.as_tensor(SPACE.faces), torch.as_tensor(SPACE.faces) + 8])
        tri_uv, tri_z, ok = _face_data(vc, faces, INTR, 0.1)
        grid = CFG.pixel_grid()[None]
        a = _zbuffer(tri_uv.numpy(), tri_z.numpy(), ok.numpy(), grid, 0.1, 200.0).reshape(60, 80)
        b = raster_image(tri_uv[0].numpy(), tri_z[0].numpy(), 80, 60, 0.1, 200.0)
        assert np.array_equal(a, b)


def test_silhouette_gradient_finite_difference(rng):
    pose = ObjectPose([0.3, 0.2, 9.0], 0.4, [1.5, 1.6, 3.9])
    cot = rng.normal(size=(60, 80))

    def f_t(t):
        p = pose.with_(t_c=t)
        return float((render_silhouette(decode(SPACE, [], p.size), p, INTR, CFG).prob * cot).sum())

    g = silhouette_vjp(SPACE, pose, INTR, CFG, cot)
    num = central_difference(f_t, pose.t_c, 1e-5)
    assert grad_close(g["t_c"], num)


def test_hard_depth_gradient_reaches_translation():
    pose = ObjectPose([0.0, 0.0, 10.0], 0.0, [1.5, 1.6, 4.0])
    vc = _vc(pose).clone().requires_grad_(True)
    grid = torch.tensor([[[40.0, 30.0]]], dtype=torch.float64)
    d, valid, _ = hard_depth(vc, torch.as_tensor(SPACE.faces), grid, INTR, 0.1, 200.0)
    assert bool(valid.all())
    (gv,) = torch.autograd.grad(d.sum(), vc)
    # shifting the whole box by dz shifts depth by dz
    assert float(gv[0, :, 2].sum()) == pytest.approx(1.0)
