import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from endorecon import autodiff as ad
from endorecon.field_core import VoxelField
from endorecon.motion_field import MotionField
from endorecon.renderer import (Camera, DynamicField, PixelOutOfBounds, composite, compositing_weights,
                                counter_uniform, generate_rays, render, render_image, sample_along_ray)

import gradcheck

LN2 = np.log(2.0)


def _composite(sigma, colors, delta, z):
    rgb, depth, op, w = composite(ad.NO_GRAD, ad.Var(np.atleast_2d(sigma)), ad.Var(colors[None]),
                                  np.atleast_2d(delta), np.atleast_2d(z))
    return rgb.value[0], depth.value[0], op.value[0], w[0]


# ---------------------------------------------------------------- rays


def test_principal_ray_is_optical_axis():
    cam = Camera(100, 100, 50, 50, 101, 101)
    r = generate_rays(cam, [[50, 50]], near=0.1, far=2.0)
    assert np.allclose(r.directions[0], [0, 0, 1], atol=1e-15)


def test_offset_pixel_direction():
    cam = Camera(100, 100, 50, 50, 200, 100)
    r = generate_rays(cam, [[150, 50]], near=0.1, far=2.0)
    assert np.allclose(r.directions[0] / r.directions[0, 2], [1, 0, 1], atol=1e-15)
    assert abs(np.linalg.norm(r.directions[0]) - 1) < 1e-12


def test_ray_plane_round_trip(rng):
    cam = Camera(60, 55, 31.5, 23.5, 64, 48)
    pix = np.stack([rng.integers(0, 64, 20), rng.integers(0, 48, 20)], axis=1)
    r = generate_rays(cam, pix, near=0.1, far=5)
    D = 1.7
    s = D / r.directions[:, 2]
    p = r.origins + s[:, None] * r.directions
    uv, z = cam.project(p)
    assert np.allclose(uv, pix, atol=1e-9)
    assert np.allclose(z, D, atol=1e-12)


def test_pixel_out_of_bounds():
    cam = Camera(10, 10, 4, 4, 8, 8)
    with pytest.raises(PixelOutOfBounds):
        generate_rays(cam, [[8, 0]], near=0.1, far=1)
    with pytest.raises(PixelOutOfBounds):
        generate_rays(cam, [[0, -1]], near=0.1, far=1)


def test_camera_validation():
    with pytest.raises(ValueError):
        Camera(0, 10, 4, 4, 8, 8)
    with pytest.raises(ValueError):
        Camera(10, 10, 8, 4, 8, 8)


def test_box_interval_matches_geometry():
    cam = Camera(10, 10, 4, 4, 9, 9)
    b = np.array([[-1, -1, 2.0], [1, 1, 3.0]])
    r = generate_rays(cam, [[4, 4]], bounds=b)
    assert r.near[0] == pytest.approx(2.0) and r.far[0] == pytest.approx(3.0)


# ---------------------------------------------------------------- sampling


def test_midpoint_samples_example():
    z, d = sample_along_ray(0.0, 1.0, 2)
    assert np.allclose(z, [[0.25, 0.75]], atol=1e-15)
    assert np.allclose(d, [[0.5, 0.25]], atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(near=st.floats(0, 5), span=st.floats(1e-3, 5), m=st.integers(2, 64), seed=st.integers(0, 99))
def test_steps_telescope(near, span, m, seed):
    far = near + span
    jit = np.random.default_rng(seed).uniform(size=(1, m))
    for j in (None, jit):
        z, d = sample_along_ray(near, far, m, j)
        assert np.all(d >= -1e-12)
        assert d.sum() <= span + 1e-9
        assert np.all((z >= near) & (z <= far))


def test_sampling_deterministic_without_jitter():
    a = sample_along_ray([0.1, 0.2], [1.0, 2.0], 16)
    b = sample_along_ray([0.1, 0.2], [1.0, 2.0], 16)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_counter_jitter_independent_of_batch_order():
    ids = np.array([5, 17, 3, 99])
    a = counter_uniform(7, ids, 8, step=3)
    b = counter_uniform(7, ids[::-1], 8, step=3)[::-1]
    assert np.array_equal(a, b)
    assert np.all((a >= 0) & (a < 1))
    assert not np.array_equal(a, counter_uniform(7, ids, 8, step=4))


# ---------------------------------------------------------------- compositing


def test_transparent_ray():
    rgb, depth, op, w = _composite(np.zeros(5), np.ones((5, 3)), np.full(5, 0.1), np.arange(5.0))
    assert np.all(rgb == 0) and depth == 0 and op == 0


def test_single_half_weight():
    sigma = np.array([LN2, 0.0, 0.0])
    colors = np.array([[1.0, 0, 0], [0, 1, 0], [0, 0, 1]])
    rgb, _, _, w = _composite(sigma, colors, np.ones(3), np.arange(3.0))
    assert abs(w[0] - 0.5) <= 1e-12 and np.all(np.abs(w[1:]) <= 1e-12)
    assert np.allclose(rgb, [0.5, 0, 0], atol=1e-12)


def test_two_sample_weights():
    sigma = np.array([LN2, LN2])
    c1, c2 = np.array([0.2, 0.4, 0.6]), np.array([1.0, 0.0, 0.5])
    rgb, _, op, w = _composite(sigma, np.stack([c1, c2]), np.ones(2), np.arange(2.0))
    assert np.allclose(w, [0.5, 0.25], atol=1e-12)
    assert np.allclose(rgb, 0.5 * c1 + 0.25 * c2, atol=1e-12)
    assert op == pytest.approx(0.75, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 10_000), m=st.integers(1, 40))
def test_weight_law(seed, m):
    rng = np.random.default_rng(seed)
    sigma = rng.exponential(3.0, size=m) * (rng.uniform(size=m) < 0.7)
    delta = rng.uniform(0.001, 0.3, size=m)
    w = compositing_weights(sigma, delta)
    assert np.all(w >= 0)
    assert w.sum() <= 1 + 1e-12
    assert abs(w.sum() - (1 - np.exp(-(sigma * delta).sum()))) <= 1e-9


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000), pos=st.integers(0, 10), dnew=st.floats(0, 1))
def test_inserting_empty_sample_changes_nothing(seed, pos, dnew):
    # every existing sample keeps its own (sigma, delta, colour, z)
    rng = np.random.default_rng(seed)
    m = 10
    z = np.sort(rng.uniform(0, 1, m))
    sigma = rng.exponential(2.0, m)
    colors = rng.uniform(size=(m, 3))
    delta = rng.uniform(0.01, 0.2, m)
    zn = z[pos - 1] if pos > 0 else 0.0
    ins = lambda arr, v: np.insert(arr, pos, v, axis=0)
    a = _composite(sigma, colors, delta, z)
    b = _composite(ins(sigma, 0.0), ins(colors, rng.uniform(size=3)), ins(delta, dnew), ins(z, zn))
    assert np.allclose(a[0], b[0], atol=1e-9)
    assert abs(a[1] - b[1]) <= 1e-9


def _plane_field(depth_plane, bounds):
    vf = VoxelField.create(bounds, (9, 9, 41), channels=2, hidden=4, dtype=np.float64)
    zs = np.linspace(bounds[0, 2], bounds[1, 2], 41)
    vf.density[:, :, zs >= depth_plane] = 40.0
    mf = MotionField.create(bounds, (4, 4, 4), 2, dtype=np.float64)
    return DynamicField(vf, mf)


def test_opaque_plane_depth():
    bounds = np.array([[-1.0, -1.0, 0.5], [1.0, 1.0, 2.5]])
    f = _plane_field(1.5, bounds)
    cam = Camera(10, 10, 4.5, 4.5, 10, 10)
    r = generate_rays(cam, [[4, 4], [1, 7], [9, 0]], bounds=bounds)
    res = render(r, f, n_samples=64)
    dist = 1.5 / r.directions[:, 2]
    assert np.all(res.opacity > 0.999)
    assert np.all(np.abs(res.depth - dist) <= 2 * res.delta.max())


def test_zero_density_image_is_black():
    bounds = np.array([[-1.0, -1.0, 0.5], [1.0, 1.0, 2.5]])
    vf = VoxelField.create(bounds, (4, 4, 4), channels=2, hidden=4, dtype=np.float64,
                           density_shift=-200.0)
    f = DynamicField(vf, MotionField.create(bounds, (4, 4, 4), 2, dtype=np.float64))
    rgb, depth, op = render_image(Camera(5, 5, 2, 2, 5, 5), 0.0, f, 16)
    assert np.all(rgb == 0) and np.all(depth == 0) and np.all(op == 0)


def test_constant_emission_slab_constant_colour():
    bounds = np.array([[-1.0, -1.0, 0.5], [1.0, 1.0, 2.5]])
    f = _plane_field(0.5, bounds)
    f.canonical.features[:] = 0.3
    rgb, _, op = render_image(Camera(6, 6, 2.5, 2.5, 6, 6), 0.0, f, 32)
    assert np.allclose(rgb, rgb[0, 0], atol=1e-12)


def test_batch_tiling_is_bitwise_invariant():
    fields, *_ = gradcheck.small_scene(2)
    cam = Camera(8.0, 8.0, 3.5, 3.5, 8, 8)
    a = render_image(cam, 0.4, fields, 16, batch_size=7)
    b = render_image(cam, 0.4, fields, 16, batch_size=4096)
    for x, y in zip(a, b):
        assert np.array_equal(x, y)


def test_render_gradients_match_fd():
    worst, n, counts = gradcheck.check(n_params=200, seed=1)
    assert n >= 200 and len(counts) == 26
    assert worst <= 1e-4
