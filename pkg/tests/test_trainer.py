import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from endorecon.metrics import psnr, ssim
from endorecon.pipeline_io import FrameDataset, frame_times
from endorecon.renderer import Camera
from endorecon.trainer import (Adam, TrainConfig, build_fields, evaluate, fit, huber, loss, prefilter_rays,
                               scene_bounds)

import gradcheck


def _flat(n=1, size=16, grey=0.5, depth=1.0, masks=None):
    cam = Camera(float(size), float(size), (size - 1) / 2, (size - 1) / 2, size, size)
    rgb = np.full((n, size, size, 3), grey)
    d = np.full((n, size, size), depth)
    m = np.zeros((n, size, size), np.uint8) if masks is None else masks
    return FrameDataset(rgb, d, m, cam, 1e-4, frame_times(n))


SMALL = dict(grid_resolution=(12, 12, 8), channels=4, hidden=16, motion_resolution=(4, 4, 4),
             ranks=(1, 1, 1, 1), motion_channels=4, n_samples=24, batch_size=128, log_every=0)


# ---------------------------------------------------------------- rays


def test_prefilter_excludes_masked_pixels():
    m = np.zeros((2, 4, 4), np.uint8)
    m[0, :2] = 1
    m[1, 0, 0] = 1
    ds = _flat(n=2, size=4, masks=m)
    rays = prefilter_rays(ds)
    assert len(rays) == 2 * 16 - 8 - 1
    assert not ds.masks[rays.frames, rays.pixels[:, 1], rays.pixels[:, 0]].any()


def test_prefilter_depth_is_ray_distance():
    ds = _flat(size=5, depth=2.0)
    rays = prefilter_rays(ds, bounds=scene_bounds(ds))
    assert np.allclose(rays.depths * rays.z_scale, 2.0)
    assert rays.depth_valid.all()


def test_frame_split():
    cfg = TrainConfig(holdout_every=8, holdout_offset=4)
    assert cfg.heldout_frames(30).tolist() == [4, 12, 20, 28]
    assert len(cfg.train_frames(30)) == 26


def test_config_rejects_unknown_keys():
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"learning_rate": 1})
    assert TrainConfig.from_dict(TrainConfig().to_dict()) == TrainConfig()


# ---------------------------------------------------------------- objective


def test_huber_examples():
    assert huber(0.1, 0.0, 0.2) == pytest.approx(0.005)
    assert huber(1.0, 0.0, 0.2) == pytest.approx(0.2 * 0.9)
    assert huber(0.2, 0.0, 0.2) == pytest.approx(0.02)
    with pytest.raises(ValueError):
        huber(1, 0, 0)


@settings(max_examples=100, deadline=None)
@given(r=st.floats(-5, 5), delta=st.floats(0.01, 2))
def test_huber_continuous_and_bounded(r, delta):
    h = huber(r, 0.0, delta)
    assert 0 <= h <= 0.5 * r * r + 1e-12
    eps = 1e-7
    assert abs(huber(delta + eps, 0, delta) - huber(delta - eps, 0, delta)) < 1e-6


def test_loss_is_sum_of_terms():
    fields, rays, z, delta, target_rgb, target_depth = gradcheck.small_scene(4)
    res = gradcheck.scene_loss(fields, rays, z, delta, target_rgb, target_depth)
    zero = gradcheck.scene_loss(fields, rays, z, delta, target_rgb, target_depth, lambda_d=0.0)
    assert res > zero > 0


def test_loss_empty_batch():
    ds = _flat(size=4)
    fields = build_fields(ds, TrainConfig(**SMALL))
    rays = prefilter_rays(ds, bounds=fields.bounds)
    with pytest.raises(ValueError):
        loss(rays.subset(np.zeros(0, int)), fields, TrainConfig(**SMALL))


def test_adam_first_step_is_lr_sign():
    p = {"a": np.array([1.0, -2.0, 3.0])}
    opt = Adam(p, {"a": 0.1})
    opt.step({"a": np.array([5.0, -0.01, 0.0])})
    assert np.allclose(p["a"], [0.9, -1.9, 3.0], atol=1e-6)


# ---------------------------------------------------------------- fitting


def test_zero_steps_leaves_fields_untouched():
    ds = _flat()
    cfg = TrainConfig(steps=0, **SMALL)
    ref = build_fields(ds, cfg)
    res = fit(ds, cfg)
    assert res.history == []
    for k, v in ref.parameters().items():
        assert np.array_equal(v, res.fields.parameters()[k])


def test_fit_uniform_grey_frame(tmp_path):
    ds = _flat(grey=0.5)
    cfg = TrainConfig(steps=150, lr_grid=0.3, **SMALL)
    res = fit(ds, cfg, out_dir=tmp_path)
    assert res.masked_evaluations == 0
    ev = evaluate(res.fields, ds, [0], n_samples=24)[0]
    assert ev["psnr"] >= 30
    assert (tmp_path / "metrics.csv").read_text().count("\n") == 151


def test_fit_never_samples_masked_pixels():
    m = np.zeros((2, 16, 16), np.uint8)
    m[:, 4:12, 4:12] = 1
    res = fit(_flat(n=2, masks=m), TrainConfig(steps=20, **SMALL))
    assert res.masked_evaluations == 0


# ---------------------------------------------------------------- metrics


def test_psnr_examples():
    a = np.zeros((4, 4, 3))
    assert psnr(a, a) == 99.0
    assert psnr(a, a + 0.1) == pytest.approx(20.0)
    with pytest.raises(ValueError):
        psnr(a, np.zeros((3, 3, 3)))


def test_ssim_examples(rng):
    a = rng.uniform(size=(16, 16, 3))
    assert ssim(a, a) == pytest.approx(1.0)
    assert ssim(a, 1 - a) < 0.0
    with pytest.raises(ValueError):
        ssim(np.zeros((8, 8)), np.zeros((8, 8)))
