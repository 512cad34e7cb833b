"""Ray precomputation, the photometric + depth objective, and optimisation."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields as dc_fields
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Var
from .field_core import VoxelField
from .geometry import backproject
from .metrics import psnr, ssim
from .motion_field import MotionField
from .pipeline_io import FrameDataset
from .renderer import (DynamicField, counter_uniform, generate_rays, render_image, render_op,
                       sample_along_ray)

log = logging.getLogger(__name__)


class NonFiniteLoss(FloatingPointError):
    def __init__(self, ray: int, detail: str = ""):
        super().__init__(f"non-finite loss at batch ray {ray} {detail}".strip())
        self.ray = ray


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    """Optimisation and model-size settings; mirrors the ``train`` config file."""

    lambda_d: float = 0.1
    huber_delta: float = 0.2
    batch_size: int = 1024
    steps: int = 3000
    n_samples: int = 48
    lr_grid: float = 0.1
    lr_motion: float = 0.1
    lr_network: float = 1e-3
    lr_decay: float = 0.1  # learning-rate multiplier reached at the last step
    seed: int = 0
    grid_resolution: Tuple[int, int, int] = (160, 160, 160)
    channels: int = 12
    hidden: int = 64
    motion_resolution: Tuple[int, int, int] = (16, 16, 16)
    time_resolution: int = 0  # 0 means one node per frame
    ranks: Tuple[int, int, int, int] = (4, 4, 4, 4)
    motion_channels: int = 8
    bounds_padding: float = 0.05
    holdout_every: int = 0  # every k-th frame is held out of training; 0 keeps all
    holdout_offset: int = 0
    log_every: int = 100
    checkpoint_every: int = 0
    divergence_factor: float = 10.0
    divergence_patience: int = 500

    def __post_init__(self):
        self.grid_resolution = tuple(int(v) for v in self.grid_resolution)
        self.motion_resolution = tuple(int(v) for v in self.motion_resolution)
        self.ranks = tuple(int(v) for v in self.ranks)
        if self.lambda_d < 0:
            raise ValueError("lambda_d must be >= 0")
        if self.huber_delta <= 0:
            raise ValueError("huber_delta must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dc_fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    def train_frames(self, n_frames: int) -> np.ndarray:
        ks = np.arange(n_frames)
        if self.holdout_every <= 0:
            return ks
        return ks[(ks % self.holdout_every) != self.holdout_offset]

    def heldout_frames(self, n_frames: int) -> np.ndarray:
        return np.setdiff1d(np.arange(n_frames), self.train_frames(n_frames))


@dataclass
class RaySample:
    pixel: Tuple[int, int]
    frame: int
    t: float
    color: np.ndarray
    depth: float  # distance along the unit ray
    depth_valid: bool


@dataclass
class RaySet:
    """Column-wise storage of prefiltered training rays."""

    pixels: np.ndarray  # (N, 2) as (u, v)
    frames: np.ndarray  # (N,)
    times: np.ndarray  # (N,)
    colors: np.ndarray  # (N, 3)
    depths: np.ndarray  # (N,) ray distance
    depth_valid: np.ndarray  # (N,) bool
    origins: np.ndarray  # (N, 3)
    directions: np.ndarray  # (N, 3)
    near: np.ndarray
    far: np.ndarray
    z_scale: np.ndarray

    def __len__(self) -> int:
        return len(self.frames)

    def __getitem__(self, i: int) -> RaySample:
        return RaySample((int(self.pixels[i, 0]), int(self.pixels[i, 1])), int(self.frames[i]),
                         float(self.times[i]), self.colors[i], float(self.depths[i]), bool(self.depth_valid[i]))

    def subset(self, sel) -> "RaySet":
        return RaySet(*(getattr(self, f.name)[sel] for f in dc_fields(self)))


# ------------------------------------------------------------------ rays


def prefilter_rays(dataset: FrameDataset, frames: Optional[Sequence[int]] = None,
                   bounds: Optional[np.ndarray] = None) -> RaySet:
    """Every (pixel, frame) pair whose tool-mask value is 0, computed once.

    Without ``bounds`` the ray interval is left empty (near = far = 0) and must
    be filled before rendering.
    """
    masks = np.asarray(dataset.masks)
    f_all, h, w = masks.shape
    if dataset.rgb.shape[:3] != masks.shape or dataset.depth.shape != masks.shape:
        raise ValueError("mask/image shape mismatch")
    frames = np.arange(f_all) if frames is None else np.asarray(frames, dtype=np.int64)
    ff, vv, uu = np.nonzero(masks[frames] == 0)
    ff = frames[ff]
    cam = dataset.camera
    px = np.stack([uu, vv], axis=1)
    if len(px):
        rays = generate_rays(cam, px, 0.0, near=0.0 if bounds is None else None,
                             far=0.0 if bounds is None else None, bounds=bounds)
        origins, dirs, near, far, zs = rays.origins, rays.directions, rays.near, rays.far, rays.z_scale
    else:
        origins = dirs = np.zeros((0, 3))
        near = far = zs = np.zeros(0)
    d_z = dataset.depth[ff, vv, uu]
    d_ray = np.where(zs > 0, d_z / np.where(zs > 0, zs, 1.0), 0.0)
    valid = (d_z > 0) & (d_ray > near) & (d_ray < far) if bounds is not None else d_z > 0
    return RaySet(px, ff, dataset.times[ff], dataset.rgb[ff, vv, uu], d_ray, valid,
                  origins, dirs, near, far, zs)


def scene_bounds(dataset: FrameDataset, padding: float = 0.05) -> np.ndarray:
    """Box around the back-projected unmasked depth of all frames.

    Every axis is padded by ``padding`` times the largest extent, so a thin
    surface still gets room in front of and behind it.
    """
    pts = []
    for k in range(dataset.n_frames):
        valid = (dataset.depth[k] > 0) & (dataset.masks[k] == 0)
        p, _ = backproject(dataset.depth[k], dataset.camera, valid)
        pts.append(p)
    pts = np.concatenate(pts)
    if len(pts) == 0:
        raise ValueError("dataset has no valid unmasked depth")
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    pad = padding * float((hi - lo).max())
    return np.stack([lo - pad, hi + pad])


def build_fields(dataset: FrameDataset, cfg: TrainConfig, dtype=np.float32) -> DynamicField:
    bounds = scene_bounds(dataset, cfg.bounds_padding)
    vf = VoxelField.create(bounds, cfg.grid_resolution, cfg.channels, cfg.hidden, cfg.seed, dtype)
    t_res = cfg.time_resolution or max(2, dataset.n_frames)
    mf = MotionField.create(bounds, cfg.motion_resolution, t_res, cfg.ranks, cfg.motion_channels,
                            cfg.hidden, cfg.seed + 1, dtype)
    return DynamicField(vf, mf)


# ------------------------------------------------------------------ objective


def huber(a, b, delta: float):
    """r^2/2 for |r| <= delta, delta*(|r| - delta/2) beyond; r = a - b."""
    if delta <= 0:
        raise ValueError("delta must be > 0")
    r = np.abs(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64))
    out = np.where(r <= delta, 0.5 * r * r, delta * (r - 0.5 * delta))
    return float(out) if out.ndim == 0 else out


def huber_op(tape: Tape, a: Var, target: np.ndarray, delta: float) -> Var:
    r = a.value - target
    quad = np.abs(r) <= delta
    out = Var(np.where(quad, 0.5 * r * r, delta * (np.abs(r) - 0.5 * delta)))
    return tape.record(out, (a,), lambda g: a.accumulate(g * np.where(quad, r, delta * np.sign(r))))


@dataclass
class LossResult:
    value: float
    grads: Dict[str, np.ndarray]
    rgb: np.ndarray
    depth: np.ndarray
    photometric: float
    depth_term: float


def loss(batch: RaySet, fields: DynamicField, cfg: TrainConfig,
         jitter: Optional[np.ndarray] = None, with_grad: bool = True) -> LossResult:
    """Sum over the batch of squared colour error plus weighted depth Huber."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    tape = Tape(enabled=with_grad)
    pv = fields.variables(requires_grad=with_grad)
    z, delta = sample_along_ray(batch.near, batch.far, cfg.n_samples, jitter)
    rays = _bundle(batch)
    rgb, depth, _, _ = render_op(tape, fields, pv, rays, z, delta)
    ok = np.isfinite(rgb.value).all(axis=1) & np.isfinite(depth.value)
    if not ok.all():
        bad = int(np.flatnonzero(~ok)[0])
        raise NonFiniteLoss(bad, f"(frame {batch.frames[bad]}, pixel {tuple(batch.pixels[bad])})")
    diff = ad.sub(tape, rgb, Var(batch.colors.astype(rgb.value.dtype)))
    photo = ad.sum_all(tape, ad.mul(tape, diff, diff))
    total = photo
    dterm = 0.0
    if cfg.lambda_d > 0 and batch.depth_valid.any():
        h = huber_op(tape, depth, batch.depths.astype(depth.value.dtype), cfg.huber_delta)
        h = ad.mul(tape, h, Var(batch.depth_valid.astype(depth.value.dtype)))
        dsum = ad.scale(tape, ad.sum_all(tape, h), cfg.lambda_d)
        dterm = float(dsum.value)
        total = ad.add(tape, photo, dsum)
    value = float(total.value)
    if not math.isfinite(value):
        raise NonFiniteLoss(-1, "(batch total)")
    grads = {}
    if with_grad:
        tape.backward(total)
        grads = {k: (v.grad if v.grad is not None else np.zeros_like(v.value)) for k, v in pv.items()}
    return LossResult(value, grads, rgb.value, depth.value, float(photo.value), dterm)


def _bundle(batch: RaySet):
    from .renderer import RayBundle
    return RayBundle(batch.origins, batch.directions, batch.times, batch.near, batch.far, batch.z_scale)


# ------------------------------------------------------------------ optimiser


class Adam:
    """Per-parameter first/second-moment steps with per-group learning rates."""

    def __init__(self, params: Dict[str, np.ndarray], lrs: Dict[str, float],
                 betas=(0.9, 0.99), eps: float = 1e-8):
        self.params = params
        self.lrs = lrs
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads: Dict[str, np.ndarray], lr_mult: float = 1.0) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            g = grads.get(k)
            if g is None:
                continue
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            lr = self.lrs[k] * lr_mult
            p -= (lr / c1) * m / (np.sqrt(v / c2) + self.eps)


def group_learning_rates(params: Dict[str, np.ndarray], cfg: TrainConfig) -> Dict[str, float]:
    out = {}
    for k in params:
        if k in ("density", "features"):
            out[k] = cfg.lr_grid
        elif k.startswith("motion") and not k.endswith("basis"):
            out[k] = cfg.lr_motion
        else:
            out[k] = cfg.lr_network
    return out


# ------------------------------------------------------------------ fitting


@dataclass
class FitResult:
    fields: DynamicField
    history: List[dict]
    masked_evaluations: int
    elapsed: float


def fit(dataset: FrameDataset, cfg: TrainConfig, fields: Optional[DynamicField] = None,
        out_dir=None, callback: Optional[Callable[[int, dict], None]] = None,
        checkpoint_fn: Optional[Callable[[DynamicField, Path], None]] = None) -> FitResult:
    """Minibatch optimisation over rays sampled uniformly from all training frames."""
    t0 = time.perf_counter()
    if fields is None:
        fields = build_fields(dataset, cfg)
    frames = cfg.train_frames(dataset.n_frames)
    rays = prefilter_rays(dataset, frames, fields.bounds)
    if len(rays) == 0:
        raise ValueError("no unmasked training rays")
    params = fields.parameters()
    opt = Adam(params, group_learning_rates(params, cfg))
    rng = np.random.default_rng(cfg.seed)
    history: List[dict] = []
    masked_hits = 0
    initial = None
    over = 0
    writer = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        fh = open(out_dir / "metrics.csv", "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(["step", "loss", "psnr"])
    try:
        for step in range(cfg.steps):
            ids = rng.integers(0, len(rays), size=min(cfg.batch_size, len(rays)))
            batch = rays.subset(ids)
            masked_hits += int(dataset.masks[batch.frames, batch.pixels[:, 1], batch.pixels[:, 0]].sum())
            jitter = counter_uniform(cfg.seed, ids, cfg.n_samples, step)
            res = loss(batch, fields, cfg, jitter)
            decay = cfg.lr_decay ** (step / max(1, cfg.steps))
            opt.step(res.grads, decay)
            mse = res.photometric / (3 * len(batch))
            rec = {"step": step, "loss": res.value, "psnr": 10 * math.log10(1.0 / max(mse, 1e-10))}
            history.append(rec)
            if writer is not None:
                writer.writerow([step, f"{res.value:.6g}", f"{rec['psnr']:.4f}"])
            if callback is not None:
                callback(step, rec)
            if cfg.log_every and step % cfg.log_every == 0:
                log.info("step %d loss %.5g psnr %.2f", step, res.value, rec["psnr"])
            if initial is None:
                initial = res.value
            over = over + 1 if res.value > cfg.divergence_factor * initial else 0
            if over >= cfg.divergence_patience:
                raise TrainingDiverged(
                    f"loss above {cfg.divergence_factor}x initial ({initial:.4g}) for {over} steps; last {res.value:.4g}")
            if (out_dir is not None and checkpoint_fn is not None and cfg.checkpoint_every
                    and (step + 1) % cfg.checkpoint_every == 0):
                checkpoint_fn(fields, out_dir / f"ckpt_{step + 1:06d}.bin")
    finally:
        if writer is not None:
            fh.close()
    return FitResult(fields, history, masked_hits, time.perf_counter() - t0)


# ------------------------------------------------------------------ evaluation


def evaluate(fields: DynamicField, dataset: FrameDataset, frames: Sequence[int],
             n_samples: int = 48) -> List[dict]:
    """PSNR / SSIM / depth error per frame against the unoccluded ground truth when present."""
    gt_rgb = dataset.gt_rgb if dataset.gt_rgb is not None else dataset.rgb
    gt_depth = dataset.gt_depth if dataset.gt_depth is not None else dataset.depth
    out = []
    for k in frames:
        rgb, depth, opac = render_image(dataset.camera, float(dataset.times[k]), fields, n_samples)
        out.append({"frame": int(k), "psnr": psnr(np.clip(rgb, 0, 1), gt_rgb[k]),
                    "ssim": ssim(np.clip(rgb, 0, 1), gt_rgb[k]),
                    "depth_median_abs": float(np.median(np.abs(depth - gt_depth[k]))),
                    "rgb": rgb, "depth": depth, "opacity": opac})
    return out


def deocclusion_metrics(fields: DynamicField, dataset: FrameDataset, min_fraction: float = 0.3,
                        n_samples: int = 48) -> dict:
    """PSNR over pixels hidden by the tool in at least ``min_fraction`` of frames.

    Every frame is rendered and compared with the unoccluded ground truth on
    those pixels only.
    """
    if dataset.gt_rgb is None:
        raise ValueError("de-occlusion needs unoccluded ground-truth images")
    hidden = dataset.masks.astype(bool).mean(axis=0) >= min_fraction
    if not hidden.any():
        raise ValueError(f"no pixel is masked in >= {min_fraction:.0%} of frames")
    sq, count = 0.0, 0
    for k in range(dataset.n_frames):
        rgb, _, _ = render_image(dataset.camera, float(dataset.times[k]), fields, n_samples)
        diff = np.clip(rgb, 0, 1)[hidden] - dataset.gt_rgb[k][hidden]
        sq += float(np.sum(diff ** 2))
        count += diff.size
    mse = sq / count
    return {"pixels": int(hidden.sum()), "frames": int(dataset.n_frames), "mse": mse,
            "psnr": float(min(99.0, 10 * np.log10(1.0 / max(mse, 1e-300))))}
