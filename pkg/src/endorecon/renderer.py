"""Pinhole rays, stratified sampling and alpha compositing through the warp."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import NO_GRAD, Tape, Var
from .field_core import VoxelField, color_op, density_op
from .motion_field import MotionField, displacement_op


class PixelOutOfBounds(ValueError):
    pass


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    pose: np.ndarray = field(default_factory=lambda: np.eye(4))  # camera -> world

    def __post_init__(self):
        self.pose = np.asarray(self.pose, dtype=np.float64).reshape(4, 4)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def project(self, pts_world: np.ndarray) -> np.ndarray:
        """World points (N, 3) to pixel coordinates (N, 2) and camera depth (N,)."""
        pts = np.asarray(pts_world, dtype=np.float64).reshape(-1, 3)
        inv = np.linalg.inv(self.pose)
        pc = pts @ inv[:3, :3].T + inv[:3, 3]
        u = self.fx * pc[:, 0] / pc[:, 2] + self.cx
        v = self.fy * pc[:, 1] / pc[:, 2] + self.cy
        return np.stack([u, v], axis=1), pc[:, 2]

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height, "pose": self.pose.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]), np.asarray(d.get("pose", np.eye(4))))


@dataclass
class RayBundle:
    origins: np.ndarray  # (B, 3)
    directions: np.ndarray  # (B, 3), unit length
    times: np.ndarray  # (B,)
    near: np.ndarray  # (B,)
    far: np.ndarray  # (B,)
    z_scale: np.ndarray  # (B,) camera-z per unit of ray distance

    def __post_init__(self):
        b = self.origins.shape[0]
        self.times = np.broadcast_to(np.asarray(self.times, dtype=np.float64), (b,)).copy()
        self.near = np.broadcast_to(np.asarray(self.near, dtype=np.float64), (b,)).copy()
        self.far = np.broadcast_to(np.asarray(self.far, dtype=np.float64), (b,)).copy()
        if np.any(self.far < self.near):
            raise ValueError("ray interval must satisfy near <= far")

    def __len__(self) -> int:
        return self.origins.shape[0]

    def subset(self, sel) -> "RayBundle":
        return RayBundle(self.origins[sel], self.directions[sel], self.times[sel],
                         self.near[sel], self.far[sel], self.z_scale[sel])


@dataclass
class DynamicField:
    """Canonical voxel field plus the motion field that warps into it."""

    canonical: VoxelField
    motion: MotionField

    def parameters(self) -> Dict[str, np.ndarray]:
        out = dict(self.canonical.parameters())
        out.update(self.motion.parameters())
        return out

    def variables(self, requires_grad: bool = False) -> Dict[str, Var]:
        return {k: Var(v, requires_grad) for k, v in self.parameters().items()}

    @property
    def bounds(self) -> np.ndarray:
        return self.canonical.bounds

    @property
    def dtype(self):
        return self.canonical.density.dtype

    def astype(self, dtype) -> "DynamicField":
        return DynamicField(self.canonical.astype(dtype), self.motion.astype(dtype))


# ------------------------------------------------------------------ rays


def ray_box_interval(origins: np.ndarray, dirs: np.ndarray, bounds: np.ndarray):
    """Slab-test entry/exit distances; rays that miss get an empty interval."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (bounds[0] - origins) * inv
        t1 = (bounds[1] - origins) * inv
    lo = np.nanmax(np.minimum(t0, t1), axis=1)
    hi = np.nanmin(np.maximum(t0, t1), axis=1)
    lo = np.maximum(lo, 0.0)
    hi = np.maximum(hi, lo)
    return lo, hi


def generate_rays(cam: Camera, pixels, t=0.0, near=None, far=None,
                  bounds: Optional[np.ndarray] = None) -> RayBundle:
    """Rays through integer pixel coordinates ``(u, v)``.

    The interval is ``[near, far]`` when given, otherwise the ray's overlap
    with ``bounds``.
    """
    px = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    u, v = px[:, 0], px[:, 1]
    if np.any((u < 0) | (u >= cam.width) | (v < 0) | (v >= cam.height)):
        raise PixelOutOfBounds("pixel outside the image")
    d_cam = np.stack([(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, np.ones_like(u)], axis=1)
    norm = np.linalg.norm(d_cam, axis=1)
    d_cam /= norm[:, None]
    dirs = d_cam @ cam.pose[:3, :3].T
    origins = np.broadcast_to(cam.pose[:3, 3], dirs.shape).copy()
    if near is None or far is None:
        if bounds is None:
            raise ValueError("need near/far or a bounding box")
        lo, hi = ray_box_interval(origins, dirs, np.asarray(bounds, dtype=np.float64))
        near = lo if near is None else near
        far = hi if far is None else far
    return RayBundle(origins, dirs, t, near, far, 1.0 / norm)


def sample_along_ray(near, far, n_samples: int, jitter: Optional[np.ndarray] = None):
    """Stratified depths and step lengths.

    Without ``jitter`` each sample sits at its stratum midpoint; otherwise
    ``jitter`` holds per-sample offsets in [0, 1). The last step runs to
    ``far``.
    """
    if n_samples < 2:
        raise ValueError("need at least two samples per ray")
    near = np.atleast_1d(np.asarray(near, dtype=np.float64))
    far = np.atleast_1d(np.asarray(far, dtype=np.float64))
    span = (far - near)[:, None]
    offs = 0.5 if jitter is None else jitter
    k = np.arange(n_samples, dtype=np.float64)[None, :]
    z = near[:, None] + (k + offs) / n_samples * span
    delta = np.empty_like(z)
    delta[:, :-1] = z[:, 1:] - z[:, :-1]
    delta[:, -1] = far - z[:, -1]
    return z, delta


def counter_uniform(seed: int, ray_ids: np.ndarray, n: int, step: int = 0) -> np.ndarray:
    """Deterministic uniforms in [0, 1) keyed by (seed, step, ray id, sample).

    A splitmix64 hash of the counter, so results never depend on batch order.
    """
    ids = np.asarray(ray_ids, dtype=np.uint64)[:, None]
    ctr = ids * np.uint64(n) + np.arange(n, dtype=np.uint64)[None, :]
    with np.errstate(over="ignore"):
        x = ctr + np.uint64(seed) * np.uint64(0x9E3779B97F4A7C15) + np.uint64(step) * np.uint64(0xD1B54A32D192ED03)
        x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        x = x ^ (x >> np.uint64(31))
    return (x >> np.uint64(11)).astype(np.float64) / float(1 << 53)


# ------------------------------------------------------------------ compositing


def compositing_weights(sigma: np.ndarray, delta: np.ndarray) -> np.ndarray:
    """w_j = exp(-sum_{i<j} sigma_i delta_i) * (1 - exp(-sigma_j delta_j))."""
    s = sigma * delta
    excl = np.zeros_like(s)
    np.cumsum(s[..., :-1], axis=-1, out=excl[..., 1:])
    trans = np.exp(-excl)
    return trans * -np.expm1(-s)


def composite(tape: Tape, sigma: Var, colors: Var, delta: np.ndarray, z: np.ndarray):
    """Alpha-composite (B, M) densities and (B, M, 3) colours.

    Returns rgb (B, 3), depth (B,), opacity (B,) Vars and the weights array.
    """
    s = sigma.value * delta
    excl = np.zeros_like(s)
    np.cumsum(s[:, :-1], axis=1, out=excl[:, 1:])
    trans = np.exp(-excl)
    alpha = -np.expm1(-s)
    w = trans * alpha
    rgb = Var(np.einsum("bm,bmc->bc", w, colors.value))
    depth = Var((w * z).sum(axis=1))
    opacity = Var(w.sum(axis=1))

    def _push(gC, gD, gO):
        gw = np.zeros_like(w)
        if gC is not None:
            gw += np.einsum("bc,bmc->bm", gC, colors.value)
            if colors.requires_grad:
                colors.accumulate(w[:, :, None] * gC[:, None, :])
        if gD is not None:
            gw += gD[:, None] * z
        if gO is not None:
            gw += gO[:, None]
        if sigma.requires_grad:
            gww = gw * w
            after = np.cumsum(gww[:, ::-1], axis=1)[:, ::-1] - gww
            gs = gw * trans * (1.0 - alpha) - after
            sigma.accumulate(gs * delta)

    tape.record_many((rgb, depth, opacity), (sigma, colors), _push)
    return rgb, depth, opacity, w


@dataclass
class RenderResult:
    rgb: np.ndarray
    depth: np.ndarray
    weights: np.ndarray
    opacity: np.ndarray
    z: Optional[np.ndarray] = None
    delta: Optional[np.ndarray] = None


def render_op(tape: Tape, fields: DynamicField, pv: Dict[str, Var], rays: RayBundle,
              z: np.ndarray, delta: np.ndarray, warp: bool = True):
    """Tape-aware render of a ray bundle at given sample depths."""
    dtype = fields.dtype
    b, m = z.shape
    pts = (rays.origins[:, None, :] + z[:, :, None] * rays.directions[:, None, :]).reshape(-1, 3).astype(dtype)
    times = np.repeat(rays.times, m).astype(dtype)
    if warp:
        dx = displacement_op(tape, fields.motion, pv, pts, times)
        canon = ad.add(tape, Var(pts), dx)
    else:
        canon = Var(pts)
    sigma = density_op(tape, fields.canonical, pv, canon)
    colors = color_op(tape, fields.canonical, pv, canon)
    sigma = ad.reshape(tape, sigma, (b, m))
    colors = ad.reshape(tape, colors, (b, m, 3))
    return composite(tape, sigma, colors, delta.astype(dtype), z.astype(dtype))


def render(rays: RayBundle, fields: DynamicField, n_samples: int = 64,
           jitter: Optional[np.ndarray] = None, warp: bool = True) -> RenderResult:
    """Colour, ray-distance depth, weights and opacity for each ray."""
    z, delta = sample_along_ray(rays.near, rays.far, n_samples, jitter)
    rgb, depth, opacity, w = render_op(NO_GRAD, fields, fields.variables(), rays, z, delta, warp)
    return RenderResult(rgb.value, depth.value, w, opacity.value, z, delta)


def render_image(cam: Camera, t: float, fields: DynamicField, n_samples: int = 64,
                 batch_size: int = 4096, near=None, far=None, warp: bool = True):
    """Render every pixel at time ``t``; midpoint sampling, so deterministic.

    Returns (rgb H x W x 3, camera-z depth H x W, opacity H x W). Depth is the
    composited ray distance converted to camera z, the convention used by
    depth maps and back-projection.
    """
    vv, uu = np.mgrid[0:cam.height, 0:cam.width]
    pixels = np.stack([uu.ravel(), vv.ravel()], axis=1)
    rays = generate_rays(cam, pixels, t, near=near, far=far, bounds=fields.bounds)
    n = len(rays)
    rgb = np.zeros((n, 3))
    depth = np.zeros(n)
    opac = np.zeros(n)
    for s in range(0, n, batch_size):
        sel = slice(s, min(n, s + batch_size))
        res = render(rays.subset(sel), fields, n_samples, warp=warp)
        rgb[sel] = res.rgb
        depth[sel] = res.depth * rays.z_scale[sel]
        opac[sel] = res.opacity
    shape = (cam.height, cam.width)
    return rgb.reshape(shape + (3,)), depth.reshape(shape), opac.reshape(shape)
