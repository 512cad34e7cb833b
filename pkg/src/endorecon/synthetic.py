"""Procedural deforming tissue scene with a moving tool occluder.

The surface is the height field ``z = base + relief(x, y) + motion(x, y, t)``
seen by a pinhole camera at the origin looking down +z. Motion is purely
along z, so a material point keeps its (x, y) and the texture is a function of
(x, y) alone. Depth per pixel is found by solving the ray/height-field
intersection to machine precision.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from .pipeline_io import FrameDataset, frame_times, save_dataset
from .renderer import Camera

TOOL_RGB = np.array([0.62, 0.63, 0.66])


@dataclass
class SynthConfig:
    width: int = 64
    height: int = 64
    frames: int = 30
    focal: float = 64.0
    base_depth: float = 1.0
    relief: float = 0.05
    amplitude: float = 0.04  # peak z displacement of the breathing bump
    frequency: float = 1.0  # temporal cycles over the clip
    bump_width: float = 0.25
    texture_seed: int = 0
    # occluder: a vertical tool shaft swinging left/right from the top edge
    tool_width: int = 16
    tool_length: int = 40
    tool_swing: float = 10.0  # pixels either side of the image centre
    tool_depth: float = 0.7
    depth_scale: float = 1e-4

    def __post_init__(self):
        # the slope of the surface along any ray must stay below 1 so that
        # every pixel ray hits it exactly once
        lim = 0.5 * max(self.width, self.height) / self.focal
        slope = (self.relief * 8.0 + self.amplitude / self.bump_width) * lim
        if slope >= 0.9:
            raise ValueError("relief/amplitude too large for a height field")

    def camera(self) -> Camera:
        return Camera(self.focal, self.focal, (self.width - 1) / 2.0, (self.height - 1) / 2.0,
                      self.width, self.height)


class SyntheticScene:
    """Closed-form surface, texture and occluder for a :class:`SynthConfig`."""

    def __init__(self, cfg: SynthConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.texture_seed)
        # texture: a few oriented sinusoids per channel around a tissue tone
        self.tex_k = rng.uniform(4.0, 22.0, size=(6, 1)) * _unit(rng.uniform(0, 2 * np.pi, size=6))
        self.tex_phase = rng.uniform(0, 2 * np.pi, size=6)
        self.tex_mix = rng.uniform(-1, 1, size=(6, 3)) * np.array([0.07, 0.05, 0.05])
        self.relief_k = rng.uniform(3.0, 7.0, size=(3, 1)) * _unit(rng.uniform(0, 2 * np.pi, size=3))
        self.relief_phase = rng.uniform(0, 2 * np.pi, size=3)
        self.bump_center = rng.uniform(-0.15, 0.15, size=2)

    # -- closed-form fields
    def height(self, x, y, t):
        c = self.cfg
        rel = sum(np.sin(k[0] * x + k[1] * y + p) for k, p in zip(self.relief_k, self.relief_phase)) / 3.0
        r2 = (x - self.bump_center[0]) ** 2 + (y - self.bump_center[1]) ** 2
        bump = np.exp(-r2 / (2 * c.bump_width ** 2))
        return c.base_depth + c.relief * rel + c.amplitude * np.sin(2 * np.pi * c.frequency * t) * bump

    def texture(self, x, y):
        base = np.array([0.78, 0.42, 0.40])
        waves = np.sin(x[..., None] * self.tex_k[:, 0] + y[..., None] * self.tex_k[:, 1] + self.tex_phase)
        col = base + waves @ self.tex_mix
        vessel = np.exp(-((np.sin(9.0 * x + 4.0 * np.sin(5.0 * y))) ** 2) / 0.05)
        col = col - 0.18 * vessel[..., None] * np.array([0.2, 1.0, 0.9])
        return np.clip(col, 0.0, 1.0)

    def tool_mask(self, t) -> np.ndarray:
        c = self.cfg
        xc = (c.width - 1) / 2.0 + c.tool_swing * np.sin(2 * np.pi * t)
        uu = np.arange(c.width)[None, :]
        vv = np.arange(c.height)[:, None]
        return ((np.abs(uu - xc) < c.tool_width / 2.0) & (vv < c.tool_length)).astype(np.uint8)

    # -- rendering
    def intersect(self, t) -> np.ndarray:
        """Camera-z depth of the surface for every pixel at time ``t``."""
        c = self.cfg
        cam = c.camera()
        vv, uu = np.mgrid[0:c.height, 0:c.width].astype(np.float64)
        a = (uu - cam.cx) / cam.fx
        b = (vv - cam.cy) / cam.fy
        z = np.full_like(a, c.base_depth)
        for _ in range(200):
            z_new = self.height(a * z, b * z, t)
            if np.max(np.abs(z_new - z)) < 1e-15:
                z = z_new
                break
            z = z_new
        return z

    def frame(self, t):
        c = self.cfg
        cam = c.camera()
        z = self.intersect(t)
        vv, uu = np.mgrid[0:c.height, 0:c.width].astype(np.float64)
        x = z * (uu - cam.cx) / cam.fx
        y = z * (vv - cam.cy) / cam.fy
        return self.texture(x, y), z


def _unit(angles):
    return np.stack([np.cos(angles), np.sin(angles)], axis=1)


def generate_synthetic(cfg: SynthConfig, out_dir=None) -> FrameDataset:
    """Build the scene in memory (exact float depths) and optionally write it.

    The on-disk copy quantises depth to ``cfg.depth_scale``.
    """
    scene = SyntheticScene(cfg)
    times = frame_times(cfg.frames)
    rgb, depth, masks, gt_rgb, gt_depth = [], [], [], [], []
    for t in times:
        col, z = scene.frame(t)
        m = scene.tool_mask(t)
        gt_rgb.append(col)
        gt_depth.append(z)
        rgb.append(np.where(m[..., None] == 1, TOOL_RGB, col))
        depth.append(np.where(m == 1, cfg.tool_depth, z))
        masks.append(m)
    meta = {"synthetic": {k: v for k, v in cfg.__dict__.items()}}
    ds = FrameDataset(np.stack(rgb), np.stack(depth), np.stack(masks), cfg.camera(), cfg.depth_scale,
                      times, np.stack(gt_rgb), np.stack(gt_depth), meta)
    if out_dir is not None:
        save_dataset(ds, out_dir)
    return ds
