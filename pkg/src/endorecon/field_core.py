"""Canonical scene storage: density grid, appearance grid and shading network.

Grids are stored channels-last internally (``H x W x D x C``) so that a corner
gather reads contiguous rows; :attr:`VoxelField.feature_grid` exposes the
``C x H x W x D`` view used in checkpoints and by callers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import _kernels as _k
from . import autodiff as ad
from .autodiff import NO_GRAD, Tape, Var

class GridShapeError(ValueError):
    pass


# ------------------------------------------------------------------ interpolation


def world_to_index(x: np.ndarray, bounds: np.ndarray, dims: Sequence[int]) -> np.ndarray:
    """Map world points to continuous grid index coordinates."""
    lo, hi = bounds[0], bounds[1]
    return (x - lo) / (hi - lo) * (np.asarray(dims[:3], dtype=x.dtype) - 1)


def scatter_add(idx: np.ndarray, vals: np.ndarray, size: int) -> np.ndarray:
    """Sum ``vals`` rows into ``size`` bins; deterministic (bincount is sequential)."""
    idx = idx.ravel()
    if vals.ndim == 1 or vals.shape[-1:] == ():
        return np.bincount(idx, weights=vals.ravel(), minlength=size)
    vals = vals.reshape(idx.shape[0], -1)
    out = np.empty((size, vals.shape[1]), dtype=np.float64)
    for c in range(vals.shape[1]):
        out[:, c] = np.bincount(idx, weights=vals[:, c], minlength=size)
    return out


def interp3(tape: Tape, grid: Var, coords: Var) -> Var:
    """Trilinear lookup of a (X, Y, Z) or (X, Y, Z, C) grid at index coords (N, 3).

    Differentiable with respect to both the grid values and the coordinates.
    Points outside the grid read as zero.
    """
    dims = grid.shape[:3]
    if grid.value.ndim not in (3, 4) or min(dims) < 2:
        raise GridShapeError(f"expected a 3D or 4D grid with sides >= 2, got {grid.shape}")
    nx, ny, nz = (int(d) for d in dims)
    flat = grid.value.reshape(nx * ny * nz, -1)
    pos = np.ascontiguousarray(coords.value)
    out_val = np.zeros((pos.shape[0], flat.shape[1]), dtype=grid.value.dtype)
    _k.trilinear_forward(flat, nx, ny, nz, pos, out_val)
    if grid.value.ndim == 3:
        out_val = out_val[:, 0]
    out = Var(out_val)

    def back(g):
        g2 = np.ascontiguousarray(g.reshape(g.shape[0], -1), dtype=flat.dtype)
        want_grid = grid.requires_grad
        want_pos = coords.requires_grad
        ggrid = np.zeros_like(flat) if want_grid else np.zeros((1, 1), flat.dtype)
        gpos = np.zeros_like(pos) if want_pos else np.zeros((1, 3), pos.dtype)
        _k.trilinear_backward(flat, nx, ny, nz, pos, g2, ggrid, gpos, want_grid, want_pos)
        if want_grid:
            grid.accumulate(ggrid)
        if want_pos:
            coords.accumulate(gpos)

    return tape.record(out, (grid, coords), back)


def trilinear_interp(grid: np.ndarray, x, bounds: Optional[np.ndarray] = None,
                     channels_first: bool = True):
    """Trilinearly interpolate a scalar (H, W, D) or vector (C, H, W, D) grid.

    ``x`` is a world point (3,) or a batch (N, 3). Without ``bounds`` the
    coordinates are taken to be grid indices. Points outside the grid yield 0.
    """
    grid = np.asarray(grid)
    if grid.ndim == 4 and channels_first:
        grid = np.moveaxis(grid, 0, -1)
    if grid.ndim not in (3, 4):
        raise GridShapeError(f"grid must be 3D or 4D, got ndim={grid.ndim}")
    x = np.asarray(x, dtype=np.float64 if grid.dtype != np.float32 else np.float32)
    single = x.ndim == 1
    pts = x.reshape(-1, 3)
    if pts.shape[1] != 3:
        raise GridShapeError("query points must be 3D")
    coords = pts if bounds is None else world_to_index(pts, np.asarray(bounds, pts.dtype), grid.shape)
    out = interp3(NO_GRAD, Var(grid), Var(coords)).value
    return out[0] if single else out


# ------------------------------------------------------------------ perceptron


@dataclass
class MLP:
    """Dense network with softplus hidden activations and no output activation."""

    weights: List[np.ndarray]
    biases: List[np.ndarray]

    @classmethod
    def create(cls, sizes: Sequence[int], rng: np.random.Generator,
               zero_last: bool = False, dtype=np.float32) -> "MLP":
        weights, biases = [], []
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            if zero_last and i == len(sizes) - 2:
                w = np.zeros_like(w)
            weights.append(w.astype(dtype))
            biases.append(np.zeros(fan_out, dtype=dtype))
        return cls(weights, biases)

    @property
    def sizes(self) -> List[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def parameters(self, prefix: str) -> Dict[str, np.ndarray]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}.w{i}"] = w
            out[f"{prefix}.b{i}"] = b
        return out

    def astype(self, dtype) -> "MLP":
        return MLP([w.astype(dtype) for w in self.weights], [b.astype(dtype) for b in self.biases])


def mlp_forward(tape: Tape, pv: Dict[str, Var], prefix: str, n_layers: int, x: Var) -> Var:
    h = x
    for i in range(n_layers):
        h = ad.linear(tape, h, pv[f"{prefix}.w{i}"], pv[f"{prefix}.b{i}"])
        if i < n_layers - 1:
            h = ad.softplus(tape, h)
    return h


# ------------------------------------------------------------------ voxel field


@dataclass
class VoxelField:
    """Canonical density grid, appearance grid and shading network.

    ``density_shift`` and ``density_scale`` define the activation
    ``scale * softplus(raw + shift)``: nonnegative, smooth, and close to zero
    for a freshly zeroed grid.
    """

    density: np.ndarray  # (H, W, D)
    features: np.ndarray  # (H, W, D, C), channels-last
    shading: MLP
    bounds: np.ndarray  # (2, 3): min corner, max corner
    density_shift: float = -8.0
    density_scale: float = 1.0

    def __post_init__(self):
        self.bounds = np.asarray(self.bounds, dtype=np.float64).reshape(2, 3)
        if self.density.ndim != 3 or min(self.density.shape) < 2:
            raise GridShapeError(f"density grid must be H x W x D with sides >= 2, got {self.density.shape}")
        if self.features.shape[:3] != self.density.shape or self.features.ndim != 4:
            raise GridShapeError("feature grid must share the density grid resolution")
        if self.features.shape[3] < 1:
            raise GridShapeError("need at least one appearance channel")
        if self.shading.sizes[0] != self.features.shape[3] or self.shading.sizes[-1] != 3:
            raise GridShapeError("shading network must map C features to 3 outputs")
        if np.any(self.bounds[1] <= self.bounds[0]):
            raise ValueError("bounds must have positive extent on every axis")

    @classmethod
    def create(cls, bounds, resolution=(160, 160, 160), channels: int = 12,
               hidden: int = 64, seed: int = 0, dtype=np.float32,
               density_shift: float = -8.0) -> "VoxelField":
        rng = np.random.default_rng(seed)
        bounds = np.asarray(bounds, dtype=np.float64).reshape(2, 3)
        res = tuple(int(r) for r in resolution)
        voxel = (bounds[1] - bounds[0]) / (np.asarray(res) - 1)
        return cls(
            density=np.zeros(res, dtype=dtype),
            features=(0.1 * rng.uniform(-1, 1, size=res + (channels,))).astype(dtype),
            shading=MLP.create([channels, hidden, hidden, 3], rng, dtype=dtype),
            bounds=bounds,
            density_shift=density_shift,
            density_scale=float(1.0 / voxel.min()),
        )

    @property
    def resolution(self) -> Tuple[int, int, int]:
        return self.density.shape

    @property
    def channels(self) -> int:
        return self.features.shape[3]

    @property
    def density_grid(self) -> np.ndarray:
        return self.density

    @property
    def feature_grid(self) -> np.ndarray:
        return np.moveaxis(self.features, -1, 0)

    def voxel_size(self) -> np.ndarray:
        return (self.bounds[1] - self.bounds[0]) / (np.asarray(self.resolution) - 1)

    def parameters(self) -> Dict[str, np.ndarray]:
        out = {"density": self.density, "features": self.features}
        out.update(self.shading.parameters("shade"))
        return out

    def variables(self, requires_grad: bool = False) -> Dict[str, Var]:
        return {k: Var(v, requires_grad) for k, v in self.parameters().items()}

    def astype(self, dtype) -> "VoxelField":
        return VoxelField(self.density.astype(dtype), self.features.astype(dtype),
                          self.shading.astype(dtype), self.bounds.copy(),
                          self.density_shift, self.density_scale)

    def activation(self, raw):
        raw = np.asarray(raw, dtype=np.float64)
        return self.density_scale * np.logaddexp(0.0, raw + self.density_shift)


def density_op(tape: Tape, fld: VoxelField, pv: Dict[str, Var], pts: Var) -> Var:
    """Activated density at world points (N, 3); zero outside the box."""
    b = fld.bounds.astype(pts.value.dtype)
    dims = np.asarray(fld.resolution, dtype=pts.value.dtype) - 1
    coords = _to_index(tape, pts, b, dims)
    raw = interp3(tape, pv["density"], coords)
    sigma = ad.softplus(tape, raw, fld.density_shift, fld.density_scale)
    inside = np.all((coords.value >= 0) & (coords.value <= dims), axis=-1)
    return ad.mul(tape, sigma, Var(inside.astype(sigma.value.dtype)))


def color_op(tape: Tape, fld: VoxelField, pv: Dict[str, Var], pts: Var) -> Var:
    """RGB in [0, 1] at world points (N, 3)."""
    b = fld.bounds.astype(pts.value.dtype)
    dims = np.asarray(fld.resolution, dtype=pts.value.dtype) - 1
    coords = _to_index(tape, pts, b, dims)
    feat = interp3(tape, pv["features"], coords)
    logits = mlp_forward(tape, pv, "shade", len(fld.shading.weights), feat)
    return ad.sigmoid(tape, logits)


def _to_index(tape: Tape, pts: Var, bounds: np.ndarray, dims: np.ndarray) -> Var:
    k = dims / (bounds[1] - bounds[0])
    out = Var((pts.value - bounds[0]) * k)
    return tape.record(out, (pts,), lambda g: pts.accumulate(g * k))


def _as_points(fld: VoxelField, x):
    dtype = fld.density.dtype if fld.density.dtype in (np.float32, np.float64) else np.float64
    x = np.asarray(x, dtype=dtype)
    return x.ndim == 1, x.reshape(-1, 3)


def query_density(fld: VoxelField, x):
    """Nonnegative density at a world point or batch of points."""
    single, pts = _as_points(fld, x)
    out = density_op(NO_GRAD, fld, fld.variables(), Var(pts)).value
    return float(out[0]) if single else out


def query_color(fld: VoxelField, x):
    """Shaded colour in [0, 1]^3 at a world point or batch of points."""
    single, pts = _as_points(fld, x)
    out = color_op(NO_GRAD, fld, fld.variables(), Var(pts)).value
    return out[0] if single else out
