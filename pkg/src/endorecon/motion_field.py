"""Rank-decomposed 4D motion features and the displacement network.

The dense motion tensor over (x, y, z, t, feature) is never built. It is the
sum of four groups of outer products; each group leaves one of the four
coordinate axes to a 1D vector and spans the other three with a 3D volume,
and every rank term carries its own feature basis vector.

Group order follows the decomposition as usually written: the first group
pairs a time vector with an (x, y, z) volume, the second a z vector with an
(x, y, t) volume, the third a y vector with an (x, z, t) volume and the last an
x vector with a (y, z, t) volume.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import NO_GRAD, Tape, Var
from .field_core import MLP, interp3, mlp_forward, scatter_add

# left-out axis per group; axes are 0=x, 1=y, 2=z, 3=t
LEFT_OUT = (3, 2, 1, 0)


def _kept(axis: int) -> Tuple[int, ...]:
    return tuple(a for a in range(4) if a != axis)


@dataclass
class MotionGroup:
    vectors: np.ndarray  # (n_axis, R)
    volumes: np.ndarray  # (n_i, n_j, n_k, R)
    basis: np.ndarray  # (R, C_T)

    @property
    def rank(self) -> int:
        return self.basis.shape[0]


@dataclass
class MotionField:
    groups: List[MotionGroup]
    displacement_net: MLP
    bounds: np.ndarray  # (2, 3), same box as the canonical field
    clamp_count: int = field(default=0, compare=False)

    def __post_init__(self):
        self.bounds = np.asarray(self.bounds, dtype=np.float64).reshape(2, 3)
        if len(self.groups) != 4:
            raise ValueError("motion field needs exactly four groups")
        dims = self.dims
        for g, axis in zip(self.groups, LEFT_OUT):
            if g.vectors.shape[0] != dims[axis]:
                raise ValueError("all groups must share the same grid resolution")
            if g.volumes.shape[:3] != tuple(dims[a] for a in _kept(axis)):
                raise ValueError("all groups must share the same grid resolution")
            if g.basis.shape[1] != self.feature_dim:
                raise ValueError("basis length must equal the motion feature width")
            if not (g.vectors.shape[1] == g.volumes.shape[3] == g.basis.shape[0]):
                raise ValueError("rank mismatch inside a group")
        if self.displacement_net.sizes[0] != self.feature_dim or self.displacement_net.sizes[-1] != 3:
            raise ValueError("displacement network must map C_T features to 3 outputs")

    @classmethod
    def create(cls, bounds, spatial_resolution=(32, 32, 32), time_resolution: int = 2,
               ranks=(4, 4, 4, 4), feature_dim: int = 8, hidden: int = 64,
               seed: int = 0, dtype=np.float32, init_scale: float = 0.1) -> "MotionField":
        rng = np.random.default_rng(seed)
        dims = tuple(int(s) for s in spatial_resolution) + (int(time_resolution),)
        if min(dims) < 2:
            raise ValueError("every motion axis needs at least 2 nodes")
        groups = []
        for axis, r in zip(LEFT_OUT, ranks):
            r = int(r)
            kept = tuple(dims[a] for a in _kept(axis))
            groups.append(MotionGroup(
                vectors=(init_scale * rng.uniform(-1, 1, size=(dims[axis], r))).astype(dtype),
                volumes=(init_scale * rng.uniform(-1, 1, size=kept + (r,))).astype(dtype),
                basis=(init_scale * rng.uniform(-1, 1, size=(r, feature_dim))).astype(dtype),
            ))
        net = MLP.create([feature_dim, hidden, hidden, 3], rng, zero_last=True, dtype=dtype)
        return cls(groups, net, bounds)

    @property
    def feature_dim(self) -> int:
        return self.groups[0].basis.shape[1]

    @property
    def dims(self) -> Tuple[int, int, int, int]:
        """Node counts along (x, y, z, t)."""
        g0, g1 = self.groups[0], self.groups[1]
        return g0.volumes.shape[0], g0.volumes.shape[1], g0.volumes.shape[2], g0.vectors.shape[0]

    @property
    def ranks(self) -> Tuple[int, ...]:
        return tuple(g.rank for g in self.groups)

    def parameters(self) -> Dict[str, np.ndarray]:
        out = {}
        for i, g in enumerate(self.groups):
            out[f"motion{i}.vectors"] = g.vectors
            out[f"motion{i}.volumes"] = g.volumes
            out[f"motion{i}.basis"] = g.basis
        out.update(self.displacement_net.parameters("disp"))
        return out

    def variables(self, requires_grad: bool = False) -> Dict[str, Var]:
        return {k: Var(v, requires_grad) for k, v in self.parameters().items()}

    def decomposed_nbytes(self) -> int:
        return sum(g.vectors.nbytes + g.volumes.nbytes + g.basis.nbytes for g in self.groups)

    def dense_nbytes(self) -> int:
        return int(np.prod(self.dims)) * self.feature_dim * self.groups[0].volumes.itemsize

    def astype(self, dtype) -> "MotionField":
        groups = [MotionGroup(g.vectors.astype(dtype), g.volumes.astype(dtype), g.basis.astype(dtype))
                  for g in self.groups]
        return MotionField(groups, self.displacement_net.astype(dtype), self.bounds.copy())

    def index_coords(self, x: np.ndarray, t: np.ndarray) -> np.ndarray:
        """(N, 4) continuous node coordinates; ``t`` is clamped into [0, 1]."""
        t = np.asarray(t, dtype=x.dtype)
        t = np.broadcast_to(t, x.shape[:1])
        bad = (t < 0) | (t > 1)
        if np.any(bad):
            self.clamp_count += int(bad.sum())
            t = np.clip(t, 0.0, 1.0)
        dims = np.asarray(self.dims, dtype=x.dtype) - 1
        lo, hi = self.bounds.astype(x.dtype)
        out = np.empty((x.shape[0], 4), dtype=x.dtype)
        out[:, :3] = (x - lo) / (hi - lo) * dims[:3]
        out[:, 3] = t * dims[3]
        return out


def interp1(tape: Tape, table: Var, coords: np.ndarray) -> Var:
    """Linear lookup of the rows of an (n, R) table at continuous positions (N,)."""
    n = table.shape[0]
    c = np.clip(coords, 0, n - 1)
    i0 = np.minimum(np.floor(c).astype(np.int64), n - 2)
    f = (c - i0)[:, None].astype(table.value.dtype)
    out = Var(table.value[i0] * (1 - f) + table.value[i0 + 1] * f)

    def back(g):
        idx = np.concatenate([i0, i0 + 1])
        vals = np.concatenate([g * (1 - f), g * f])
        table.accumulate(scatter_add(idx, vals, n).astype(table.value.dtype, copy=False))

    return tape.record(out, (table,), back)


def motion_feature_op(tape: Tape, mf: MotionField, pv: Dict[str, Var], coords4: np.ndarray) -> Var:
    total = None
    for i, axis in enumerate(LEFT_OUT):
        if mf.groups[i].rank == 0:
            continue
        vec = interp1(tape, pv[f"motion{i}.vectors"], coords4[:, axis])
        vol = interp3(tape, pv[f"motion{i}.volumes"], Var(coords4[:, list(_kept(axis))]))
        if vol.value.ndim == 1:  # rank-1 volumes come back squeezed
            vol = ad.reshape(tape, vol, (-1, 1))
        term = ad.matmul(tape, ad.mul(tape, vec, vol), pv[f"motion{i}.basis"])
        total = term if total is None else ad.add(tape, total, term)
    if total is None:
        total = Var(np.zeros((coords4.shape[0], mf.feature_dim), dtype=coords4.dtype))
    return total


def displacement_op(tape: Tape, mf: MotionField, pv: Dict[str, Var], x: np.ndarray, t) -> Var:
    coords4 = mf.index_coords(x, t)
    feat = motion_feature_op(tape, mf, pv, coords4)
    return mlp_forward(tape, pv, "disp", len(mf.displacement_net.weights), feat)


def _batch(mf: MotionField, x, t):
    dtype = mf.groups[0].volumes.dtype
    x = np.asarray(x, dtype=dtype)
    single = x.ndim == 1
    return single, x.reshape(-1, 3), np.asarray(t, dtype=dtype)


def eval_motion_feature(mf: MotionField, x, t):
    """Motion feature vector(s) of width C_T at world point(s) ``x`` and time ``t``."""
    single, pts, t = _batch(mf, x, t)
    out = motion_feature_op(NO_GRAD, mf, mf.variables(), mf.index_coords(pts, t)).value
    return out[0] if single else out


def displacement(mf: MotionField, x, t):
    """World-space offset that carries an observed point into the canonical field."""
    single, pts, t = _batch(mf, x, t)
    out = displacement_op(NO_GRAD, mf, mf.variables(), pts, t).value
    return out[0] if single else out


def warp_to_canonical(mf: MotionField, x, t):
    single, pts, t = _batch(mf, x, t)
    out = pts + displacement_op(NO_GRAD, mf, mf.variables(), pts, t).value
    return out[0] if single else out
