"""Rendered RGB-D frame to point cloud and open height-field surface."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import ndimage

from .renderer import Camera


class MeshError(ValueError):
    pass


class MultipleComponents(MeshError):
    def __init__(self, count: int):
        super().__init__(f"valid region has {count} connected components, expected 1")
        self.count = count


@dataclass
class TriMesh:
    vertices: np.ndarray  # (V, 3)
    faces: np.ndarray  # (F, 3) vertex indices
    colors: Optional[np.ndarray] = None  # (V, 3) uint8

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.colors is not None:
            self.colors = np.asarray(self.colors, dtype=np.uint8).reshape(-1, 3)
            if len(self.colors) != len(self.vertices):
                raise MeshError("need one colour per vertex")
        if len(self.faces):
            if self.faces.min() < 0 or self.faces.max() >= len(self.vertices):
                raise MeshError("face index out of range")
            f = self.faces
            if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
                raise MeshError("degenerate face with a repeated vertex")

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def edges(self) -> np.ndarray:
        """Unique undirected edges, each row sorted (E, 2)."""
        e = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
        e.sort(axis=1)
        return np.unique(e, axis=0)

    def euler_characteristic(self) -> int:
        return self.n_vertices - len(self.edges()) + self.n_faces

    def signed_volume(self) -> float:
        """Divergence-theorem volume; positive for outward-facing closed meshes."""
        v = self.vertices[self.faces]
        return float(np.einsum("ij,ij->i", v[:, 0], np.cross(v[:, 1], v[:, 2])).sum() / 6.0)

    def copy(self) -> "TriMesh":
        return TriMesh(self.vertices.copy(), self.faces.copy(),
                       None if self.colors is None else self.colors.copy())


# ------------------------------------------------------------------ point clouds


def backproject(depth: np.ndarray, cam: Camera, valid: Optional[np.ndarray] = None):
    """Pixel-wise back-projection ``(D(u-cx)/fx, D(v-cy)/fy, D)`` into world space.

    Returns (points (N, 3), pixels (N, 2) as (u, v)) for the valid pixels.
    """
    depth = np.asarray(depth, dtype=np.float64)
    if valid is None:
        valid = depth > 0
    vv, uu = np.nonzero(valid)
    d = depth[vv, uu]
    pc = np.stack([d * (uu - cam.cx) / cam.fx, d * (vv - cam.cy) / cam.fy, d], axis=1)
    pts = pc @ cam.pose[:3, :3].T + cam.pose[:3, 3]
    return pts, np.stack([uu, vv], axis=1)


def bilateral_filter(depth: np.ndarray, sigma_s: float, sigma_r: float, radius: int,
                     valid: Optional[np.ndarray] = None) -> np.ndarray:
    """Edge-preserving smoothing of a depth image over valid pixels only."""
    if sigma_s <= 0 or sigma_r <= 0:
        raise ValueError("sigma_s and sigma_r must be positive")
    depth = np.asarray(depth, dtype=np.float64)
    if valid is None:
        valid = depth > 0
    valid = np.asarray(valid, dtype=bool)
    r = int(radius)
    pad_d = np.pad(depth, r)
    pad_v = np.pad(valid, r)
    h, w = depth.shape
    num = np.zeros_like(depth)
    den = np.zeros_like(depth)
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            nd = pad_d[r + dy:r + dy + h, r + dx:r + dx + w]
            nv = pad_v[r + dy:r + dy + h, r + dx:r + dx + w]
            wgt = np.exp(-(dx * dx + dy * dy) / (2 * sigma_s ** 2)
                         - (nd - depth) ** 2 / (2 * sigma_r ** 2)) * nv
            num += wgt * nd
            den += wgt
    out = depth.copy()
    ok = valid & (den > 0)
    out[ok] = num[ok] / den[ok]
    return out


def triangulate_heightfield(depth: np.ndarray, cam: Camera, valid: Optional[np.ndarray] = None,
                            colors: Optional[np.ndarray] = None) -> TriMesh:
    """Two triangles per fully valid 2x2 pixel block, wound to face the camera.

    Pixels that belong to no complete block carry no face and are dropped.
    """
    depth = np.asarray(depth, dtype=np.float64)
    if valid is None:
        valid = depth > 0
    valid = np.asarray(valid, dtype=bool)
    quad = valid[:-1, :-1] & valid[1:, :-1] & valid[:-1, 1:] & valid[1:, 1:]
    if not quad.any():
        raise MeshError("no complete 2x2 block of valid pixels")
    used = np.zeros_like(valid)
    used[:-1, :-1] |= quad
    used[1:, :-1] |= quad
    used[:-1, 1:] |= quad
    used[1:, 1:] |= quad
    # 4-connectivity on blocks equals edge-sharing between their triangles
    _, n_comp = ndimage.label(quad)
    if n_comp != 1:
        raise MultipleComponents(n_comp)
    pts, pix = backproject(depth, cam, used)
    index = -np.ones(depth.shape, dtype=np.int64)
    index[pix[:, 1], pix[:, 0]] = np.arange(len(pts))
    qv, qu = np.nonzero(quad)
    a = index[qv, qu]
    b = index[qv, qu + 1]
    c = index[qv + 1, qu]
    d = index[qv + 1, qu + 1]
    faces = np.concatenate([np.stack([a, c, b], 1), np.stack([b, c, d], 1)])
    vcol = None
    if colors is not None:
        col = np.asarray(colors)
        if col.dtype != np.uint8:
            col = np.clip(np.round(col * 255), 0, 255).astype(np.uint8)
        vcol = col[pix[:, 1], pix[:, 0]]
    return TriMesh(pts, faces, vcol)
