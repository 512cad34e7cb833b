"""Particle filling and an explicit MLS-MPM elastic solver.

Transfers use quadratic B-spline weights on a regular background grid. The
material is fixed-corotated hyperelastic. Time stepping is symplectic Euler
with a CFL-limited step. All scatter loops run sequentially, so a run is
bitwise reproducible.

Particle snapshot files (``.pts``) are little-endian::

    16 bytes  magic  b"ENDORECON-PTS\\x00\\x00\\x00"
    uint32    version (1)
    uint32    particle count N
    float64   simulation time (s)
    float32   N x 3 positions
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, List, Optional, Sequence

import numpy as np
from numba import njit

from .geometry import MeshError, TriMesh
from .mesh_close import validate_watertight

log = logging.getLogger(__name__)

PTS_MAGIC = b"ENDORECON-PTS\x00\x00\x00"
PTS_VERSION = 1
BOUNDARY_NODES = 3  # sticky band width in grid nodes


class NotWatertight(MeshError):
    pass


class EmptySampling(ValueError):
    pass


class CflViolation(ValueError):
    pass


class SimulationDiverged(RuntimeError):
    """Raised when a particle state turns non-finite or inverts."""

    def __init__(self, particle: int, reason: str = "non-finite state"):
        super().__init__(f"particle {particle}: {reason}")
        self.particle = particle


@dataclass(frozen=True)
class Material:
    youngs_modulus: float = 10e3  # Pa
    poisson_ratio: float = 0.4
    density: float = 1000.0  # kg/m^3

    def __post_init__(self):
        if self.youngs_modulus <= 0 or self.density <= 0:
            raise ValueError("Young's modulus and density must be positive")
        if not 0.0 <= self.poisson_ratio < 0.5:
            raise ValueError("Poisson ratio must lie in [0, 0.5)")

    @property
    def mu(self) -> float:
        return self.youngs_modulus / (2.0 * (1.0 + self.poisson_ratio))

    @property
    def lam(self) -> float:
        nu = self.poisson_ratio
        return self.youngs_modulus * nu / ((1.0 + nu) * (1.0 - 2.0 * nu))

    def wave_speed(self) -> float:
        """Dilatational wave speed sqrt((lambda + 2 mu) / rho)."""
        return float(np.sqrt((self.lam + 2.0 * self.mu) / self.density))


@dataclass
class SphereCollider:
    """Kinematic sphere moving along ``velocity`` until ``turn_time``, then back.

    After returning to its start it stays put.
    """

    center: np.ndarray
    radius: float
    velocity: np.ndarray
    turn_time: Optional[float] = None

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        self.velocity = np.asarray(self.velocity, dtype=np.float64)
        if self.radius <= 0:
            raise ValueError("collider radius must be positive")

    def _travel(self, t: float):
        if self.turn_time is None or t <= self.turn_time:
            return t, 1.0
        back = 2.0 * self.turn_time - t
        return (back, -1.0) if back > 0 else (0.0, 0.0)

    def position(self, t: float) -> np.ndarray:
        s, _ = self._travel(t)
        return self.center + s * self.velocity

    def current_velocity(self, t: float) -> np.ndarray:
        _, sign = self._travel(t)
        return sign * self.velocity


@dataclass
class MpmState:
    """Particles, background grid description and material."""

    x: np.ndarray  # (N, 3) positions
    v: np.ndarray  # (N, 3) velocities
    C: np.ndarray  # (N, 3, 3) affine velocity
    F: np.ndarray  # (N, 3, 3) deformation gradient
    mass: np.ndarray  # (N,)
    volume: np.ndarray  # (N,) rest volume
    material: Material
    dt: float
    h: float
    origin: np.ndarray  # world position of grid node (0, 0, 0)
    shape: tuple  # grid node counts
    gravity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    time: float = 0.0
    step: int = 0
    damping: float = 0.0  # grid velocity damping rate (1/s)
    colliders: List[SphereCollider] = field(default_factory=list)
    grid_mass: Optional[np.ndarray] = None
    grid_momentum: Optional[np.ndarray] = None

    def __post_init__(self):
        n = self.x.shape[0]
        if self.x.shape != (n, 3) or self.v.shape != (n, 3):
            raise ValueError("positions and velocities must be N x 3")
        if self.C.shape != (n, 3, 3) or self.F.shape != (n, 3, 3):
            raise ValueError("C and F must be N x 3 x 3")
        if np.any(self.mass <= 0):
            raise ValueError("particle mass must be positive")
        self.origin = np.asarray(self.origin, dtype=np.float64)
        self.gravity = np.asarray(self.gravity, dtype=np.float64)
        self.shape = tuple(int(s) for s in self.shape)

    @property
    def n_particles(self) -> int:
        return self.x.shape[0]

    def max_dt(self) -> float:
        speed = self.material.wave_speed() + float(np.max(np.linalg.norm(self.v, axis=1), initial=0.0))
        return 0.5 * self.h / speed

    def total_mass(self) -> float:
        return float(self.mass.sum())

    def momentum(self) -> np.ndarray:
        return (self.mass[:, None] * self.v).sum(axis=0)

    def copy(self) -> "MpmState":
        return replace(self, x=self.x.copy(), v=self.v.copy(), C=self.C.copy(), F=self.F.copy(),
                       colliders=list(self.colliders))


# ------------------------------------------------------------------ inside test


@njit(cache=True)
def _parity(p, tris, d, eps):
    """Count crossings of the ray p + s d (s > 0). Returns -1 on a grazing hit,
    -2 when p lies on a triangle."""
    count = 0
    for f in range(tris.shape[0]):
        a = tris[f, 0]
        e1 = tris[f, 1] - a
        e2 = tris[f, 2] - a
        pv = np.cross(d, e2)
        det = np.dot(e1, pv)
        tv = p - a
        if abs(det) < eps:
            # ray parallel to the plane: only matters if p is in the plane
            n = np.cross(e1, e2)
            nn = np.sqrt(np.dot(n, n))
            if nn > 0 and abs(np.dot(tv, n)) / nn < eps:
                # coplanar; check whether p is inside the triangle
                qv = np.cross(tv, e1)
                nrm = np.dot(n, n)
                u = np.dot(np.cross(tv, e2), -n) / nrm
                w = np.dot(qv, -n) / nrm
                if u >= -eps and w >= -eps and u + w <= 1 + eps:
                    return -2
            continue
        inv = 1.0 / det
        u = np.dot(tv, pv) * inv
        if u < -eps or u > 1 + eps:
            continue
        qv = np.cross(tv, e1)
        w = np.dot(d, qv) * inv
        if w < -eps or u + w > 1 + eps:
            continue
        s = np.dot(e2, qv) * inv
        if abs(s) < eps:
            return -2
        if s < 0:
            continue
        if u < eps or w < eps or u + w > 1 - eps:
            return -1
        count += 1
    return count


_RAY_DIRECTIONS = np.array([
    [0.5773502691896258, 0.5773502691896258, 0.5773502691896258],
    [0.8017837257372732, 0.2672612419124244, 0.5345224838248488],
    [0.2672612419124244, -0.8017837257372732, 0.5345224838248488],
    [-0.4082482904638631, 0.4082482904638631, 0.8164965809277261],
    [0.7071067811865476, -0.5, 0.5],
])


def point_in_mesh(mesh: TriMesh, p, check: bool = True, eps: float = 1e-10) -> bool:
    """Parity test along a fixed ray; grazing hits retry along other rays.

    Points lying on the surface count as inside (closed-set convention).
    """
    if check:
        rep = validate_watertight(mesh)
        if not rep.passed:
            raise NotWatertight(f"mesh is not watertight: {rep.failures()}")
    tris = np.ascontiguousarray(mesh.vertices[mesh.faces], dtype=np.float64)
    return bool(_inside(tris, np.asarray(p, dtype=np.float64).reshape(1, 3), eps)[0])


def _inside(tris: np.ndarray, pts: np.ndarray, eps: float) -> np.ndarray:
    out = np.zeros(len(pts), dtype=bool)
    lo = tris.min(axis=(0, 1)) - eps
    hi = tris.max(axis=(0, 1)) + eps
    for i, p in enumerate(pts):
        if np.any(p < lo) or np.any(p > hi):
            continue
        for d in _RAY_DIRECTIONS:
            c = _parity(p, tris, d, eps)
            if c == -2:
                out[i] = True
                break
            if c >= 0:
                out[i] = bool(c % 2)
                break
        else:
            raise MeshError(f"could not classify point {p}: every ray grazed an edge")
    return out


def fill_particles(mesh: TriMesh, spacing: float, jitter: float = 0.0, seed: int = 0,
                   max_particles: int = 200_000) -> np.ndarray:
    """Grid samples at ``spacing`` (cell centres, optionally jittered) inside the mesh.

    ``jitter`` is a fraction of the spacing. If the bounding box would hold
    more than ``max_particles`` samples the spacing is coarsened to fit.
    """
    if spacing <= 0:
        raise ValueError("spacing must be positive")
    rep = validate_watertight(mesh)
    if not rep.passed:
        raise NotWatertight(f"mesh is not watertight: {rep.failures()}")
    lo = mesh.vertices.min(axis=0)
    hi = mesh.vertices.max(axis=0)
    extent = hi - lo
    counts = np.floor(extent / spacing + 1e-9).astype(int)
    if np.any(counts < 1):
        raise EmptySampling(f"spacing {spacing} exceeds the mesh bounding box {extent}")
    if np.prod(counts.astype(float)) > max_particles:
        new = spacing * (np.prod(counts.astype(float)) / max_particles) ** (1.0 / 3.0)
        log.warning("coarsening particle spacing %.4g -> %.4g to respect the %d cap",
                    spacing, new, max_particles)
        return fill_particles(mesh, new * 1.0001, jitter, seed, max_particles)
    start = lo + (extent - counts * spacing) / 2.0 + 0.5 * spacing
    axes = [start[i] + spacing * np.arange(counts[i]) for i in range(3)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    if jitter > 0:
        rng = np.random.default_rng(seed)
        pts = pts + rng.uniform(-0.5, 0.5, size=pts.shape) * jitter * spacing
    tris = np.ascontiguousarray(mesh.vertices[mesh.faces], dtype=np.float64)
    keep = _inside(tris, pts, 1e-10)
    if not keep.any():
        raise EmptySampling("no sample fell inside the mesh")
    return pts[keep]


# ------------------------------------------------------------------ solver


def make_state(positions: np.ndarray, spacing: float, material: Material = Material(),
               gravity=(0.0, 0.0, -9.81), grid_h: Optional[float] = None, dt: Optional[float] = None,
               padding: float = 0.0, domain=None, damping: float = 0.0,
               colliders: Sequence[SphereCollider] = ()) -> MpmState:
    """Wrap particle positions into a state at rest.

    The grid spacing defaults to twice the particle spacing, giving about
    eight particles per cell. With ``domain`` (a (2, 3) box) the innermost
    sticky node layer lies on the box faces, so the box is the wall. Otherwise
    the particle bounding box is grown by ``padding`` and the band sits outside.
    """
    x = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    n = x.shape[0]
    if n == 0:
        raise EmptySampling("no particles")
    h = float(grid_h if grid_h is not None else 2.0 * spacing)
    vol = np.full(n, float(spacing) ** 3)
    if domain is None:
        lo = x.min(axis=0) - padding
        hi = x.max(axis=0) + padding
        band = (BOUNDARY_NODES + 1) * h
    else:
        lo, hi = (np.asarray(b, dtype=np.float64) for b in domain)
        band = (BOUNDARY_NODES - 1) * h
    origin = lo - band
    shape = tuple(int(s) for s in np.ceil((hi + band - origin) / h - 1e-9).astype(int) + 1)
    eye = np.broadcast_to(np.eye(3), (n, 3, 3)).copy()
    st = MpmState(x=x.copy(), v=np.zeros((n, 3)), C=np.zeros((n, 3, 3)), F=eye,
                  mass=vol * material.density, volume=vol, material=material, dt=0.0, h=h,
                  origin=origin, shape=shape, gravity=np.asarray(gravity, dtype=np.float64),
                  damping=damping, colliders=list(colliders))
    st.dt = float(dt) if dt is not None else 0.8 * st.max_dt()
    return st


@njit(cache=True)
def _weights(fx):
    w = np.empty((3, 3))
    for a in range(3):
        f = fx[a]
        w[0, a] = 0.5 * (1.5 - f) ** 2
        w[1, a] = 0.75 - (f - 1.0) ** 2
        w[2, a] = 0.5 * (f - 0.5) ** 2
    return w


@njit(cache=True)
def _p2g(x, v, C, F, mass, vol, mu, lam, dt, origin, h, gm, gp):
    inv_h = 1.0 / h
    nx, ny, nz = gm.shape
    eye = np.eye(3)
    for p in range(x.shape[0]):
        Fp = F[p]
        J = np.linalg.det(Fp)
        if not (J > 0.0):
            return p
        U, S, Vt = np.linalg.svd(Fp)
        R = U @ Vt
        # Kirchhoff stress of fixed-corotated elasticity
        tau = 2.0 * mu * (Fp - R) @ Fp.T + lam * (J - 1.0) * J * eye
        affine = -dt * vol[p] * 4.0 * inv_h * inv_h * tau + mass[p] * C[p]
        xi = (x[p] - origin) * inv_h
        base = np.empty(3, dtype=np.int64)
        fx = np.empty(3)
        for a in range(3):
            base[a] = int(np.floor(xi[a] - 0.5))
            fx[a] = xi[a] - base[a]
        if base[0] < 0 or base[1] < 0 or base[2] < 0 or base[0] + 2 >= nx or base[1] + 2 >= ny or base[2] + 2 >= nz:
            return p
        w = _weights(fx)
        for i in range(3):
            for j in range(3):
                for k in range(3):
                    wt = w[i, 0] * w[j, 1] * w[k, 2]
                    d0 = (i - fx[0]) * h
                    d1 = (j - fx[1]) * h
                    d2 = (k - fx[2]) * h
                    gi, gj, gk = base[0] + i, base[1] + j, base[2] + k
                    gm[gi, gj, gk] += wt * mass[p]
                    for a in range(3):
                        mom = mass[p] * v[p, a] + affine[a, 0] * d0 + affine[a, 1] * d1 + affine[a, 2] * d2
                        gp[gi, gj, gk, a] += wt * mom
    return -1


@njit(cache=True)
def _g2p(x, v, C, F, dt, origin, h, gv):
    inv_h = 1.0 / h
    for p in range(x.shape[0]):
        xi = (x[p] - origin) * inv_h
        base = np.empty(3, dtype=np.int64)
        fx = np.empty(3)
        for a in range(3):
            base[a] = int(np.floor(xi[a] - 0.5))
            fx[a] = xi[a] - base[a]
        w = _weights(fx)
        nv = np.zeros(3)
        nc = np.zeros((3, 3))
        for i in range(3):
            for j in range(3):
                for k in range(3):
                    wt = w[i, 0] * w[j, 1] * w[k, 2]
                    d = np.array([(i - fx[0]) * h, (j - fx[1]) * h, (k - fx[2]) * h])
                    g = gv[base[0] + i, base[1] + j, base[2] + k]
                    for a in range(3):
                        nv[a] += wt * g[a]
                        for b in range(3):
                            nc[a, b] += 4.0 * inv_h * inv_h * wt * g[a] * d[b]
        v[p] = nv
        C[p] = nc
        F[p] = (np.eye(3) + dt * nc) @ F[p]
        x[p] = x[p] + dt * nv


def mpm_step(state: MpmState) -> MpmState:
    """Advance one explicit MLS-MPM step; returns a new state."""
    if state.dt > state.max_dt() * (1 + 1e-12):
        raise CflViolation(f"dt {state.dt:.4g} exceeds the CFL bound {state.max_dt():.4g}")
    s = state.copy()
    mat = s.material
    gm = np.zeros(s.shape)
    gp = np.zeros(s.shape + (3,))
    bad = _p2g(s.x, s.v, s.C, s.F, s.mass, s.volume, mat.mu, mat.lam, s.dt, s.origin, s.h, gm, gp)
    if bad >= 0:
        reason = "inverted deformation gradient" if not np.linalg.det(s.F[bad]) > 0 else "left the grid"
        raise SimulationDiverged(int(bad), reason)
    gv = _grid_update(s, gm, gp)
    _g2p(s.x, s.v, s.C, s.F, s.dt, s.origin, s.h, gv)
    finite = np.isfinite(s.x).all(axis=1) & np.isfinite(s.v).all(axis=1) & np.isfinite(s.F).all(axis=(1, 2))
    if not finite.all():
        raise SimulationDiverged(int(np.argmin(finite)))
    s.grid_mass, s.grid_momentum = gm, gp
    s.time = state.time + s.dt
    s.step = state.step + 1
    return s


def _grid_update(s: MpmState, gm: np.ndarray, gp: np.ndarray) -> np.ndarray:
    occupied = gm > 0
    gv = np.zeros_like(gp)
    gv[occupied] = gp[occupied] / gm[occupied][:, None]
    gv[occupied] += s.dt * s.gravity
    if s.damping > 0:
        gv *= np.exp(-s.damping * s.dt)
    if s.colliders:
        idx = np.argwhere(occupied)
        pos = s.origin + idx * s.h
        for col in s.colliders:
            c = col.position(s.time)
            cv = col.current_velocity(s.time)
            off = pos - c
            dist = np.linalg.norm(off, axis=1)
            hit = dist < col.radius
            if not hit.any():
                continue
            n = off[hit] / np.maximum(dist[hit], 1e-12)[:, None]
            sel = tuple(idx[hit].T)
            rel = gv[sel] - cv
            vn = np.einsum("ij,ij->i", rel, n)
            rel -= np.minimum(vn, 0.0)[:, None] * n
            gv[sel] = rel + cv
    b = BOUNDARY_NODES
    for a in range(3):
        lo = [slice(None)] * 4
        hi = [slice(None)] * 4
        lo[a] = slice(0, b)
        hi[a] = slice(s.shape[a] - b, None)
        gv[tuple(lo)] = 0.0
        gv[tuple(hi)] = 0.0
    return gv


@dataclass
class Trajectory:
    times: List[float]
    positions: List[np.ndarray]
    final: MpmState


def simulate(mesh: TriMesh, material: Material = Material(), steps: int = 100,
             colliders: Sequence[SphereCollider] = (), spacing: Optional[float] = None,
             snapshot_every: int = 10, gravity=(0.0, 0.0, -9.81), padding: Optional[float] = None,
             damping: float = 0.0, jitter: float = 0.0, seed: int = 0,
             max_particles: int = 200_000,
             callback: Optional[Callable[[MpmState], None]] = None) -> Trajectory:
    """Fill ``mesh`` with particles and run ``steps`` solver steps.

    Snapshots are taken at step 0 and every ``snapshot_every`` steps, plus the
    last step. The domain is the mesh box grown by ``padding``, except on the
    side gravity points to, where the wall lies on the mesh.
    """
    if steps < 0:
        raise ValueError("steps must be >= 0")
    ext = mesh.vertices.max(axis=0) - mesh.vertices.min(axis=0)
    if spacing is None:
        spacing = float(ext.max()) / 40.0
    pts = fill_particles(mesh, spacing, jitter=jitter, seed=seed, max_particles=max_particles)
    if len(pts) > 1:
        # the cap may have coarsened the lattice
        d = np.sort(np.abs(np.diff(np.unique(pts[:, 0]))))
        if d.size and d[-1] > spacing * 1.5 and jitter == 0:
            spacing = float(d[d > 1e-12][0])
    pad = float(ext.max()) * 0.25 if padding is None else padding
    # the wall on the gravity side touches the mesh, so the body starts resting on it
    lo = mesh.vertices.min(axis=0) - pad
    hi = mesh.vertices.max(axis=0) + pad
    g = np.asarray(gravity, dtype=np.float64)
    for a in range(3):
        if g[a] > 0:
            hi[a] = mesh.vertices[:, a].max()
        elif g[a] < 0:
            lo[a] = mesh.vertices[:, a].min()
    state = make_state(pts, spacing, material, gravity=gravity, domain=(lo, hi),
                       damping=damping, colliders=colliders)
    times, snaps = [0.0], [state.x.copy()]
    for k in range(1, steps + 1):
        state = mpm_step(state)
        if callback is not None:
            callback(state)
        if k % max(1, snapshot_every) == 0 or k == steps:
            times.append(state.time)
            snaps.append(state.x.copy())
    return Trajectory(times, snaps, state)


# ------------------------------------------------------------------ snapshot io


def save_particles(path, positions: np.ndarray, time: float = 0.0) -> None:
    pos = np.ascontiguousarray(positions, dtype="<f4").reshape(-1, 3)
    with open(path, "wb") as fh:
        fh.write(PTS_MAGIC)
        fh.write(struct.pack("<IId", PTS_VERSION, pos.shape[0], float(time)))
        fh.write(pos.tobytes())


def load_particles(path):
    """Returns (positions (N, 3) float32, time)."""
    data = Path(path).read_bytes()
    if data[:16] != PTS_MAGIC:
        raise ValueError(f"{path}: not a particle snapshot")
    version, n, t = struct.unpack_from("<IId", data, 16)
    if version != PTS_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    pos = np.frombuffer(data, dtype="<f4", count=3 * n, offset=32).reshape(n, 3)
    return pos.copy(), t
