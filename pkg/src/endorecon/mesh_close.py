"""Close an open single-hole surface by stitching its boundary to a flat base.

The procedure orders the boundary loop, projects every loop vertex onto the
plane ``z = zeta``, joins loop and projections with a band of side triangles
and fans the projections around the projected centre of mass.
"""

from __future__ import annotations

from collections import deque
from dataclasses import asdict, dataclass
from typing import Dict, List, Tuple

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .geometry import MeshError, TriMesh


class NonManifoldInput(MeshError):
    pass


class NoBoundary(MeshError):
    pass


class NotACycle(MeshError):
    pass


class MultipleHoles(MeshError):
    def __init__(self, count: int):
        super().__init__(f"mesh has {count} boundary loops, expected exactly one")
        self.count = count


class ThicknessError(MeshError):
    pass


@dataclass
class CloseConfig:
    thickness: float  # z of the base plane
    weld_epsilon: float = 1e-9

    def __post_init__(self):
        if self.weld_epsilon < 0:
            raise ValueError("weld_epsilon must be >= 0")


@dataclass
class BoundaryLoop:
    vertices: List[int]  # cyclic, first == last

    def __len__(self) -> int:
        return len(self.vertices)

    @property
    def n_unique(self) -> int:
        return len(self.vertices) - 1


def _directed_edges(faces: np.ndarray) -> np.ndarray:
    return np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])


def boundary_edges(mesh: TriMesh) -> np.ndarray:
    """Edges used by exactly one face, oriented as in that face, in face order."""
    n_f = mesh.n_faces
    directed = _directed_edges(mesh.faces)
    # interleave so rows follow face order: f0e0, f0e1, f0e2, f1e0, ...
    order = np.arange(3 * n_f).reshape(3, n_f).T.ravel()
    directed = directed[order]
    key = np.sort(directed, axis=1)
    _, inverse, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.ravel()
    if np.any(counts >= 3):
        raise NonManifoldInput(f"{int((counts >= 3).sum())} edges are shared by 3 or more faces")
    return directed[counts[inverse] == 1]


def order_boundary_loop(edges) -> BoundaryLoop:
    """Walk the boundary from its first edge, always to an unvisited neighbour.

    The start vertex is repeated at the end. Raises :class:`MultipleHoles`
    when the edges form several cycles and :class:`NotACycle` when they do
    not form a simple closed cycle.
    """
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if len(edges) == 0:
        raise NoBoundary("no boundary edges")
    adj: Dict[int, List[int]] = {}
    for a, b in edges.tolist():
        adj.setdefault(a, []).append(b)
        adj.setdefault(b, []).append(a)
    if any(len(n) != 2 for n in adj.values()):
        n_cycles = _count_cycles(adj)
        if all(len(n) % 2 == 0 for n in adj.values()) and n_cycles > 1:
            raise MultipleHoles(n_cycles)
        raise NotACycle("boundary edges do not form a simple closed cycle")
    u, v = int(edges[0, 0]), int(edges[0, 1])
    loop = [u]
    seen = {u}
    while v != u:
        loop.append(v)
        seen.add(v)
        u = v
        for k in adj[v]:
            if k not in seen:
                v = k
                break
    if u not in adj[loop[0]] or len(loop) < 3:
        raise NotACycle("boundary walk did not return to its start")
    if len(seen) != len(adj):
        raise MultipleHoles(_count_cycles(adj))
    loop.append(loop[0])
    return BoundaryLoop(loop)


def _count_cycles(adj: Dict[int, List[int]]) -> int:
    seen, count = set(), 0
    for start in adj:
        if start in seen:
            continue
        count += 1
        stack = [start]
        seen.add(start)
        while stack:
            x = stack.pop()
            for y in adj[x]:
                if y not in seen:
                    seen.add(y)
                    stack.append(y)
    return count


def _weld(vertices: np.ndarray, candidates: np.ndarray, eps: float) -> np.ndarray:
    """Map each vertex to a representative; only ``candidates`` may merge."""
    remap = np.arange(len(vertices))
    pts = vertices[candidates]
    if eps > 0:
        pairs = cKDTree(pts).query_pairs(eps, output_type="ndarray")
    else:
        _, first, inv = np.unique(pts, axis=0, return_index=True, return_inverse=True)
        inv = inv.ravel()
        pairs = np.stack([np.arange(len(pts)), first[inv]], axis=1)
        pairs = pairs[pairs[:, 0] != pairs[:, 1]]
    parent = list(range(len(pts)))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for a, b in pairs.tolist():
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)
    for i in range(len(pts)):
        remap[candidates[i]] = candidates[find(i)]
    return remap


def orient_faces(faces: np.ndarray, n_fixed: int = 0) -> np.ndarray:
    """Flip faces so every shared edge is traversed once in each direction.

    Breadth-first propagation; components seeded from faces ``< n_fixed``
    keep the seed's winding.
    """
    faces = faces.copy()
    n = len(faces)
    edge_faces: Dict[Tuple[int, int], List[int]] = {}
    for fi, (a, b, c) in enumerate(faces.tolist()):
        for e in ((a, b), (b, c), (c, a)):
            edge_faces.setdefault((min(e), max(e)), []).append(fi)
    done = np.zeros(n, dtype=bool)

    def has_directed(fi, a, b):
        x, y, z = faces[fi]
        return (x, y) == (a, b) or (y, z) == (a, b) or (z, x) == (a, b)

    for seed in range(n):
        if done[seed]:
            continue
        done[seed] = True
        queue = deque([seed])
        while queue:
            fi = queue.popleft()
            a, b, c = faces[fi].tolist()
            for e in ((a, b), (b, c), (c, a)):
                for fj in edge_faces[(min(e), max(e))]:
                    if fj == fi or done[fj]:
                        continue
                    if has_directed(fj, e[0], e[1]):
                        faces[fj] = faces[fj][::-1]
                    done[fj] = True
                    queue.append(fj)
    return faces


def close_mesh(mesh: TriMesh, cfg: CloseConfig) -> TriMesh:
    """Append a base at ``z = cfg.thickness`` and stitch it to the boundary loop."""
    edges = boundary_edges(mesh)
    if len(edges) == 0:
        raise NoBoundary("mesh is already closed")
    loop = order_boundary_loop(edges)
    zeta = float(cfg.thickness)
    ring = np.asarray(loop.vertices[:-1])
    if not zeta > mesh.vertices[ring, 2].max():
        raise ThicknessError(
            f"base plane z={zeta} must lie beyond every boundary vertex (max z {mesh.vertices[ring, 2].max():.6g})")

    verts: List[np.ndarray] = [mesh.vertices]
    faces: List[Tuple[int, int, int]] = []
    n0 = mesh.n_vertices
    center = np.array([mesh.vertices[:, 0].mean(), mesh.vertices[:, 1].mean(), zeta])
    center_id = n0
    new_pts = [center]
    queue = deque(loop.vertices)
    first = True
    v_proj = p = -1
    while queue:
        v = queue.popleft()
        if not first:
            p = v_proj
        x, y = mesh.vertices[v, 0], mesh.vertices[v, 1]
        v_proj = n0 + len(new_pts)
        new_pts.append(np.array([x, y, zeta]))
        if queue:
            u = queue[0]
            faces.append((v, u, v_proj))
        if not first:
            faces.append((p, v, v_proj))
            faces.append((p, center_id, v_proj))
        first = False

    all_v = np.concatenate([mesh.vertices, np.asarray(new_pts)])
    all_f = np.concatenate([mesh.faces, np.asarray(faces, dtype=np.int64)])
    # the closing iteration re-projects the start vertex; weld it
    proj_ids = np.arange(n0 + 1, len(all_v))
    remap = _weld(all_v, proj_ids, cfg.weld_epsilon)
    keep = np.unique(remap)
    compact = -np.ones(len(all_v), dtype=np.int64)
    compact[keep] = np.arange(len(keep))
    all_f = compact[remap[all_f]]
    all_v = all_v[keep]
    all_f = all_f[(all_f[:, 0] != all_f[:, 1]) & (all_f[:, 1] != all_f[:, 2]) & (all_f[:, 0] != all_f[:, 2])]
    all_f = orient_faces(all_f, n_fixed=mesh.n_faces)
    colors = None
    if mesh.colors is not None:
        extra = np.repeat(np.array([[200, 120, 120]], np.uint8), len(all_v) - n0, axis=0)
        colors = np.concatenate([mesh.colors, extra])
    closed = TriMesh(all_v, all_f, colors)
    if closed.signed_volume() < 0:
        closed.faces = closed.faces[:, ::-1].copy()
    return closed


# ------------------------------------------------------------------ validation


@dataclass
class WatertightReport:
    n_vertices: int
    n_edges: int
    n_faces: int
    boundary_edges: int
    nonmanifold_edges: int
    edges_manifold: bool
    components: int
    single_component: bool
    euler_characteristic: int
    orientation_consistent: bool
    signed_volume: float
    volume_positive: bool

    @property
    def passed(self) -> bool:
        return not self.failures()

    def failures(self) -> List[str]:
        """Names of the failed checks, empty when the mesh is watertight."""
        out = []
        if not self.edges_manifold:
            out.append("edges_manifold")
        if not self.single_component:
            out.append("single_component")
        if self.euler_characteristic != 2:
            out.append("euler_characteristic")
        if not self.orientation_consistent:
            out.append("orientation_consistent")
        if not self.volume_positive:
            out.append("volume_positive")
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        d["passed"] = self.passed
        return d


def validate_watertight(mesh: TriMesh) -> WatertightReport:
    """Check closure, connectivity, Euler characteristic, winding and volume."""
    f = mesh.faces
    directed = _directed_edges(f)
    key = np.sort(directed, axis=1)
    uniq, inverse, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
    n_boundary = int((counts == 1).sum())
    n_nonmanifold = int((counts > 2).sum())
    # each shared edge once in each direction: directed edges unique and paired
    d_uniq, d_counts = np.unique(directed, axis=0, return_counts=True)
    oriented = bool(len(d_uniq) == len(directed) and np.all(d_counts == 1)
                    and n_boundary == 0 and n_nonmanifold == 0)
    if n_boundary == 0 and n_nonmanifold == 0 and oriented:
        rev = d_uniq[:, ::-1]
        view = np.ascontiguousarray(d_uniq).view([("a", np.int64), ("b", np.int64)]).ravel()
        rview = np.ascontiguousarray(rev).view([("a", np.int64), ("b", np.int64)]).ravel()
        oriented = bool(np.isin(rview, view).all())
    used = np.unique(f)
    n_comp = 0
    if len(f):
        rows = np.repeat(np.arange(len(f)), 3)
        g = coo_matrix((np.ones(len(rows)), (rows, f.ravel())), shape=(len(f), mesh.n_vertices))
        ff = (g @ g.T).tocsr()
        n_comp, _ = connected_components(ff, directed=False)
    n_comp += mesh.n_vertices - len(used)  # isolated vertices
    vol = mesh.signed_volume() if len(f) else 0.0
    return WatertightReport(
        n_vertices=mesh.n_vertices,
        n_edges=len(uniq),
        n_faces=mesh.n_faces,
        boundary_edges=n_boundary,
        nonmanifold_edges=n_nonmanifold,
        edges_manifold=bool(n_boundary == 0 and n_nonmanifold == 0 and len(f) > 0),
        components=int(n_comp),
        single_component=bool(n_comp == 1),
        euler_characteristic=mesh.n_vertices - len(uniq) + mesh.n_faces,
        orientation_consistent=oriented,
        signed_volume=float(vol),
        volume_positive=bool(vol > 0),
    )


def split_components(mesh: TriMesh) -> List[TriMesh]:
    """Edge/vertex-connected pieces of a mesh, each re-indexed."""
    f = mesh.faces
    rows = np.repeat(np.arange(len(f)), 3)
    g = coo_matrix((np.ones(len(rows)), (rows, f.ravel())), shape=(len(f), mesh.n_vertices))
    n, labels = connected_components((g @ g.T).tocsr(), directed=False)
    parts = []
    for c in range(n):
        sub = f[labels == c]
        used = np.unique(sub)
        remap = -np.ones(mesh.n_vertices, dtype=np.int64)
        remap[used] = np.arange(len(used))
        cols = None if mesh.colors is None else mesh.colors[used]
        parts.append(TriMesh(mesh.vertices[used], remap[sub], cols))
    return parts
