import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from endorecon.geometry import (MeshError, MultipleComponents, TriMesh, backproject, bilateral_filter,
                                triangulate_heightfield)
from endorecon.mesh_close import boundary_edges, order_boundary_loop
from endorecon.renderer import Camera


def test_backproject_principal_point():
    cam = Camera(80, 80, 2, 2, 5, 5)
    d = np.zeros((5, 5))
    d[2, 2] = 5.0
    pts, pix = backproject(d, cam)
    assert np.allclose(pts, [[0, 0, 5]], atol=1e-15)
    assert pix.tolist() == [[2, 2]]


def test_backproject_substitution():
    cam = Camera(100, 100, 50, 50, 200, 101)
    d = np.zeros((101, 200))
    d[50, 150] = 10.0
    pts, _ = backproject(d, cam)
    assert np.allclose(pts, [[10, 0, 10]], atol=1e-12)


def test_project_backproject_round_trip(rng):
    cam = Camera(70, 65, 31.5, 24.5, 64, 50)
    p = np.column_stack([rng.uniform(-0.3, 0.3, 30), rng.uniform(-0.3, 0.3, 30), rng.uniform(0.8, 1.5, 30)])
    uv, z = cam.project(p)
    # back-project at the continuous pixel position with the same formula
    back = np.column_stack([z * (uv[:, 0] - cam.cx) / cam.fx, z * (uv[:, 1] - cam.cy) / cam.fy, z])
    assert np.allclose(back, p, atol=1e-9)


def test_backproject_skips_invalid():
    cam = Camera(10, 10, 1, 1, 3, 3)
    d = np.ones((3, 3))
    valid = np.ones((3, 3), bool)
    valid[0, 0] = False
    pts, pix = backproject(d, cam, valid)
    assert len(pts) == 8 and [0, 0] not in pix.tolist()


# ---------------------------------------------------------------- bilateral


def test_bilateral_constant_unchanged():
    d = np.full((12, 9), 2.5)
    assert np.allclose(bilateral_filter(d, 3.0, 0.01, 5), d, atol=1e-12)


def test_bilateral_radius_zero_identity(rng):
    d = rng.uniform(1, 2, (6, 6))
    assert np.array_equal(bilateral_filter(d, 3.0, 0.1, 0), d)


def test_bilateral_preserves_step_edge():
    d = np.array([[1.0, 1.0, 10.0, 10.0]])
    out = bilateral_filter(d, 3.0, 0.1, 2)
    # oracle: direct weighted sum; cross-edge weights are exp(-81/0.02) ~ 0
    assert np.allclose(out, d, atol=1e-3)


def test_bilateral_rejects_bad_sigma():
    with pytest.raises(ValueError):
        bilateral_filter(np.ones((3, 3)), 0.0, 0.1, 1)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), sigma_r=st.floats(0.01, 0.5))
def test_bilateral_bounded_deviation_on_flat_regions(seed, sigma_r):
    rng = np.random.default_rng(seed)
    d = 1.0 + rng.uniform(0, sigma_r, size=(10, 10))
    out = bilateral_filter(d, 2.0, sigma_r, 3)
    assert np.max(np.abs(out - d)) <= sigma_r + 1e-12


# ---------------------------------------------------------------- triangulation


def _cam(h, w):
    return Camera(20.0, 20.0, (w - 1) / 2, (h - 1) / 2, w, h)


def test_smallest_quad():
    m = triangulate_heightfield(np.ones((2, 2)), _cam(2, 2))
    assert m.n_vertices == 4 and m.n_faces == 2
    assert len(boundary_edges(m)) == 4


def test_three_by_three():
    m = triangulate_heightfield(np.ones((3, 3)), _cam(3, 3))
    assert m.n_vertices == 9 and m.n_faces == 8


@settings(max_examples=30, deadline=None)
@given(n=st.integers(2, 12), m=st.integers(2, 12))
def test_grid_boundary_length(n, m):
    mesh = triangulate_heightfield(np.full((n, m), 1.3), _cam(n, m))
    loop = order_boundary_loop(boundary_edges(mesh))
    assert len(loop.vertices) - 1 == 2 * (n - 1) + 2 * (m - 1)


def test_faces_wind_towards_camera(rng):
    d = 1 + 0.01 * rng.uniform(size=(5, 6))
    mesh = triangulate_heightfield(d, _cam(5, 6))
    v = mesh.vertices[mesh.faces]
    n = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
    assert np.all(n[:, 2] < 0)


def test_vertices_equal_backprojection(rng):
    d = rng.uniform(1, 2, size=(6, 7))
    cam = _cam(6, 7)
    mesh = triangulate_heightfield(d, cam)
    pts, _ = backproject(d, cam)
    assert np.array_equal(mesh.vertices, pts)


def test_two_components_rejected():
    valid = np.zeros((6, 6), bool)
    valid[:2, :2] = True
    valid[4:, 4:] = True
    with pytest.raises(MultipleComponents) as exc:
        triangulate_heightfield(np.ones((6, 6)), _cam(6, 6), valid)
    assert exc.value.count == 2


def test_trimesh_validation():
    with pytest.raises(MeshError):
        TriMesh(np.zeros((3, 3)), [[0, 1, 3]])
    with pytest.raises(MeshError):
        TriMesh(np.zeros((3, 3)), [[0, 1, 1]])


def test_colours_carried():
    rgb = np.zeros((2, 2, 3))
    rgb[..., 0] = 1.0
    m = triangulate_heightfield(np.ones((2, 2)), _cam(2, 2), colors=rgb)
    assert np.all(m.colors == [255, 0, 0])
