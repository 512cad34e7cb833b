"""Compiled inner loops for grid lookups.

Loops run sequentially, so scatter-adds are deterministic for a given input
order.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def _cell(c, n):
    # clamp into [0, n-1] and pick the lower corner of the containing cell
    if c < 0.0:
        c = 0.0
    elif c > n - 1:
        c = n - 1.0
    i = int(np.floor(c))
    if i > n - 2:
        i = n - 2
    return i, c - i


@njit(cache=True)
def trilinear_forward(grid, nx, ny, nz, coords, out):
    """grid: (nx*ny*nz, C); coords: (N, 3) index space; out: (N, C) zero-filled."""
    n, nc = out.shape
    for p in range(n):
        x, y, z = coords[p, 0], coords[p, 1], coords[p, 2]
        if not (0.0 <= x <= nx - 1 and 0.0 <= y <= ny - 1 and 0.0 <= z <= nz - 1):
            continue
        i, fx = _cell(x, nx)
        j, fy = _cell(y, ny)
        k, fz = _cell(z, nz)
        for di in range(2):
            wx = fx if di else 1.0 - fx
            for dj in range(2):
                wy = fy if dj else 1.0 - fy
                for dk in range(2):
                    wz = fz if dk else 1.0 - fz
                    w = wx * wy * wz
                    row = ((i + di) * ny + (j + dj)) * nz + (k + dk)
                    for c in range(nc):
                        out[p, c] += w * grid[row, c]


@njit(cache=True)
def trilinear_backward(grid, nx, ny, nz, coords, gout, ggrid, gcoords, want_grid, want_coords):
    """Accumulate d/dgrid into ggrid and d/dcoords into gcoords."""
    n, nc = gout.shape
    for p in range(n):
        x, y, z = coords[p, 0], coords[p, 1], coords[p, 2]
        if not (0.0 <= x <= nx - 1 and 0.0 <= y <= ny - 1 and 0.0 <= z <= nz - 1):
            continue
        i, fx = _cell(x, nx)
        j, fy = _cell(y, ny)
        k, fz = _cell(z, nz)
        gx = 0.0
        gy = 0.0
        gz = 0.0
        for di in range(2):
            wx = fx if di else 1.0 - fx
            sx = 1.0 if di else -1.0
            for dj in range(2):
                wy = fy if dj else 1.0 - fy
                sy = 1.0 if dj else -1.0
                for dk in range(2):
                    wz = fz if dk else 1.0 - fz
                    sz = 1.0 if dk else -1.0
                    w = wx * wy * wz
                    row = ((i + di) * ny + (j + dj)) * nz + (k + dk)
                    dot = 0.0
                    for c in range(nc):
                        g = gout[p, c]
                        if want_grid:
                            ggrid[row, c] += w * g
                        dot += grid[row, c] * g
                    if want_coords:
                        gx += sx * wy * wz * dot
                        gy += sy * wx * wz * dot
                        gz += sz * wx * wy * dot
        if want_coords:
            gcoords[p, 0] += gx
            gcoords[p, 1] += gy
            gcoords[p, 2] += gz
