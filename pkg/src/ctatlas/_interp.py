"""Point samplers over voxel grids (numba kernels).

Coordinates are continuous voxel indices, shape (N, 3), in x, y, z order.
Coordinates within ``SNAP`` of an integer are snapped so that identity
mappings reproduce grid values bit-exactly.
"""
import numpy as np
from numba import njit, prange

SNAP = 1e-7


@njit(cache=True, inline="always")
def _snap(c):
    r = np.floor(c + 0.5)
    if abs(c - r) < SNAP:
        return r
    return c


@njit(parallel=True, cache=True)
def _linear(data, coords, fill, clamp):
    nx, ny, nz, nc = data.shape
    npts = coords.shape[0]
    out = np.empty((npts, nc), dtype=np.float64)
    for p in prange(npts):
        x = _snap(coords[p, 0])
        y = _snap(coords[p, 1])
        z = _snap(coords[p, 2])
        if clamp:
            x = min(max(x, 0.0), nx - 1.0)
            y = min(max(y, 0.0), ny - 1.0)
            z = min(max(z, 0.0), nz - 1.0)
        elif (x < 0.0 or y < 0.0 or z < 0.0 or x > nx - 1.0
              or y > ny - 1.0 or z > nz - 1.0 or x != x or y != y or z != z):
            for c in range(nc):
                out[p, c] = fill
            continue
        i0 = min(int(np.floor(x)), max(nx - 2, 0))
        j0 = min(int(np.floor(y)), max(ny - 2, 0))
        k0 = min(int(np.floor(z)), max(nz - 2, 0))
        fx = x - i0
        fy = y - j0
        fz = z - k0
        i1 = min(i0 + 1, nx - 1)
        j1 = min(j0 + 1, ny - 1)
        k1 = min(k0 + 1, nz - 1)
        for c in range(nc):
            if fx == 0.0 and fy == 0.0 and fz == 0.0:
                out[p, c] = data[i0, j0, k0, c]
                continue
            c00 = data[i0, j0, k0, c] * (1.0 - fx) + data[i1, j0, k0, c] * fx
            c10 = data[i0, j1, k0, c] * (1.0 - fx) + data[i1, j1, k0, c] * fx
            c01 = data[i0, j0, k1, c] * (1.0 - fx) + data[i1, j0, k1, c] * fx
            c11 = data[i0, j1, k1, c] * (1.0 - fx) + data[i1, j1, k1, c] * fx
            c0 = c00 * (1.0 - fy) + c10 * fy
            c1 = c01 * (1.0 - fy) + c11 * fy
            out[p, c] = c0 * (1.0 - fz) + c1 * fz
    return out


@njit(parallel=True, cache=True)
def _nearest(data, coords, fill):
    nx, ny, nz = data.shape
    npts = coords.shape[0]
    out = np.empty(npts, dtype=data.dtype)
    for p in prange(npts):
        x = coords[p, 0]
        y = coords[p, 1]
        z = coords[p, 2]
        if x != x or y != y or z != z:
            out[p] = fill
            continue
        i = int(np.floor(x + 0.5))
        j = int(np.floor(y + 0.5))
        k = int(np.floor(z + 0.5))
        if i < 0 or j < 0 or k < 0 or i >= nx or j >= ny or k >= nz:
            out[p] = fill
        else:
            out[p] = data[i, j, k]
    return out


def sample_linear(data, coords, fill=0.0, clamp=False):
    """Trilinear samples of a 3D (or channelled 4D) array.

    Parameters
    ----------
    data : ndarray, shape (nx, ny, nz) or (nx, ny, nz, C)
    coords : ndarray, shape (N, 3)
        Continuous voxel coordinates.
    fill : float
        Value returned for points outside ``[0, n-1]`` on any axis.
    clamp : bool
        Clamp coordinates into the grid instead of filling (edge extension).

    Returns
    -------
    ndarray, shape (N,) or (N, C), float64
    """
    scalar = data.ndim == 3
    arr = data[..., None] if scalar else data
    coords = np.ascontiguousarray(coords, dtype=np.float64).reshape(-1, 3)
    out = _linear(np.ascontiguousarray(arr), coords, float(fill), bool(clamp))
    return out[:, 0] if scalar else out


def sample_nearest(data, coords, fill=0):
    """Nearest-neighbour samples; points outside the voxel extents get ``fill``."""
    coords = np.ascontiguousarray(coords, dtype=np.float64).reshape(-1, 3)
    return _nearest(np.ascontiguousarray(data), coords, data.dtype.type(fill))


def grid_coords(dims):
    """All voxel indices of a grid as float64 (N, 3), C-order over (i, j, k)."""
    ii, jj, kk = np.meshgrid(*(np.arange(n, dtype=np.float64) for n in dims), indexing="ij")
    return np.stack([ii.ravel(), jj.ravel(), kk.ravel()], axis=1)
