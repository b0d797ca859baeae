"""Self-similarity context (SSC) descriptors and Hamming patch costs.

Each voxel gets 12 channels, one per edge-adjacent pair of its six
neighbourhood centres ``x +/- r*e_axis``. A channel is the patch SSD between
the two neighbour patches, turned into ``exp(-dist / q2)`` with ``q2`` the
voxel's mean distance clamped by the image-wide mean. Channels are quantised
to one bit each (above the voxel's channel mean) into a 12-bit code.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numba import njit, prange

from .volume import Geometry, Volume

N_CHANNELS = 12
MAX_COST = 12.0

_AXES = np.eye(3, dtype=np.int64)
SIX_NEIGHBOURS = np.array([_AXES[0], -_AXES[0], _AXES[1], -_AXES[1], _AXES[2], -_AXES[2]])
# (i, j) indices into SIX_NEIGHBOURS; neighbours on different axes only.
CHANNEL_PAIRS = tuple((i, j) for i in range(6) for j in range(i + 1, 6) if i // 2 != j // 2)
assert len(CHANNEL_PAIRS) == N_CHANNELS

POPCOUNT = np.array([bin(i).count("1") for i in range(1 << N_CHANNELS)], dtype=np.uint8)


@dataclass(frozen=True, eq=False)
class DescriptorVolume:
    geometry: Geometry
    codes: np.ndarray = field(repr=False)
    channels: np.ndarray | None = field(default=None, repr=False)


def channel_distances(data: np.ndarray, offset: int = 1, patch_radius: int = 1) -> np.ndarray:
    """Patch-SSD distance for each of the 12 channel pairs, shape dims + (12,).

    Samples beyond the grid replicate the nearest edge voxel.
    """
    r, p = int(offset), int(patch_radius)
    img = np.asarray(data, dtype=np.float64)
    n = img.shape
    pad = r + p
    ip = np.pad(img, pad, mode="edge")
    ext = tuple(s + 2 * p for s in n)
    out = np.empty(n + (N_CHANNELS,), dtype=np.float64)
    for c, (a, b) in enumerate(CHANNEL_PAIRS):
        oa, ob = SIX_NEIGHBOURS[a] * r, SIX_NEIGHBOURS[b] * r
        sa = tuple(slice(r + oa[k], r + oa[k] + ext[k]) for k in range(3))
        sb = tuple(slice(r + ob[k], r + ob[k] + ext[k]) for k in range(3))
        diff = ip[sa] - ip[sb]
        acc = diff * diff
        for axis in range(3):
            s = None
            for t in range(2 * p + 1):
                sl = [slice(None)] * 3
                sl[axis] = slice(t, t + n[axis])
                s = acc[tuple(sl)].copy() if s is None else s + acc[tuple(sl)]
            acc = s
        out[..., c] = acc
    return out


def ssc_descriptor(v: Volume, offset: int = 1, patch_radius: int = 1,
                   keep_channels: bool = True) -> DescriptorVolume:
    """Compute per-voxel 12-bit SSC codes (and optionally the float channels).

    Parameters
    ----------
    v : Volume
    offset : int
        Distance ``r`` from the voxel to each of its six neighbourhood centres.
    patch_radius : int
        Half-width ``p`` of the cubic SSD patches.
    keep_channels : bool
        Retain the continuous channel values (float32) for diagnostics.
    """
    r, p = int(offset), int(patch_radius)
    if r < 1 or p < 0:
        raise ValueError("offset must be >= 1 and patch_radius >= 0")
    need = 2 * (r + p) + 1
    if min(v.geometry.dims) < need:
        raise ValueError(f"volume too small for SSC: need >= {need} voxels per axis")
    dist = channel_distances(v.data, r, p)
    global_mean = dist.mean()
    q2 = np.clip(dist.mean(axis=-1), 1e-6 * global_mean, 1e6 * global_mean)
    q2 = np.maximum(q2, np.finfo(np.float64).tiny)
    chan = np.exp(-dist / q2[..., None])
    bits = chan > chan.mean(axis=-1, keepdims=True)
    weights = (1 << np.arange(N_CHANNELS)).astype(np.uint16)
    codes = (bits.astype(np.uint16) * weights).sum(axis=-1, dtype=np.uint16)
    return DescriptorVolume(v.geometry, codes,
                            chan.astype(np.float32) if keep_channels else None)


def hamming_cost(a: int, b: int) -> int:
    """Number of differing bits between two 12-bit codes."""
    return int(POPCOUNT[(int(a) ^ int(b)) & 0xFFF])


@njit(parallel=True, cache=True)
def _patch_costs(fixed, moving, centers, labels, radius, popcount):
    nx, ny, nz = fixed.shape
    n_nodes = centers.shape[0]
    n_labels = labels.shape[0]
    out = np.empty((n_nodes, n_labels), dtype=np.float64)
    for n in prange(n_nodes):
        i0 = max(centers[n, 0] - radius, 0)
        i1 = min(centers[n, 0] + radius + 1, nx)
        j0 = max(centers[n, 1] - radius, 0)
        j1 = min(centers[n, 1] + radius + 1, ny)
        k0 = max(centers[n, 2] - radius, 0)
        k1 = min(centers[n, 2] + radius + 1, nz)
        count = (i1 - i0) * (j1 - j0) * (k1 - k0)
        for l in range(n_labels):
            dx = labels[l, 0]
            dy = labels[l, 1]
            dz = labels[l, 2]
            a0 = max(i0, -dx)
            a1 = min(i1, nx - dx)
            b0 = max(j0, -dy)
            b1 = min(j1, ny - dy)
            c0 = max(k0, -dz)
            c1 = min(k1, nz - dz)
            total = 0
            inside = 0
            if a1 > a0 and b1 > b0 and c1 > c0:
                inside = (a1 - a0) * (b1 - b0) * (c1 - c0)
                for i in range(a0, a1):
                    for j in range(b0, b1):
                        for k in range(c0, c1):
                            total += popcount[fixed[i, j, k] ^ moving[i + dx, j + dy, k + dz]]
            out[n, l] = (total + 12 * (count - inside)) / count
    return out


def patch_costs(fixed: DescriptorVolume, moving: DescriptorVolume, centers, labels,
                radius: int) -> np.ndarray:
    """Mean Hamming cost for every (centre, displacement) pair, shape (N, L).

    The patch is the cube of half-width ``radius`` around each centre,
    clipped to the fixed grid; moving samples outside the grid cost 12.
    """
    if fixed.codes.shape != moving.codes.shape:
        raise ValueError("descriptor volumes must share a grid")
    centers = np.ascontiguousarray(np.asarray(centers, dtype=np.int64).reshape(-1, 3))
    labels = np.ascontiguousarray(np.asarray(labels, dtype=np.int64).reshape(-1, 3))
    return _patch_costs(fixed.codes, moving.codes, centers, labels, int(radius), POPCOUNT)


def patch_descriptor_cost(fixed: DescriptorVolume, moving: DescriptorVolume, center, disp,
                          cost_patch_radius: int) -> float:
    """Mean Hamming cost of one patch comparing fixed at x with moving at x + disp."""
    return float(patch_costs(fixed, moving, [center], [disp], cost_patch_radius)[0, 0])
