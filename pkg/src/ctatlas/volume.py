"""Volume and label-map data model, reorientation, resampling and z cropping.

Arrays are indexed ``data[i, j, k]`` with ``i`` along x; on disk this is the
x-fastest NIfTI order. World coordinates (mm) of voxel index ``v`` are
``origin + direction @ (spacing * v)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ._interp import grid_coords, sample_linear, sample_nearest

HU_FILL = -1024.0
LABEL_FILL = 0
MAX_LABEL = 13


def _as_tuple3(values, kind=float):
    vals = tuple(kind(v) for v in np.asarray(values).ravel())
    if len(vals) != 3:
        raise ValueError(f"expected 3 values, got {len(vals)}")
    return vals


@dataclass(frozen=True)
class Geometry:
    """Voxel grid placement in world space. Hashable and compared exactly."""

    dims: tuple
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)
    direction: tuple = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))

    def __post_init__(self):
        object.__setattr__(self, "dims", _as_tuple3(self.dims, int))
        object.__setattr__(self, "spacing", _as_tuple3(self.spacing))
        object.__setattr__(self, "origin", _as_tuple3(self.origin))
        d = np.asarray(self.direction, dtype=np.float64).reshape(3, 3)
        object.__setattr__(self, "direction", tuple(tuple(float(x) for x in row) for row in d))
        if min(self.dims) < 1:
            raise ValueError(f"dims must be positive, got {self.dims}")
        if min(self.spacing) <= 0 or not np.all(np.isfinite(self.spacing)):
            raise ValueError(f"spacing must be positive, got {self.spacing}")
        if not np.all(np.isfinite(self.origin)):
            raise ValueError("origin must be finite")
        if np.abs(d.T @ d - np.eye(3)).max() > 1e-6:
            raise ValueError("direction columns must be orthonormal")

    @property
    def direction_matrix(self) -> np.ndarray:
        return np.array(self.direction, dtype=np.float64)

    @property
    def n_voxels(self) -> int:
        return int(np.prod(self.dims))

    @property
    def vox2world(self) -> np.ndarray:
        """4x4 homogeneous voxel-index to world-mm matrix."""
        m = np.eye(4)
        m[:3, :3] = self.direction_matrix * np.asarray(self.spacing)[None, :]
        m[:3, 3] = self.origin
        return m

    @property
    def world2vox(self) -> np.ndarray:
        return np.linalg.inv(self.vox2world)

    def world_coords(self, index) -> np.ndarray:
        idx = np.asarray(index, dtype=np.float64)
        m = self.vox2world
        return idx @ m[:3, :3].T + m[:3, 3]

    def corners(self) -> np.ndarray:
        """Voxel indices of the 8 grid corners, shape (8, 3)."""
        hi = np.asarray(self.dims) - 1
        return np.array([[a, b, c] for a in (0, hi[0]) for b in (0, hi[1]) for c in (0, hi[2])],
                        dtype=np.float64)

    def center_world(self) -> np.ndarray:
        return self.world_coords((np.asarray(self.dims) - 1) / 2.0)

    def replace(self, **kw) -> "Geometry":
        vals = dict(dims=self.dims, spacing=self.spacing, origin=self.origin,
                    direction=self.direction)
        vals.update(kw)
        return Geometry(**vals)

    def allclose(self, other: "Geometry", atol=1e-5) -> bool:
        return (self.dims == other.dims
                and np.allclose(self.spacing, other.spacing, atol=atol, rtol=0)
                and np.allclose(self.origin, other.origin, atol=atol, rtol=0)
                and np.allclose(self.direction, other.direction, atol=atol, rtol=0))

    def to_dict(self) -> dict:
        return {"dims": list(self.dims), "spacing": list(self.spacing),
                "origin": list(self.origin), "direction": [list(r) for r in self.direction]}

    @classmethod
    def from_dict(cls, d) -> "Geometry":
        return cls(d["dims"], d["spacing"], d["origin"], d["direction"])


@dataclass(frozen=True, eq=False)
class Volume:
    """Scalar CT grid in HU. Data are float32 and read-only after construction."""

    geometry: Geometry
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float32, order="C", copy=True)
        if arr.shape != self.geometry.dims:
            raise ValueError(f"data shape {arr.shape} != dims {self.geometry.dims}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("volume data must be finite")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    fill_value = HU_FILL
    is_label = False

    @classmethod
    def from_array(cls, data, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0), direction=None):
        data = np.asarray(data)
        geom = Geometry(data.shape, spacing, origin, np.eye(3) if direction is None else direction)
        return cls(geom, data)

    def with_data(self, data):
        return type(self)(self.geometry, data)


@dataclass(frozen=True, eq=False)
class LabelMap:
    """Integer organ labels 0..13 sharing the Volume geometry model."""

    geometry: Geometry
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        raw = np.asarray(self.data)
        if raw.dtype.kind == "f":
            if not np.all(np.isfinite(raw)) or np.any(raw != np.round(raw)):
                raise ValueError("label data must be integer valued")
        if raw.size and (raw.min() < 0 or raw.max() > MAX_LABEL):
            raise ValueError(f"labels must lie in 0..{MAX_LABEL}")
        arr = np.array(raw, dtype=np.uint8, order="C", copy=True)
        if arr.shape != self.geometry.dims:
            raise ValueError(f"data shape {arr.shape} != dims {self.geometry.dims}")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    fill_value = LABEL_FILL
    is_label = True

    @classmethod
    def from_array(cls, data, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0), direction=None):
        data = np.asarray(data)
        geom = Geometry(data.shape, spacing, origin, np.eye(3) if direction is None else direction)
        return cls(geom, data)

    def with_data(self, data):
        return type(self)(self.geometry, data)

    def labels(self) -> set:
        return set(int(v) for v in np.unique(self.data))


def _axis_assignment(direction: np.ndarray):
    """Greedy match of voxel axes to world axes by largest |cosine|."""
    d = np.abs(direction).copy()
    src_axis = [-1, -1, -1]
    for _ in range(3):
        w, j = np.unravel_index(np.argmax(d), d.shape)
        src_axis[w] = j
        d[w, :] = -1
        d[:, j] = -1
    signs = [1 if direction[w, src_axis[w]] >= 0 else -1 for w in range(3)]
    return src_axis, signs


def reorient_canonical(v):
    """Permute/flip voxel axes so the direction is the closest one to identity.

    World positions of all voxels are unchanged; only storage order moves.
    """
    g = v.geometry
    d = g.direction_matrix
    src_axis, signs = _axis_assignment(d)
    if src_axis == [0, 1, 2] and signs == [1, 1, 1]:
        return v
    data = np.transpose(v.data, src_axis)
    flips = tuple(a for a in range(3) if signs[a] < 0)
    if flips:
        data = np.flip(data, axis=flips)
    n = np.asarray(g.dims)
    start = np.zeros(3)
    for a in range(3):
        if signs[a] < 0:
            start[src_axis[a]] = n[src_axis[a]] - 1
    new_dir = np.column_stack([d[:, src_axis[a]] * signs[a] for a in range(3)])
    geom = Geometry(tuple(n[src_axis]), tuple(np.asarray(g.spacing)[src_axis]),
                    g.world_coords(start), new_dir)
    return type(v)(geom, np.ascontiguousarray(data))


def resample(v, target: Geometry, interp: str = "trilinear"):
    """Sample ``v`` on ``target``; out-of-bounds voxels get the type's fill value."""
    if interp not in ("trilinear", "nearest"):
        raise ValueError(f"unknown interpolation {interp!r}")
    if v.is_label and interp == "trilinear":
        raise ValueError("label maps must be resampled with nearest-neighbour interpolation")
    if target == v.geometry:
        return type(v)(target, v.data)
    m = v.geometry.world2vox @ target.vox2world
    pts = grid_coords(target.dims) @ m[:3, :3].T + m[:3, 3]
    if interp == "nearest":
        vals = sample_nearest(v.data, pts, v.fill_value)
    else:
        vals = sample_linear(v.data, pts, v.fill_value)
    return type(v)(target, vals.reshape(target.dims))


def crop_pad_z(v, z_keep: Sequence[int], target_nz: int):
    """Keep slices ``z_keep = (start, stop)`` (half-open) and pad/trim to ``target_nz``.

    Padding is split symmetrically with the odd slice going above (higher
    index); an excess is trimmed the same way. Retained voxels keep their
    world positions.
    """
    start, stop = int(z_keep[0]), int(z_keep[1])
    nz = v.geometry.dims[2]
    if stop <= start:
        raise ValueError(f"empty keep range {z_keep}")
    if start < 0 or stop > nz:
        raise ValueError(f"keep range {z_keep} outside 0..{nz}")
    if target_nz < 1:
        raise ValueError("target_nz must be positive")
    kept = stop - start
    diff = target_nz - kept
    below = diff // 2 if diff >= 0 else -((-diff) // 2)
    first = start - below  # input index of output slice 0
    out = np.full(v.geometry.dims[:2] + (target_nz,), v.fill_value, dtype=v.data.dtype)
    lo = max(start, first)
    hi = min(stop, first + target_nz)
    out[:, :, lo - first:hi - first] = v.data[:, :, lo:hi]
    g = v.geometry
    origin = g.world_coords((0.0, 0.0, float(first)))
    return type(v)(g.replace(dims=g.dims[:2] + (target_nz,), origin=origin), out)


def downsample(v: Volume, factor: int) -> Volume:
    """Block-mean downsampling by an integer factor (edge-replicated remainder)."""
    if factor == 1:
        return v
    g = v.geometry
    n = np.asarray(g.dims)
    m = -(-n // factor)
    pad = [(0, int(mm * factor - nn)) for mm, nn in zip(m, n)]
    arr = np.pad(v.data.astype(np.float64), pad, mode="edge")
    arr = arr.reshape(m[0], factor, m[1], factor, m[2], factor).mean(axis=(1, 3, 5))
    origin = g.world_coords(np.full(3, (factor - 1) / 2.0))
    geom = Geometry(tuple(m), tuple(np.asarray(g.spacing) * factor), origin, g.direction)
    return Volume(geom, arr)


def centered_geometry(template: Geometry, center_world) -> Geometry:
    """``template`` dims/spacing/direction re-placed so its centre sits at ``center_world``."""
    g = template
    m = g.vox2world
    c_idx = (np.asarray(g.dims) - 1) / 2.0
    origin = np.asarray(center_world, dtype=np.float64) - m[:3, :3] @ c_idx
    return g.replace(origin=origin)


def body_mask(v: Volume, threshold: float = -500.0) -> np.ndarray:
    return np.asarray(v.data) > threshold
