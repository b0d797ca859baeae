"""Dense displacement fields: warping, composition, inversion and label transfer.

Fields are stored in voxel units of their own grid and follow the pull-back
convention: the output voxel ``x`` samples the moving image at ``x + u(x)``.
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field

import numpy as np

from ._interp import grid_coords, sample_linear, sample_nearest
from .transform import AffineTransform
from .volume import Geometry, LabelMap

log = logging.getLogger(__name__)

DFLD_MAGIC = b"DFLD"
DFLD_VERSION = 1


@dataclass(frozen=True, eq=False)
class DenseField:
    """Per-voxel displacement (voxels), shape dims + (3,), float32."""

    geometry: Geometry
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float32, order="C", copy=True)
        if arr.shape != self.geometry.dims + (3,):
            raise ValueError(f"field shape {arr.shape} != {self.geometry.dims + (3,)}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("field must be finite")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @classmethod
    def zeros(cls, geometry: Geometry) -> "DenseField":
        return cls(geometry, np.zeros(geometry.dims + (3,), dtype=np.float32))

    def magnitude(self) -> np.ndarray:
        return np.linalg.norm(self.data.astype(np.float64), axis=-1)


def _check_same_grid(u: DenseField, v: DenseField):
    if u.geometry.dims != v.geometry.dims:
        raise ValueError(f"field grids differ: {u.geometry.dims} vs {v.geometry.dims}")


def warp_volume(moving, field: DenseField | None = None, affine: AffineTransform | None = None,
                interp: str | None = None, geometry: Geometry | None = None):
    """Pull-back warp: ``out(x) = moving(A(x + u(x)))`` on the field's grid.

    Parameters
    ----------
    moving : Volume or LabelMap
    field : DenseField, optional
        Displacement on the output grid; zero when omitted (then ``geometry``
        gives the output grid).
    affine : AffineTransform, optional
        World-mm map from output space into moving space; identity by default.
    interp : {"trilinear", "nearest"}, optional
        Defaults to trilinear for volumes and nearest for label maps.
    """
    if interp is None:
        interp = "nearest" if moving.is_label else "trilinear"
    if moving.is_label and interp != "nearest":
        raise ValueError("label maps must be warped with nearest-neighbour interpolation")
    if interp not in ("trilinear", "nearest"):
        raise ValueError(f"unknown interpolation {interp!r}")
    if field is None and geometry is None:
        raise ValueError("need a field or an output geometry")
    out_geom = field.geometry if field is not None else geometry
    if geometry is not None and field is not None and geometry.dims != field.geometry.dims:
        raise ValueError("field geometry must equal output geometry")
    a = np.eye(4) if affine is None else affine.matrix
    m = moving.geometry.world2vox @ a @ out_geom.vox2world
    pts = grid_coords(out_geom.dims)
    if field is not None:
        pts += field.data.reshape(-1, 3)
    pts = pts @ m[:3, :3].T + m[:3, 3]
    if interp == "nearest":
        vals = sample_nearest(moving.data, pts, moving.fill_value)
    else:
        vals = sample_linear(moving.data, pts, moving.fill_value)
    return type(moving)(out_geom, vals.reshape(out_geom.dims))


def sample_field(u: DenseField, coords) -> np.ndarray:
    """Trilinear field samples at voxel coordinates, edge-clamped, float64 (N, 3)."""
    return sample_linear(u.data, coords, clamp=True)


def _compose_arrays(u: DenseField, v: np.ndarray) -> np.ndarray:
    pts = grid_coords(u.geometry.dims) + v.reshape(-1, 3)
    return v.reshape(-1, 3) + sample_field(u, pts)


def compose(u: DenseField, v: DenseField) -> DenseField:
    """``(u o v)(x) = v(x) + u(x + v(x))`` with ``u`` sampled trilinearly.

    Warping by the result equals warping by ``u`` first and then by ``v``:
    ``warp(img, compose(u, v)) == warp(warp(img, u), v)``.
    """
    _check_same_grid(u, v)
    out = _compose_arrays(u, v.data.astype(np.float64))
    return DenseField(v.geometry, out.reshape(v.data.shape))


@dataclass(frozen=True, eq=False)
class Inversion:
    field: DenseField
    converged: bool
    iterations: int
    residual_mean: float
    residual_max: float
    history: tuple = ()


def invert_field(u: DenseField, max_iter: int = 30, tol: float = 0.01) -> Inversion:
    """Fixed-point inverse ``v <- -u(x + v(x))`` starting from zero.

    Stops once the largest per-voxel update drops below ``tol`` voxels.
    Non-convergence (iteration budget or a growing update) is flagged in the
    result rather than raised.
    """
    dims = u.geometry.dims
    base = grid_coords(dims)
    v = np.zeros((base.shape[0], 3))
    history = []
    converged = False
    growing = 0
    prev_update = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        v_new = -sample_field(u, base + v)
        step = np.linalg.norm(v_new - v, axis=1)
        # the residual of compose(u, v) at the old iterate equals the update
        history.append(float(step.mean()))
        v = v_new
        update = float(step.max())
        if update < tol:
            converged = True
            break
        growing = growing + 1 if update > prev_update else 0
        prev_update = update
        if growing >= 3:
            break
    res = np.linalg.norm(v + sample_field(u, base + v), axis=1)
    if not converged:
        log.warning("field inversion did not converge after %d iterations (max residual %.3g)",
                    it, res.max())
    return Inversion(DenseField(u.geometry, v.reshape(dims + (3,))), converged, it,
                     float(res.mean()), float(res.max()), tuple(history))


def transfer_labels(atlas_label: LabelMap, affine: AffineTransform, field: DenseField,
                    subject_geometry: Geometry, inverse: DenseField | None = None) -> LabelMap:
    """Map atlas labels into subject space through the inverted registration.

    ``affine`` maps atlas world to subject world and ``field`` lives on the
    atlas grid, as produced by the forward (subject-to-atlas) registration.
    Each subject voxel ``y`` receives the atlas label at ``z + v(z)`` with
    ``z = A^-1(y)`` in atlas voxels and ``v`` the inverse field.
    """
    if field.geometry.dims != atlas_label.geometry.dims:
        raise ValueError("field grid must match the atlas label grid")
    if inverse is None:
        inverse = invert_field(field).field
    m = atlas_label.geometry.world2vox @ affine.inverse().matrix @ subject_geometry.vox2world
    z = grid_coords(subject_geometry.dims) @ m[:3, :3].T + m[:3, 3]
    x = z + sample_field(inverse, z)
    vals = sample_nearest(atlas_label.data, x, 0)
    return LabelMap(subject_geometry, vals.reshape(subject_geometry.dims))


def write_dfld(u: DenseField, path) -> None:
    """Binary field file: magic, version, dims, spacing, x-fastest float32 triples."""
    head = DFLD_MAGIC + struct.pack("<I3I3f", DFLD_VERSION, *u.geometry.dims, *u.geometry.spacing)
    body = np.ascontiguousarray(u.data.astype("<f4").transpose(2, 1, 0, 3)).tobytes()
    with open(path, "wb") as fh:
        fh.write(head + body)


def read_dfld(path, geometry: Geometry | None = None) -> DenseField:
    """Read a DFLD file; ``geometry`` (same dims) restores origin and direction."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != DFLD_MAGIC:
        raise ValueError(f"bad field magic {raw[:4]!r}")
    version, nx, ny, nz, sx, sy, sz = struct.unpack_from("<I3I3f", raw, 4)
    if version != DFLD_VERSION:
        raise ValueError(f"unsupported field version {version}")
    count = nx * ny * nz * 3
    if len(raw) < 32 + 4 * count:
        raise ValueError("truncated field payload")
    arr = np.frombuffer(raw, dtype="<f4", count=count, offset=32)
    data = arr.reshape(nz, ny, nx, 3).transpose(2, 1, 0, 3)
    if geometry is None:
        geometry = Geometry((nx, ny, nz), (sx, sy, sz))
    elif geometry.dims != (nx, ny, nz):
        raise ValueError("geometry dims do not match field file")
    return DenseField(geometry, data)
