"""Minimal NIfTI-1 single-file (.nii / .nii.gz) reader and writer.

Only 3D little-endian files are handled. Supported datatypes are uint8 (2),
int16 (4), int32 (8), float32 (16) and float64 (64).
"""
from __future__ import annotations

import gzip
import io
import os
import struct

import numpy as np

from .volume import MAX_LABEL, Geometry, LabelMap, Volume

HEADER_SIZE = 348
VOX_OFFSET = 352
MAGIC = b"n+1\x00"

DTYPES = {
    2: np.dtype("<u1"),
    4: np.dtype("<i2"),
    8: np.dtype("<i4"),
    16: np.dtype("<f4"),
    64: np.dtype("<f8"),
}
DTYPE_CODES = {v: k for k, v in DTYPES.items()}


class NiftiError(ValueError):
    """Malformed or unsupported NIfTI file."""


def _open(path, mode):
    path = os.fspath(path)
    if path.endswith(".gz"):
        return gzip.open(path, mode)
    return open(path, mode)


def _quaternion_to_matrix(b, c, d, qfac):
    a = np.sqrt(max(0.0, 1.0 - (b * b + c * c + d * d)))
    r = np.array([
        [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
        [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
        [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - c * c - b * b],
    ])
    if qfac < 0:
        r[:, 2] = -r[:, 2]
    return r


def _matrix_to_quaternion(r):
    """Inverse of ``_quaternion_to_matrix`` for an orthonormal ``r``."""
    r = np.array(r, dtype=np.float64)
    qfac = 1.0
    if np.linalg.det(r) < 0:
        qfac = -1.0
        r[:, 2] = -r[:, 2]
    tr = np.trace(r)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        a, b = 0.25 * s, (r[2, 1] - r[1, 2]) / s
        c, d = (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s
    elif r[0, 0] > r[1, 1] and r[0, 0] > r[2, 2]:
        s = 2.0 * np.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2])
        a, b = (r[2, 1] - r[1, 2]) / s, 0.25 * s
        c, d = (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s
    elif r[1, 1] > r[2, 2]:
        s = 2.0 * np.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2])
        a, b = (r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s
        c, d = 0.25 * s, (r[1, 2] + r[2, 1]) / s
    else:
        s = 2.0 * np.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1])
        a, b = (r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s
        c, d = (r[1, 2] + r[2, 1]) / s, 0.25 * s
    if a < 0:
        b, c, d = -b, -c, -d
    return b, c, d, qfac


def _orthonormalize(m):
    u, _, vt = np.linalg.svd(m)
    return u @ vt


def parse_header(raw: bytes) -> dict:
    if len(raw) < HEADER_SIZE:
        raise NiftiError("truncated header")
    (sizeof_hdr,) = struct.unpack_from("<i", raw, 0)
    if sizeof_hdr != HEADER_SIZE:
        raise NiftiError(f"bad sizeof_hdr {sizeof_hdr} (big-endian or not NIfTI-1)")
    if raw[344:348] != MAGIC:
        raise NiftiError(f"bad magic {raw[344:348]!r}")
    dim = struct.unpack_from("<8h", raw, 40)
    datatype, bitpix = struct.unpack_from("<2h", raw, 70)
    pixdim = struct.unpack_from("<8f", raw, 76)
    vox_offset, scl_slope, scl_inter = struct.unpack_from("<3f", raw, 108)
    qform_code, sform_code = struct.unpack_from("<2h", raw, 252)
    quat = struct.unpack_from("<6f", raw, 256)
    srow = np.array(struct.unpack_from("<12f", raw, 280), dtype=np.float64).reshape(3, 4)
    return dict(dim=dim, datatype=datatype, bitpix=bitpix, pixdim=pixdim,
                vox_offset=vox_offset, scl_slope=scl_slope, scl_inter=scl_inter,
                qform_code=qform_code, sform_code=sform_code, quat=quat, srow=srow)


def header_geometry(h: dict) -> Geometry:
    dims = tuple(int(x) for x in h["dim"][1:4])
    pixdim = np.abs(np.asarray(h["pixdim"][1:4], dtype=np.float64))
    pixdim[pixdim == 0] = 1.0
    if h["sform_code"] > 0:
        m = h["srow"][:, :3]
        spacing = np.linalg.norm(m, axis=0)
        if np.any(spacing == 0):
            raise NiftiError("singular sform")
        direction = _orthonormalize(m / spacing)
        origin = h["srow"][:, 3]
    elif h["qform_code"] > 0:
        b, c, d, qx, qy, qz = h["quat"]
        qfac = -1.0 if h["pixdim"][0] < 0 else 1.0
        direction = _quaternion_to_matrix(b, c, d, qfac)
        spacing = pixdim
        origin = np.array([qx, qy, qz])
    else:
        direction = np.eye(3)
        spacing = pixdim
        origin = np.zeros(3)
    return Geometry(dims, spacing, origin, direction)


def read_nifti(path, kind: str | None = None):
    """Read a NIfTI-1 file as a :class:`Volume` or :class:`LabelMap`.

    ``kind`` may be ``"volume"`` or ``"label"``; by default integer files
    without scaling whose values all fall in 0..13 are read as label maps.
    """
    with _open(path, "rb") as fh:
        raw = fh.read()
    h = parse_header(raw)
    if h["dim"][0] != 3:
        raise NiftiError(f"only 3D images are supported (dim[0]={h['dim'][0]})")
    if h["datatype"] not in DTYPES:
        raise NiftiError(f"unsupported datatype code {h['datatype']}")
    dt = DTYPES[h["datatype"]]
    geom = header_geometry(h)
    offset = int(h["vox_offset"]) if h["vox_offset"] >= HEADER_SIZE else VOX_OFFSET
    count = geom.n_voxels
    if len(raw) < offset + count * dt.itemsize:
        raise NiftiError("truncated payload")
    flat = np.frombuffer(raw, dtype=dt, count=count, offset=offset)
    data = flat.reshape(geom.dims, order="F")
    slope, inter = float(h["scl_slope"]), float(h["scl_inter"])
    scaled = not (slope in (0.0, 1.0) and inter == 0.0)
    if scaled:
        data = data.astype(np.float64) * (slope if slope != 0.0 else 1.0) + inter
    if kind is None:
        is_int = dt.kind in "iu" and not scaled
        kind = "label" if is_int and data.size and data.min() >= 0 and data.max() <= MAX_LABEL else "volume"
    if kind == "label":
        return LabelMap(geom, data)
    if kind == "volume":
        return Volume(geom, data)
    raise ValueError(f"unknown kind {kind!r}")


def build_header(geom: Geometry, dtype: np.dtype) -> bytes:
    code = DTYPE_CODES[np.dtype(dtype).newbyteorder("<")]
    hdr = bytearray(VOX_OFFSET)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    struct.pack_into("<c", hdr, 38, b"r")
    struct.pack_into("<8h", hdr, 40, 3, *geom.dims, 1, 1, 1, 1)
    struct.pack_into("<2h", hdr, 70, code, np.dtype(dtype).itemsize * 8)
    direction = geom.direction_matrix
    b, c, d, qfac = _matrix_to_quaternion(direction)
    struct.pack_into("<8f", hdr, 76, qfac, *geom.spacing, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<3f", hdr, 108, float(VOX_OFFSET), 1.0, 0.0)
    struct.pack_into("<B", hdr, 123, 2)  # xyzt_units: mm
    struct.pack_into("<2h", hdr, 252, 1, 2)  # qform scanner, sform aligned
    struct.pack_into("<6f", hdr, 256, b, c, d, *geom.origin)
    m = geom.vox2world
    for r in range(3):
        struct.pack_into("<4f", hdr, 280 + 16 * r, *m[r])
    hdr[344:348] = MAGIC
    return bytes(hdr)


def write_nifti(v, path) -> None:
    """Write float32 (volumes) or int16 (label maps) with sform and qform set."""
    dtype = np.dtype("<i2") if v.is_label else np.dtype("<f4")
    payload = np.asarray(v.data).astype(dtype).tobytes(order="F")
    blob = build_header(v.geometry, dtype) + payload
    path = os.fspath(path)
    if path.endswith(".gz"):
        buf = io.BytesIO()
        with gzip.GzipFile(fileobj=buf, mode="wb", mtime=0) as gz:
            gz.write(blob)
        blob = buf.getvalue()
    with open(path, "wb") as fh:
        fh.write(blob)
