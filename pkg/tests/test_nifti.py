import gzip
import struct

import numpy as np
import pytest

from ctatlas.nifti import NiftiError, build_header, read_nifti, write_nifti
from ctatlas.transform import rotation_matrix
from ctatlas.volume import Geometry, LabelMap, Volume


def _geom():
    return Geometry((3, 4, 5), (0.8, 1.25, 2.5), (-12.5, 40.0, 3.75), rotation_matrix((5, -10, 25)))


@pytest.mark.parametrize("suffix", [".nii", ".nii.gz"])
def test_volume_roundtrip(tmp_path, rng, suffix):
    v = Volume(_geom(), rng.normal(size=(3, 4, 5)).astype(np.float32) * 100)
    p = tmp_path / f"v{suffix}"
    write_nifti(v, p)
    w = read_nifti(p)
    assert isinstance(w, Volume)
    np.testing.assert_array_equal(w.data, v.data)
    assert w.geometry.dims == v.geometry.dims
    np.testing.assert_allclose(w.geometry.corners(), v.geometry.corners(), atol=1e-5)


def test_label_roundtrip_keeps_13(tmp_path):
    lab = LabelMap(_geom(), np.arange(60).reshape(3, 4, 5) % 14)
    write_nifti(lab, tmp_path / "l.nii")
    back = read_nifti(tmp_path / "l.nii")
    assert isinstance(back, LabelMap)
    np.testing.assert_array_equal(back.data, lab.data)
    assert 13 in back.labels()


def test_header_constants(tmp_path):
    write_nifti(Volume.from_array(np.zeros((2, 2, 2))), tmp_path / "z.nii")
    raw = (tmp_path / "z.nii").read_bytes()
    assert raw[0:4] == struct.pack("<i", 348)
    assert raw[344:348] == b"n+1\x00"
    assert struct.unpack_from("<h", raw, 70)[0] == 16
    assert struct.unpack_from("<h", raw, 254)[0] > 0  # sform set


def _handmade(datatype, payload, dim0=3, magic=b"n+1\x00", pixdim=(1.0, 2.0, 3.0),
              slope=0.0, inter=0.0, sform=False):
    hdr = bytearray(352)
    struct.pack_into("<i", hdr, 0, 348)
    struct.pack_into("<8h", hdr, 40, dim0, 2, 2, 2, 1, 1, 1, 1)
    struct.pack_into("<2h", hdr, 70, datatype, 32)
    struct.pack_into("<8f", hdr, 76, 1.0, *pixdim, 0, 0, 0, 0)
    struct.pack_into("<3f", hdr, 108, 352.0, slope, inter)
    if sform:
        struct.pack_into("<2h", hdr, 252, 0, 1)
        struct.pack_into("<12f", hdr, 280, -2, 0, 0, 10, 0, 3, 0, 20, 0, 0, 4, 30)
    hdr[344:348] = magic
    return bytes(hdr) + payload


def test_handmade_file_is_x_fastest(tmp_path):
    values = np.arange(8, dtype="<f4")  # file order: x fastest
    (tmp_path / "h.nii").write_bytes(_handmade(16, values.tobytes()))
    v = read_nifti(tmp_path / "h.nii")
    for k in range(2):
        for j in range(2):
            for i in range(2):
                assert v.data[i, j, k] == i + 2 * j + 4 * k
    assert v.geometry.spacing == (1.0, 2.0, 3.0)
    np.testing.assert_allclose(v.geometry.direction_matrix, np.eye(3))


def test_sform_preferred(tmp_path):
    (tmp_path / "s.nii").write_bytes(_handmade(16, np.zeros(8, "<f4").tobytes(), sform=True))
    g = read_nifti(tmp_path / "s.nii").geometry
    assert g.spacing == (2.0, 3.0, 4.0)
    np.testing.assert_allclose(g.direction_matrix, np.diag([-1.0, 1.0, 1.0]))
    np.testing.assert_allclose(g.origin, (10, 20, 30))


def test_scaling_applied_and_zero_slope_is_one(tmp_path):
    (tmp_path / "a.nii").write_bytes(_handmade(4, np.arange(8, dtype="<i2").tobytes(), slope=2.0, inter=-1.0))
    v = read_nifti(tmp_path / "a.nii")
    assert isinstance(v, Volume)
    np.testing.assert_array_equal(v.data.ravel(order="F"), 2 * np.arange(8) - 1)
    (tmp_path / "b.nii").write_bytes(_handmade(4, np.arange(8, dtype="<i2").tobytes(), slope=0.0))
    np.testing.assert_array_equal(read_nifti(tmp_path / "b.nii", kind="volume").data.ravel(order="F"), np.arange(8))


@pytest.mark.parametrize("code,itemsize", [(2, 1), (4, 2), (8, 4), (16, 4), (64, 8)])
def test_supported_datatypes(tmp_path, code, itemsize):
    dt = {2: "<u1", 4: "<i2", 8: "<i4", 16: "<f4", 64: "<f8"}[code]
    (tmp_path / "d.nii").write_bytes(_handmade(code, np.arange(8, dtype=dt).tobytes()))
    v = read_nifti(tmp_path / "d.nii", kind="volume")
    np.testing.assert_array_equal(v.data.ravel(order="F"), np.arange(8))


def test_errors(tmp_path):
    payload = np.zeros(8, "<f4").tobytes()
    cases = {
        "rgb.nii": _handmade(128, payload),
        "magic.nii": _handmade(16, payload, magic=b"ni1\x00"),
        "dim4.nii": _handmade(16, payload, dim0=4),
        "short.nii": _handmade(16, payload[:20]),
    }
    for name, blob in cases.items():
        (tmp_path / name).write_bytes(blob)
        with pytest.raises(NiftiError):
            read_nifti(tmp_path / name)


def test_gzip_output_is_deterministic(tmp_path):
    v = Volume.from_array(np.ones((2, 3, 4)))
    write_nifti(v, tmp_path / "a.nii.gz")
    write_nifti(v, tmp_path / "b.nii.gz")
    assert (tmp_path / "a.nii.gz").read_bytes() == (tmp_path / "b.nii.gz").read_bytes()
    assert gzip.decompress((tmp_path / "a.nii.gz").read_bytes())[:4] == struct.pack("<i", 348)


def test_header_length():
    assert len(build_header(_geom(), np.dtype("<f4"))) == 352
