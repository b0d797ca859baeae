import json

import numpy as np
import pytest

from ctatlas.nifti import read_nifti
from ctatlas.phantom import (LABELS, PHASE_HU, PhantomParams, apply_synthetic_warp, cohort_params,
                             generate_phantom, jacobian_determinant, kidney_volume_cc, make_atlas_target,
                             sinusoid_field, write_cohort)


def test_labels_and_kidney_centre(phantom):
    vol, lab, scores = phantom
    assert LABELS["right_kidney"] == 2 and LABELS["left_kidney"] == 3
    assert lab.labels() <= set(range(14))
    from ctatlas.phantom import _draw_anatomy
    an = _draw_anatomy(PhantomParams(seed=5))
    c = an.kidneys["right_kidney"][0]
    idx = np.rint(vol.geometry.world2vox[:3, :3] @ c + vol.geometry.world2vox[:3, 3]).astype(int)
    assert lab.data[tuple(idx)] == 2
    assert len(scores) == vol.geometry.dims[2]
    assert np.all(np.diff(scores) <= 0) and np.abs(scores).max() <= 12


@pytest.mark.parametrize("cc", [100.0, 200.0, 308.0])
def test_kidney_volume_matches_request(cc):
    _, lab, _ = generate_phantom(PhantomParams(seed=3, kidney_volume_cc=cc))
    for organ in (2, 3):
        assert abs(kidney_volume_cc(lab, organ) / cc - 1) < 0.05


def test_same_seed_is_bit_identical():
    a = generate_phantom(PhantomParams(seed=9))
    b = generate_phantom(PhantomParams(seed=9))
    assert a[0].data.tobytes() == b[0].data.tobytes()
    assert a[1].data.tobytes() == b[1].data.tobytes()
    assert not np.array_equal(a[0].data, generate_phantom(PhantomParams(seed=10))[0].data)


def test_flipped_phantom_is_same_anatomy():
    a = generate_phantom(PhantomParams(seed=4, noise_sigma=0.0))
    b = generate_phantom(PhantomParams(seed=4, noise_sigma=0.0, flip_z=True))
    np.testing.assert_array_equal(a[1].data, b[1].data[:, :, ::-1])
    np.testing.assert_allclose(a[2], b[2][::-1], atol=1e-12)


def test_phase_presets_and_validation():
    assert PHASE_HU["early_arterial"]["cortex"] > PHASE_HU["non_contrast"]["cortex"]
    with pytest.raises(ValueError):
        PhantomParams(kidney_volume_cc=10.0)
    with pytest.raises(ValueError):
        PhantomParams(phase="venous")


def test_sinusoid_field_properties(atlas_target):
    g = atlas_target[0].geometry
    u = sinusoid_field(g, 4.0, 32.0)
    assert u.magnitude().max() == pytest.approx(4.0, abs=1e-6)
    v, l, z = apply_synthetic_warp(atlas_target[0], atlas_target[1], 0.0)
    assert not z.data.any()
    np.testing.assert_array_equal(v.data, atlas_target[0].data)
    with pytest.raises(ValueError):
        apply_synthetic_warp(atlas_target[0], None, 7.0)
    with pytest.raises(ValueError):
        apply_synthetic_warp(atlas_target[0], None, 4.0, 20.0)


@pytest.mark.parametrize("amp", [1.0, 3.0, 6.0])
def test_compliant_warps_do_not_fold(atlas_target, amp):
    for ratio in (8.0, 12.0):
        u = sinusoid_field(atlas_target[0].geometry, amp, amp * ratio, direction=(1.0, -2.0, 0.5))
        assert jacobian_determinant(u).min() > 0


def test_atlas_target_layout(atlas_target):
    vol, lab = atlas_target
    assert vol.geometry.dims == (96, 96, 96) and vol.geometry.spacing == (2.75,) * 3
    assert {2, 3} <= lab.labels()


def test_cohort_params_span_and_determinism():
    a = cohort_params(20, seed=3)
    assert [s.id for s in a] == [f"sub{i:03d}" for i in range(20)]
    cc = [s.params.kidney_volume_cc for s in a]
    assert min(cc) >= 100 and max(cc) <= 308
    assert [s.params for s in a] == [s.params for s in cohort_params(20, seed=3)]


def test_write_cohort(tmp_path):
    m = write_cohort(tmp_path, 2, seed=1, phases=("portal_venous", "delayed"), flip_every=2)
    man = json.loads(open(m).read())
    assert [s["phase"] for s in man["subjects"]] == ["portal_venous", "delayed"]
    for s in man["subjects"]:
        v = read_nifti(tmp_path / s["volume"])
        scores = json.loads((tmp_path / s["scores"]).read_text())
        assert len(scores) == v.geometry.dims[2]
    assert read_nifti(tmp_path / man["atlas"]).geometry.dims == (96, 96, 96)
    assert make_atlas_target(seed=1000)[0].data.shape == (96, 96, 96)
