import json

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.stats import spearmanr

from ctatlas.phantom import PhantomParams, generate_phantom
from ctatlas.voi import (DEFAULT_WINDOW, FileScorer, LinearScorer, compute_slice_features, crop_to_window,
                         crop_window_indices, default_scorer, fit_linear_correction, fit_scorer,
                         score_slices, slice_body_mask)
from ctatlas.volume import Volume


def test_empty_slice_has_zero_area():
    f = compute_slice_features(Volume.from_array(np.full((8, 8, 2), -1024.0)))
    assert np.all(f == 0)


def test_square_area_and_largest_component():
    data = np.full((30, 30, 1), -1024.0)
    data[2:12, 2:12, 0] = 0.0
    v = Volume.from_array(data, spacing=(2.0, 2.0, 1.0))
    assert compute_slice_features(v)[0, 0] == 400.0
    data[20:23, 20:23, 0] = 500.0  # smaller bright blob is ignored
    f = compute_slice_features(Volume.from_array(data, spacing=(2.0, 2.0, 1.0)))
    assert f[0, 0] == 400.0 and f[0, 3] == 0.0


def test_body_mask_fills_holes():
    sl = np.full((12, 12), -1024.0)
    sl[2:10, 2:10] = 0.0
    sl[5:7, 5:7] = -1000.0  # enclosed air (bowel gas)
    assert slice_body_mask(sl).sum() == 64


def test_file_scorer_passthrough(tmp_path):
    p = tmp_path / "s.scores.json"
    p.write_text(json.dumps([-6, -2, 0, 3]))
    sc = FileScorer.from_path(p)
    np.testing.assert_array_equal(sc(np.zeros((4, 5))), [-6, -2, 0, 3])
    with pytest.raises(ValueError):
        sc(np.zeros((3, 5)))
    assert FileScorer.sidecar_path("a/b.nii.gz") == "a/b.scores.json"


def test_zero_weight_scorer_returns_bias():
    sc = LinearScorer(np.zeros(5), bias=1.5)
    np.testing.assert_array_equal(sc(np.random.default_rng(0).normal(size=(7, 5))), 1.5)
    with pytest.raises(ValueError):
        LinearScorer(None)(np.zeros((2, 5)))
    with pytest.raises(ValueError):
        LinearScorer.from_dict({"bias": 1.0})


def test_scores_are_clamped():
    sc = LinearScorer(np.array([100.0]), 0.0, np.zeros(1), np.ones(1))
    np.testing.assert_array_equal(score_slices(np.array([[-1.0], [0.05], [1.0]]), sc), [-12, 5, 12])


def test_fit_recovers_exact_linear_weight(rng):
    f = rng.normal(size=(50, 5))
    y = 3.0 * f[:, 2] - 1.0
    sc = fit_scorer(f, y, ridge=0.0)
    np.testing.assert_allclose(sc.weights / sc.scale, [0, 0, 3.0, 0, 0], atol=1e-6)
    np.testing.assert_allclose(sc(f), y, atol=1e-6)


def test_fit_three_samples_by_hand():
    x = np.array([[0.0], [1.0], [3.0]])
    y = np.array([1.0, 2.0, 5.0])
    # mean x = 4/3, mean y = 8/3; Sxy = 20/9 + 2/9 + 35/9 = 57/9; Sxx = 16/9 + 1/9 + 25/9 = 42/9
    slope, intercept = 19 / 14, 6 / 7
    sc = fit_scorer(x, y, ridge=0.0)
    np.testing.assert_allclose(sc(np.array([[0.0], [1.0]])), [intercept, intercept + slope], atol=1e-12)


def test_fit_beats_single_features(rng):
    f = rng.normal(size=(80, 5))
    y = f @ rng.normal(size=5) + rng.normal(size=80) * 0.5
    rms = np.sqrt(np.mean((fit_scorer(f, y)(f) - y) ** 2))
    for c in range(5):
        single = fit_scorer(f[:, [c]], y)
        assert rms <= np.sqrt(np.mean((single(f[:, [c]]) - y) ** 2)) + 1e-12


def test_fit_rejects_degenerate():
    with pytest.raises(ValueError):
        fit_scorer(np.ones((10, 3)), np.arange(10.0))
    with pytest.raises(ValueError):
        fit_scorer(np.ones((1, 3)), [1.0])


@pytest.mark.parametrize("seed,phase,flip", [(501, "portal_venous", False), (502, "non_contrast", False),
                                             (503, "early_arterial", True), (504, "delayed", False)])
def test_default_scorer_orders_slices(seed, phase, flip):
    vol, _, truth = generate_phantom(PhantomParams(seed=seed, phase=phase, flip_z=flip))
    raw = score_slices(compute_slice_features(vol), default_scorer())
    assert spearmanr(raw, truth)[0] > 0.95


def test_linear_correction_examples():
    z = np.arange(20.0)
    s = fit_linear_correction(0.5 * z - 5)
    assert s.slope == pytest.approx(0.5, abs=1e-9) and s.intercept == pytest.approx(-5, abs=1e-9)
    s = fit_linear_correction([0.0, 1.0, 5.0])
    assert s.slope == pytest.approx(2.5) and s.intercept == pytest.approx(-0.5)
    with pytest.raises(ValueError):
        fit_linear_correction([1.0])
    with pytest.raises(ValueError):
        fit_linear_correction([2.0, 2.0, 2.0])


@given(st.lists(st.floats(-10, 10), min_size=3, max_size=30), st.floats(-5, 5))
def test_constant_offset_moves_intercept_only(scores, c):
    s = np.asarray(scores)
    if np.ptp(s) < 1e-3:
        return
    try:
        a = fit_linear_correction(s)
    except ValueError:
        return
    b = fit_linear_correction(s + c)
    assert b.slope == pytest.approx(a.slope, abs=1e-9)
    assert b.intercept == pytest.approx(a.intercept + c, abs=1e-9)


def test_crop_window_examples():
    z = np.arange(121.0)
    assert crop_window_indices(0.1 * z - 6) == (10, 110)
    assert crop_window_indices(0.01 * z - 0.5) == (0, 120)
    assert DEFAULT_WINDOW == (-5.0, 5.0)
    with pytest.raises(ValueError):
        crop_window_indices(0.01 * z + 20)


def test_crop_to_window(rng):
    vol = Volume.from_array(rng.normal(size=(4, 4, 121)))
    series = fit_linear_correction(0.1 * np.arange(121.0) - 6)
    out = crop_to_window(vol, series)
    assert out.geometry.dims == (4, 4, 101)
    np.testing.assert_array_equal(out.data, vol.data[:, :, 10:111])
    with pytest.raises(ValueError):
        crop_to_window(vol, series, window=(-0.05, 0.05))
