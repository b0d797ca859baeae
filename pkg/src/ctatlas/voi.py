"""Per-slice body-coordinate scores, their linear correction and the VOI crop."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .volume import Volume, crop_pad_z

BODY_HU = -500.0
AIR_HU = -300.0
BONE_HU = 200.0
SCORE_RANGE = (-12.0, 12.0)
MIN_SLICES = 16
DEFAULT_WINDOW = (-5.0, 5.0)
FEATURE_NAMES = ("area_mm2", "mean_hu", "air_fraction", "bone_fraction", "centroid_offset_mm")

_FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)


def slice_body_mask(sl: np.ndarray, threshold: float = BODY_HU) -> np.ndarray:
    """Largest 4-connected component above ``threshold`` with its holes filled."""
    lab, n = ndimage.label(sl > threshold, structure=_FOUR_CONNECTED)
    if n == 0:
        return np.zeros(sl.shape, dtype=bool)
    sizes = np.bincount(lab.ravel())[1:]
    # ties go to the lowest component id, i.e. the first in raster order
    mask = lab == (int(np.argmax(sizes)) + 1)
    return ndimage.binary_fill_holes(mask, structure=_FOUR_CONNECTED)


def _slice_features(sl: np.ndarray, sx: float, sy: float) -> np.ndarray:
    mask = slice_body_mask(sl)
    n = int(mask.sum())
    if n == 0:
        return np.zeros(len(FEATURE_NAMES))
    vals = sl[mask].astype(np.float64)
    ii, jj = np.nonzero(mask)
    cx = (ii.mean() - (sl.shape[0] - 1) / 2.0) * sx
    cy = (jj.mean() - (sl.shape[1] - 1) / 2.0) * sy
    return np.array([n * sx * sy, vals.mean(), np.mean(vals < AIR_HU), np.mean(vals > BONE_HU),
                     float(np.hypot(cx, cy))])


def compute_slice_features(v: Volume) -> np.ndarray:
    """Feature matrix of shape (nz, 5), one row per axial slice.

    Columns follow ``FEATURE_NAMES``. Fractions are taken over the body mask,
    the centroid offset is the in-plane distance of the mask centroid from the
    centre of the slice, and a slice without body gives a zero row.
    """
    sx, sy, _ = v.geometry.spacing
    return np.stack([_slice_features(v.data[:, :, k], sx, sy) for k in range(v.geometry.dims[2])])


class FileScorer:
    """Scores read from a JSON array sidecar, one number per slice."""

    def __init__(self, scores):
        self.scores = np.asarray(scores, dtype=np.float64).ravel()

    @classmethod
    def from_path(cls, path) -> "FileScorer":
        with open(path) as fh:
            data = json.load(fh)
        if not isinstance(data, list):
            raise ValueError("score sidecar must be a JSON array")
        return cls(data)

    @staticmethod
    def sidecar_path(volume_path) -> str:
        base = os.fspath(volume_path)
        for ext in (".nii.gz", ".nii"):
            if base.endswith(ext):
                base = base[: -len(ext)]
                break
        return base + ".scores.json"

    def __call__(self, features: np.ndarray) -> np.ndarray:
        if len(self.scores) != len(features):
            raise ValueError(f"sidecar holds {len(self.scores)} scores for {len(features)} slices")
        return self.scores.copy()


@dataclass
class LinearScorer:
    """``score = w . (f - mean) / scale + bias`` on standardised features."""

    weights: np.ndarray | None
    bias: float = 0.0
    mean: np.ndarray = field(default_factory=lambda: np.zeros(len(FEATURE_NAMES)))
    scale: np.ndarray = field(default_factory=lambda: np.ones(len(FEATURE_NAMES)))

    def __call__(self, features: np.ndarray) -> np.ndarray:
        if self.weights is None:
            raise ValueError("linear scorer has no weights")
        f = np.atleast_2d(np.asarray(features, dtype=np.float64))
        w = np.asarray(self.weights, dtype=np.float64)
        if w.shape != (f.shape[1],):
            raise ValueError(f"expected {f.shape[1]} weights, got {w.shape}")
        return ((f - self.mean) / self.scale) @ w + self.bias

    def to_dict(self) -> dict:
        return {"weights": [float(x) for x in self.weights], "bias": float(self.bias),
                "mean": [float(x) for x in self.mean], "scale": [float(x) for x in self.scale]}

    @classmethod
    def from_dict(cls, d) -> "LinearScorer":
        if "weights" not in d:
            raise ValueError("missing scorer weights")
        w = np.asarray(d["weights"], dtype=np.float64)
        return cls(w, float(d.get("bias", 0.0)), np.asarray(d.get("mean", np.zeros(len(w)))),
                   np.asarray(d.get("scale", np.ones(len(w)))))


def default_scorer() -> LinearScorer:
    """Linear scorer shipped with the package (fit on phantom subjects)."""
    path = os.path.join(os.path.dirname(__file__), "data", "scorer_weights.json")
    with open(path) as fh:
        return LinearScorer.from_dict(json.load(fh))


def score_slices(features: np.ndarray, scorer) -> np.ndarray:
    """Raw per-slice scores from either scorer, clamped to [-12, 12]."""
    return np.clip(np.asarray(scorer(features), dtype=np.float64), *SCORE_RANGE)


def fit_scorer(features, true_scores, ridge: float = 1e-6) -> LinearScorer:
    """Least-squares linear scorer on standardised features.

    Solves the normal equations with a small ridge on the weights (not the
    bias). Constant feature columns get scale 1 and contribute nothing.
    """
    f = np.atleast_2d(np.asarray(features, dtype=np.float64))
    y = np.asarray(true_scores, dtype=np.float64).ravel()
    if f.shape[0] != y.shape[0]:
        raise ValueError("feature and target counts differ")
    if f.shape[0] < 2 or np.all(np.ptp(f, axis=0) == 0):
        raise ValueError("degenerate feature matrix: need >= 2 distinct samples")
    mean = f.mean(axis=0)
    scale = f.std(axis=0)
    scale[scale == 0] = 1.0
    x = np.hstack([(f - mean) / scale, np.ones((len(f), 1))])
    reg = ridge * np.eye(x.shape[1])
    reg[-1, -1] = 0.0
    sol = np.linalg.solve(x.T @ x + reg, x.T @ y)
    return LinearScorer(sol[:-1], float(sol[-1]), mean, scale)


@dataclass(frozen=True, eq=False)
class SliceScoreSeries:
    raw: np.ndarray
    slope: float
    intercept: float

    @property
    def fitted(self) -> np.ndarray:
        return self.slope * np.arange(len(self.raw), dtype=np.float64) + self.intercept


def fit_linear_correction(raw_scores) -> SliceScoreSeries:
    """Ordinary least squares of score against slice index."""
    s = np.asarray(raw_scores, dtype=np.float64).ravel()
    if len(s) < 2:
        raise ValueError("need at least 2 slices for the linear correction")
    z = np.arange(len(s), dtype=np.float64)
    zc = z - z.mean()
    a = float(zc @ (s - s.mean()) / (zc @ zc))
    b = float(s.mean() - a * z.mean())
    if abs(a) <= 1e-9:
        raise ValueError("fitted score slope is zero; cannot order slices")
    return SliceScoreSeries(s, a, b)


def _window_range(a: float, b: float, n: int, window) -> tuple:
    lo, hi = window
    if lo > hi:
        raise ValueError("empty score window")
    if abs(a) <= 1e-12:
        raise ValueError("flat score series")
    t0, t1 = sorted(((lo - b) / a, (hi - b) / a))
    z0 = max(0, int(np.ceil(t0 - 1e-9)))
    z1 = min(n - 1, int(np.floor(t1 + 1e-9)))
    if z1 < z0:
        raise ValueError("score window is empty for this volume")
    return z0, z1


def crop_window_indices(fitted, window=DEFAULT_WINDOW) -> tuple:
    """Inclusive slice range whose fitted (affine) score lies in the closed window."""
    f = np.asarray(fitted, dtype=np.float64)
    n = len(f)
    if n < 2:
        raise ValueError("need at least 2 slices")
    return _window_range((f[-1] - f[0]) / (n - 1), f[0], n, window)


def crop_to_window(v, series: SliceScoreSeries, window=DEFAULT_WINDOW, min_slices: int = MIN_SLICES):
    """Keep the contiguous slices whose fitted score lies in ``window``."""
    if len(series.raw) != v.geometry.dims[2]:
        raise ValueError("score series length differs from slice count")
    z0, z1 = _window_range(series.slope, series.intercept, len(series.raw), window)
    count = z1 - z0 + 1
    if count < min_slices:
        raise ValueError(f"only {count} slices in window, need {min_slices}")
    return crop_pad_z(v, (z0, z1 + 1), count)
