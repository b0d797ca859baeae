"""Overlap and surface-distance metrics plus the Wilcoxon signed-rank test."""
from __future__ import annotations

import math

import numpy as np
from scipy.spatial import cKDTree
from scipy.stats import norm, rankdata

from .volume import LabelMap

ORGAN_IDS = tuple(range(1, 14))


def _check(p: LabelMap, g: LabelMap):
    if p.geometry.dims != g.geometry.dims or not p.geometry.allclose(g.geometry):
        raise ValueError("label maps must share geometry")


def dice(p: LabelMap, g: LabelMap, label: int) -> float:
    """``2|P & G| / (|P| + |G|)``; 1.0 when the label is absent from both."""
    _check(p, g)
    a = p.data == label
    b = g.data == label
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def extract_surface(lab: LabelMap, label: int) -> np.ndarray:
    """World-mm centres of voxel faces not shared with a same-label voxel, (N, 3)."""
    mask = lab.data == label
    if not mask.any():
        raise ValueError(f"label {label} absent")
    padded = np.pad(mask, 1)
    core = (slice(1, -1),) * 3
    pts = []
    for axis in range(3):
        for sign in (-1, 1):
            neighbour = np.roll(padded, -sign, axis=axis)[core]
            idx = np.argwhere(mask & ~neighbour).astype(np.float64)
            idx[:, axis] += 0.5 * sign
            pts.append(idx)
    idx = np.concatenate(pts)
    return lab.geometry.world_coords(idx)


def _nearest_distances(vp, vg) -> np.ndarray:
    vp = np.asarray(vp, dtype=np.float64)
    vg = np.asarray(vg, dtype=np.float64)
    if len(vp) == 0 or len(vg) == 0:
        raise ValueError("surface vertex sets must be non-empty")
    d, _ = cKDTree(vg).query(vp, k=1)
    return d


def msd(vp, vg) -> float:
    """Directed mean over ``vp`` of the distance to the nearest point of ``vg``."""
    return float(_nearest_distances(vp, vg).mean())


def hd(vp, vg) -> float:
    """Directed Hausdorff distance from ``vp`` to ``vg``."""
    return float(_nearest_distances(vp, vg).max())


def msd_symmetric(vp, vg) -> float:
    """Mean of all nearest distances in both directions."""
    d = np.concatenate([_nearest_distances(vp, vg), _nearest_distances(vg, vp)])
    return float(d.mean())


def hd_symmetric(vp, vg) -> float:
    return max(hd(vp, vg), hd(vg, vp))


def organ_metrics(pred: LabelMap, truth: LabelMap, organs=ORGAN_IDS, symmetric: bool = False) -> list:
    """Metric rows ``{organ_id, dice, msd_mm, hd_mm}``; distances are None when undefined."""
    rows = []
    m_fn, h_fn = (msd_symmetric, hd_symmetric) if symmetric else (msd, hd)
    present_p, present_g = pred.labels(), truth.labels()
    for organ in organs:
        if organ not in present_p and organ not in present_g:
            continue
        row = {"organ_id": int(organ), "dice": dice(pred, truth, organ), "msd_mm": None, "hd_mm": None}
        if organ in present_p and organ in present_g:
            vp, vg = extract_surface(pred, organ), extract_surface(truth, organ)
            row["msd_mm"] = m_fn(vp, vg)
            row["hd_mm"] = h_fn(vp, vg)
        rows.append(row)
    return rows


def _exact_two_sided(w: float, ranks: np.ndarray) -> float:
    """P(min(W+, W-) <= w) under random signs, by counting over doubled ranks."""
    r2 = np.rint(2 * ranks).astype(np.int64)
    total = int(r2.sum())
    counts = np.zeros(total + 1, dtype=object)
    counts[0] = 1
    for r in r2:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: total + 1 - r]
        counts = counts + shifted
    w2 = int(round(2 * w))
    # W- = total - W+, so min <= w iff W+ <= w or W+ >= total - w
    hits = sum(counts[k] for k in range(total + 1) if k <= w2 or k >= total - w2)
    return min(1.0, float(hits) / float(2 ** len(r2)))


def wilcoxon_signed_rank(diffs, method: str = "approx"):
    """Two-sided signed-rank test on paired differences.

    Zeros are dropped, ties share average ranks and ``W`` is the smaller of
    the positive and negative rank sums. ``approx`` uses the normal
    approximation with tie correction and no continuity correction;
    ``exact`` enumerates the sign-flip distribution (practical for n <= 25).

    Returns
    -------
    (W, z, p)
    """
    d = np.asarray(diffs, dtype=np.float64).ravel()
    d = d[d != 0]
    n = len(d)
    if n == 0:
        raise ValueError("all differences are zero")
    if method == "approx" and n < 6:
        raise ValueError("normal approximation needs at least 6 nonzero differences")
    ranks = rankdata(np.abs(d))
    w_pos = float(ranks[d > 0].sum())
    w_neg = float(ranks[d < 0].sum())
    w = min(w_pos, w_neg)
    mean = n * (n + 1) / 4.0
    _, tie_counts = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - float((tie_counts ** 3 - tie_counts).sum()) / 48.0
    z = (w - mean) / math.sqrt(var) if var > 0 else 0.0
    if method == "approx":
        p = float(min(1.0, 2.0 * norm.cdf(-abs(z))))
    elif method == "exact":
        p = _exact_two_sided(w, ranks)
    else:
        raise ValueError(f"unknown method {method!r}")
    return w, z, p
