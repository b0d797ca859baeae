"""Per-phase mean and variance templates from registered volumes."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .volume import Geometry, Volume, body_mask

DICE_THRESHOLD = 0.90


class PhaseTag(str, Enum):
    NON_CONTRAST = "non_contrast"
    EARLY_ARTERIAL = "early_arterial"
    LATE_ARTERIAL = "late_arterial"
    PORTAL_VENOUS = "portal_venous"
    DELAYED = "delayed"

    @classmethod
    def parse(cls, value) -> "PhaseTag":
        try:
            return cls(value)
        except ValueError:
            raise ValueError(f"unknown phase tag {value!r}; expected one of "
                             f"{[p.value for p in cls]}") from None


def mask_dice(a: np.ndarray, b: np.ndarray) -> float:
    total = int(a.sum()) + int(b.sum())
    return 1.0 if total == 0 else 2.0 * int(np.logical_and(a, b).sum()) / total


def masked_ncc(a: np.ndarray, b: np.ndarray, mask: np.ndarray) -> float:
    """Pearson correlation of the two intensity sets under ``mask``; 0 when degenerate."""
    x = a[mask].astype(np.float64)
    y = b[mask].astype(np.float64)
    if x.size < 2:
        return 0.0
    x -= x.mean()
    y -= y.mean()
    den = np.sqrt((x @ x) * (y @ y))
    return float(x @ y / den) if den > 0 else 0.0


def success_filter(registered: Volume, fixed: Volume, before: Volume | None = None,
                   dice_threshold: float = DICE_THRESHOLD):
    """Accept a registration when body masks overlap and similarity did not drop.

    Both conditions use the fixed body mask: Dice of the body masks must reach
    ``dice_threshold`` and, when the unregistered volume ``before`` is given,
    the masked correlation must be at least its pre-registration value.

    Returns
    -------
    (bool, dict)
    """
    if registered.geometry.dims != fixed.geometry.dims:
        raise ValueError("registered and fixed volumes must share geometry")
    fm = body_mask(fixed)
    d = mask_dice(body_mask(registered), fm)
    ncc = masked_ncc(registered.data, fixed.data, fm)
    report = {"body_dice": d, "ncc": ncc, "ncc_before": None}
    ok = d >= dice_threshold
    if before is not None:
        report["ncc_before"] = masked_ncc(before.data, fixed.data, fm)
        ok = ok and ncc >= report["ncc_before"]
    report["success"] = bool(ok)
    return bool(ok), report


@dataclass(frozen=True, eq=False)
class AtlasBundle:
    """Running per-voxel mean and population variance (Welford)."""

    phase: str
    geometry: Geometry
    count: int = 0
    mean_data: np.ndarray | None = field(default=None, repr=False)
    m2_data: np.ndarray | None = field(default=None, repr=False)
    flags: tuple = ()
    label_ref: str | None = None

    @classmethod
    def empty(cls, phase, geometry: Geometry, label_ref=None) -> "AtlasBundle":
        phase = PhaseTag.parse(phase).value
        z = np.zeros(geometry.dims)
        return cls(phase, geometry, 0, z, z.copy(), (), label_ref)

    @property
    def mean(self) -> Volume:
        return Volume(self.geometry, self.mean_data)

    @property
    def variance(self) -> Volume:
        if self.count == 0:
            return Volume(self.geometry, np.zeros(self.geometry.dims))
        return Volume(self.geometry, np.maximum(self.m2_data / self.count, 0.0))

    def record(self, subject_id: str, success: bool, **metrics) -> "AtlasBundle":
        """Append a per-subject flag without touching the statistics."""
        entry = dict(subject=subject_id, success=bool(success), **metrics)
        return replace(self, flags=self.flags + (entry,))


def accumulate(bundle: AtlasBundle, registered: Volume) -> AtlasBundle:
    """One Welford update; returns a new bundle."""
    if registered.geometry.dims != bundle.geometry.dims or not registered.geometry.allclose(bundle.geometry):
        raise ValueError("registered volume geometry differs from the atlas geometry")
    x = registered.data.astype(np.float64)
    n = bundle.count + 1
    delta = x - bundle.mean_data
    mean = bundle.mean_data + delta / n
    m2 = bundle.m2_data + delta * (x - mean)
    return replace(bundle, count=n, mean_data=mean, m2_data=m2)


def write_bundle(bundle: AtlasBundle, out_dir, extra_report: dict | None = None) -> dict:
    """Write ``<phase>_mean.nii``, ``<phase>_variance.nii`` and ``<phase>_report.json``."""
    from .nifti import write_nifti

    os.makedirs(out_dir, exist_ok=True)
    paths = {k: os.path.join(out_dir, f"{bundle.phase}_{k}") for k in ("mean.nii", "variance.nii", "report.json")}
    write_nifti(bundle.mean, paths["mean.nii"])
    write_nifti(bundle.variance, paths["variance.nii"])
    report = {"phase": bundle.phase, "count": bundle.count, "atlas_label": bundle.label_ref,
              "subjects": list(bundle.flags)}
    if extra_report:
        report.update(extra_report)
    with open(paths["report.json"], "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
    return paths
