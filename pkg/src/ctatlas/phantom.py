"""Deterministic synthetic abdominal CT phantoms with labels and slice scores.

Anatomy is laid out in body coordinates: x to the patient's right, y
anterior, z superior, in mm, with ``z = 0`` at the diaphragm dome. The body
coordinate score is ``-5`` at the diaphragm and grows by one unit every
``SCORE_UNIT_MM`` towards the feet, so the kidneys sit near score 0, the
lower retroperitoneum near +4 and the pelvis from about +6.

Phase intensities below are illustrative presets chosen to change organ
contrast between phases; they are not clinical reference values.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from ._interp import grid_coords
from .fields import DenseField, warp_volume
from .transform import rotation_matrix
from .volume import Geometry, LabelMap, Volume, centered_geometry, crop_pad_z, resample

PHASES = ("non_contrast", "early_arterial", "late_arterial", "portal_venous", "delayed")

LABELS = {
    "spleen": 1, "right_kidney": 2, "left_kidney": 3, "gall_bladder": 4, "esophagus": 5,
    "liver": 6, "stomach": 7, "aorta": 8, "ivc": 9, "portal_splenic_vein": 10,
    "pancreas": 11, "right_adrenal": 12, "left_adrenal": 13,
}

SCORE_UNIT_MM = 20.0
DIAPHRAGM_SCORE = -5.0

# HU per phase: kidney cortex, kidney medulla, liver, spleen, aorta, ivc
PHASE_HU = {
    "non_contrast":   dict(cortex=32, medulla=28, liver=58, spleen=48, aorta=42, ivc=40),
    "early_arterial": dict(cortex=190, medulla=70, liver=70, spleen=110, aorta=320, ivc=60),
    "late_arterial":  dict(cortex=200, medulla=120, liver=90, spleen=130, aorta=260, ivc=110),
    "portal_venous":  dict(cortex=170, medulla=160, liver=115, spleen=120, aorta=160, ivc=150),
    "delayed":        dict(cortex=120, medulla=135, liver=95, spleen=95, aorta=110, ivc=110),
}
TISSUE_HU = dict(air=-1000, lung=-850, fat=-100, muscle=50, visceral=-30, perirenal=-90,
                 bone=600, pelvis_bone=450, stomach=20, gall_bladder=5)

# kidney semi-axes as fractions of the long (z) semi-axis
KIDNEY_SHAPE = (0.5, 0.42, 1.0)


def score_of(z_anat, shift=0.0):
    """True body-coordinate score of anatomical height ``z_anat`` (mm)."""
    return DIAPHRAGM_SCORE - (np.asarray(z_anat, dtype=np.float64) + shift) / SCORE_UNIT_MM


def kidney_radii(volume_cc: float) -> np.ndarray:
    """Ellipsoid semi-axes (mm) of the requested kidney volume."""
    shape = np.asarray(KIDNEY_SHAPE)
    c = (volume_cc * 1000.0 / (4.0 / 3.0 * np.pi * np.prod(shape))) ** (1.0 / 3.0)
    return shape * c


@dataclass(frozen=True)
class PhantomParams:
    seed: int = 0
    dims: tuple = (104, 104, 192)
    spacing: tuple = (2.75, 2.75, 2.5)
    body_radii: tuple = (120.0, 90.0)
    body_jitter: float = 0.05
    body_offset_jitter_mm: float = 8.0
    kidney_volume_cc: float = 200.0
    kidney_center_jitter_mm: float = 5.0
    kidney_angle_jitter_deg: float = 4.0
    organ_jitter_mm: float = 5.0
    score_jitter_mm: float = 12.0
    fov_jitter_mm: float = 20.0
    phase: str = "portal_venous"
    noise_sigma: float = 8.0
    flip_z: bool = False

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ValueError(f"unknown phase {self.phase!r}")
        if min(self.body_radii) <= 0:
            raise ValueError("body radii must be positive")
        if not 80.0 <= self.kidney_volume_cc <= 400.0:
            raise ValueError("kidney volume target must lie in [80, 400] cc")
        if self.noise_sigma < 0:
            raise ValueError("noise sigma must be non-negative")


@dataclass(frozen=True)
class _Anatomy:
    body: tuple
    body_center: tuple
    kidneys: dict
    organs: dict
    score_shift: float
    z_center: float


def _draw_anatomy(p: PhantomParams) -> _Anatomy:
    rng = np.random.default_rng([p.seed, 1])
    u = lambda s: float(rng.uniform(-s, s))
    body = (p.body_radii[0] * (1 + u(p.body_jitter)), p.body_radii[1] * (1 + u(p.body_jitter)))
    center = (u(p.body_offset_jitter_mm), u(p.body_offset_jitter_mm))
    radii = kidney_radii(p.kidney_volume_cc)
    kidneys = {}
    for name, side, z in (("right_kidney", 1.0, -105.0), ("left_kidney", -1.0, -92.0)):
        j = p.kidney_center_jitter_mm
        c = np.array([side * 52.0 + u(j), -28.0 + u(j), z + u(2 * j)])
        ang = (u(p.kidney_angle_jitter_deg), u(p.kidney_angle_jitter_deg),
               side * 8.0 + u(p.kidney_angle_jitter_deg))
        kidneys[name] = (c, radii, rotation_matrix(ang))
    o = p.organ_jitter_mm
    organs = {
        "liver": (np.array([45.0 + u(o), 10.0 + u(o), -38.0 + u(o)]), np.array([50.0, 52.0, 48.0]) * (1 + u(0.08))),
        "spleen": (np.array([-62.0 + u(o), -8.0 + u(o), -40.0 + u(o)]), np.array([22.0, 28.0, 40.0]) * (1 + u(0.1))),
        "stomach": (np.array([-28.0 + u(o), 38.0 + u(o), -30.0 + u(o)]), np.array([26.0, 20.0, 30.0])),
        "gall_bladder": (np.array([35.0 + u(o), 45.0 + u(o), -72.0 + u(o)]), np.array([10.0, 10.0, 16.0])),
    }
    shift = u(p.score_jitter_mm)
    z_center = -100.0 + u(p.fov_jitter_mm)
    return _Anatomy(body, center, kidneys, organs, shift, z_center)


def _ellipsoid(pts, center, radii, rot=None):
    d = pts - center
    if rot is not None:
        d = d @ rot  # coordinates in the ellipsoid frame: R^T d
    return ((d / radii) ** 2).sum(axis=1) <= 1.0


def phantom_geometry(p: PhantomParams, anatomy: _Anatomy | None = None) -> Geometry:
    anatomy = anatomy or _draw_anatomy(p)
    dims = np.asarray(p.dims)
    sp = np.asarray(p.spacing, dtype=np.float64)
    center = np.array([0.0, 0.0, anatomy.z_center])
    direction = np.eye(3)
    if p.flip_z:
        direction = np.diag([1.0, 1.0, -1.0])
    g = Geometry(tuple(dims), tuple(sp), (0.0, 0.0, 0.0), direction)
    return centered_geometry(g, center)


def generate_phantom(params: PhantomParams):
    """Build one phantom.

    Returns
    -------
    volume : Volume
        Integer-valued HU with Gaussian noise.
    labels : LabelMap
        Organ ids (2 right kidney, 3 left kidney, ...).
    scores : ndarray
        True body-coordinate score of every axial slice in storage order.
    """
    p = params
    an = _draw_anatomy(p)
    geom = phantom_geometry(p, an)
    pts = geom.world_coords(grid_coords(geom.dims))
    hu = PHASE_HU[p.phase]
    x = pts[:, 0] - an.body_center[0]
    y = pts[:, 1] - an.body_center[1]
    z = pts[:, 2]
    s = np.clip(score_of(z, an.score_shift), -12, 12)
    taper = 1.0 + 0.08 * s / 12.0
    rx, ry = an.body[0] * taper, an.body[1] * taper
    ell = (x / rx) ** 2 + (y / ry) ** 2
    body = ell <= 1.0
    shrink = lambda mm: (x / np.maximum(rx - mm, 1)) ** 2 + (y / np.maximum(ry - mm, 1)) ** 2 <= 1.0
    img = np.full(len(pts), float(TISSUE_HU["air"]))
    lab = np.zeros(len(pts), dtype=np.uint8)
    img[body] = TISSUE_HU["fat"]
    img[shrink(12.0)] = TISSUE_HU["muscle"]
    img[shrink(20.0)] = TISSUE_HU["visceral"]
    local = np.stack([x, y, z], axis=1)

    def paint(mask, value, label=None):
        if np.any(mask & ~body):
            raise ValueError("organ exceeds body bounds; shrink organs or enlarge the body")
        img[mask] = value
        if label is not None:
            lab[mask] = label

    for side in (1.0, -1.0):
        lung = _ellipsoid(local, np.array([side * 48.0, 5.0, 100.0]), np.array([40.0, 52.0, 100.0]))
        paint(lung & (z > 0.0 - an.score_shift), TISSUE_HU["lung"])
    c, r = an.organs["liver"]
    paint(_ellipsoid(local, c, r), hu["liver"], LABELS["liver"])
    c, r = an.organs["spleen"]
    paint(_ellipsoid(local, c, r), hu["spleen"], LABELS["spleen"])
    c, r = an.organs["stomach"]
    paint(_ellipsoid(local, c, r), TISSUE_HU["stomach"], LABELS["stomach"])
    c, r = an.organs["gall_bladder"]
    paint(_ellipsoid(local, c, r), TISSUE_HU["gall_bladder"], LABELS["gall_bladder"])
    for name in ("right_kidney", "left_kidney"):
        c, r, rot = an.kidneys[name]
        paint(_ellipsoid(local, c, r * 1.2, rot), TISSUE_HU["perirenal"], 0)
    lower = z > -240.0
    paint(((x + 8.0) ** 2 + (y + 35.0) ** 2 <= 8.0 ** 2) & lower & (z < 40.0), hu["aorta"], LABELS["aorta"])
    paint(((x - 14.0) ** 2 + (y + 30.0) ** 2 <= 9.0 ** 2) & lower & (z < 0.0), hu["ivc"], LABELS["ivc"])
    paint((x ** 2 + (y + 58.0) ** 2 <= 13.0 ** 2), TISSUE_HU["bone"])
    for side in (1.0, -1.0):
        wing = ((x - side * 60.0) / 28.0) ** 2 + ((y + 20.0) / 18.0) ** 2 <= 1.0
        paint(wing & (z < -230.0 - an.score_shift), TISSUE_HU["pelvis_bone"])
    for name in ("right_kidney", "left_kidney"):
        c, r, rot = an.kidneys[name]
        kid = _ellipsoid(local, c, r, rot)
        paint(kid, hu["cortex"], LABELS[name])
        paint(_ellipsoid(local, c, r * np.array([0.45, 0.45, 0.6]), rot), hu["medulla"])
    rng = np.random.default_rng([p.seed, 2])
    if p.noise_sigma > 0:
        img = img + rng.normal(0.0, p.noise_sigma, size=img.shape)
    img = np.clip(np.round(img), -1024, 3071)
    z_slices = geom.world_coords(np.stack([np.zeros(geom.dims[2]), np.zeros(geom.dims[2]),
                                           np.arange(geom.dims[2])], axis=1))[:, 2]
    scores = np.clip(score_of(z_slices, an.score_shift), -12.0, 12.0)
    return (Volume(geom, img.reshape(geom.dims)), LabelMap(geom, lab.reshape(geom.dims)), scores)


def kidney_volume_cc(labels: LabelMap, label: int) -> float:
    return float((labels.data == label).sum() * np.prod(labels.geometry.spacing) / 1000.0)


def sinusoid_field(geometry: Geometry, amplitude: float, wavelength: float,
                   direction=(1.0, 1.0, 1.0), center=None) -> DenseField:
    """``u(p) = A * e * prod_a cos(2 pi (p_a - c_a) / wavelength)`` in voxels.

    ``e`` is the normalised ``direction``; ``c`` defaults to the central voxel,
    where the magnitude peaks at exactly ``A``.
    """
    e = np.asarray(direction, dtype=np.float64)
    e = e / np.linalg.norm(e)
    dims = geometry.dims
    c = np.asarray(center if center is not None else [(n - 1) // 2 for n in dims], dtype=np.float64)
    k = 2.0 * np.pi / wavelength
    w = [np.cos(k * (np.arange(n) - c[a])) for a, n in enumerate(dims)]
    prod = w[0][:, None, None] * w[1][None, :, None] * w[2][None, None, :]
    return DenseField(geometry, amplitude * prod[..., None] * e)


def apply_synthetic_warp(v: Volume, labels: LabelMap | None, amplitude: float,
                         wavelength: float | None = None, direction=(1.0, 1.0, 1.0), center=None):
    """Warp a phantom by a smooth invertible sinusoid.

    The pull-back field satisfies ``out(x) = v(x + u(x))`` and is returned
    exactly. Requires ``amplitude <= 6`` voxels and ``wavelength >= 8 *
    amplitude``, which bounds the field gradient below one.
    """
    if wavelength is None:
        wavelength = 8.0 * max(amplitude, 1.0)
    if amplitude < 0 or amplitude > 6.0:
        raise ValueError("amplitude must lie in [0, 6] voxels")
    if wavelength < 8.0 * amplitude:
        raise ValueError("wavelength must be at least 8x the amplitude for invertibility")
    u = sinusoid_field(v.geometry, amplitude, wavelength, direction, center)
    out_v = warp_volume(v, u)
    out_l = warp_volume(labels, u) if labels is not None else None
    return out_v, out_l, u


def jacobian_determinant(u: DenseField) -> np.ndarray:
    """det(I + grad u) by central finite differences (voxel units)."""
    grads = np.stack([np.stack(np.gradient(u.data[..., c].astype(np.float64), axis=(0, 1, 2)), -1)
                      for c in range(3)], axis=-2)
    return np.linalg.det(np.eye(3) + grads)


# ---------------------------------------------------------------------------
# atlas targets and cohorts

ATLAS_DIMS = (96, 96, 96)
ATLAS_SPACING = 2.75


def atlas_template_geometry(dims=ATLAS_DIMS, spacing=ATLAS_SPACING) -> Geometry:
    return Geometry(dims, (spacing,) * 3)


def make_atlas_target(seed: int = 0, phase: str = "portal_venous", geometry: Geometry | None = None,
                      kidney_volume_cc: float = 200.0, window=(-5.0, 5.0)):
    """A single phantom subject cropped to the score window and placed on the atlas grid."""
    from .voi import crop_window_indices

    params = PhantomParams(seed=seed, phase=phase, kidney_volume_cc=kidney_volume_cc)
    vol, lab, scores = generate_phantom(params)
    z0, z1 = crop_window_indices(scores, window)
    geometry = geometry or atlas_template_geometry()
    keep, count = (z0, z1 + 1), z1 + 1 - z0
    v_crop, l_crop = crop_pad_z(vol, keep, count), crop_pad_z(lab, keep, count)
    c_idx = (np.asarray(v_crop.geometry.dims) - 1) / 2.0
    target = centered_geometry(geometry, v_crop.geometry.world_coords(c_idx))
    return resample(v_crop, target, "trilinear"), resample(l_crop, target, "nearest")


@dataclass(frozen=True)
class CohortSubject:
    id: str
    params: PhantomParams


def cohort_params(n: int, seed: int = 0, phases=("portal_venous",), kidney_cc=(100.0, 308.0),
                  flip_every: int = 0) -> list:
    """Randomised subject parameters; kidney volumes uniform over ``kidney_cc``."""
    rng = np.random.default_rng([seed, 99])
    out = []
    for i in range(n):
        sub_seed = int(seed * 1000 + i + 1)
        cc = float(rng.uniform(*kidney_cc)) if kidney_cc[1] > kidney_cc[0] else float(kidney_cc[0])
        phase = phases[i % len(phases)]
        flip = bool(flip_every) and i % flip_every == flip_every - 1
        out.append(CohortSubject(f"sub{i:03d}", PhantomParams(seed=sub_seed, phase=phase,
                                                               kidney_volume_cc=cc, flip_z=flip)))
    return out


def write_cohort(out_dir, n: int, seed: int = 0, phases=("portal_venous",),
                 kidney_cc=(100.0, 308.0), score_noise: float = 0.25, flip_every: int = 0) -> str:
    """Write an atlas target, subjects (volume, label, score sidecar) and a manifest.

    Returns the manifest path.
    """
    from .nifti import write_nifti

    os.makedirs(out_dir, exist_ok=True)
    atlas_v, atlas_l = make_atlas_target(seed=seed * 1000)
    write_nifti(atlas_v, os.path.join(out_dir, "atlas.nii"))
    write_nifti(atlas_l, os.path.join(out_dir, "atlas_label.nii"))
    subjects = []
    for sub in cohort_params(n, seed, phases, kidney_cc, flip_every):
        vol, lab, scores = generate_phantom(sub.params)
        rng = np.random.default_rng([sub.params.seed, 3])
        noisy = np.clip(scores + rng.normal(0.0, score_noise, size=scores.shape), -12, 12)
        base = os.path.join(out_dir, sub.id)
        write_nifti(vol, base + ".nii")
        write_nifti(lab, base + "_label.nii")
        with open(base + ".scores.json", "w") as fh:
            json.dump([round(float(s), 6) for s in noisy], fh)
        subjects.append({"id": sub.id, "volume": sub.id + ".nii", "phase": sub.params.phase,
                         "scores": sub.id + ".scores.json", "label": sub.id + "_label.nii",
                         "kidney_volume_cc": round(sub.params.kidney_volume_cc, 3)})
    manifest = {"atlas": "atlas.nii", "atlas_label": "atlas_label.nii", "subjects": subjects}
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2)
    return path
