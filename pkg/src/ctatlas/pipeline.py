"""Per-subject pipeline and cohort orchestration.

A subject goes through: canonical reorientation, slice scoring and linear
correction, crop to the score window, resampling onto an atlas-sized grid
centred on the VOI, affine then deformable registration to the atlas, success
filtering, and label transfer back to the subject's native grid.
"""
from __future__ import annotations

import json
import logging
import multiprocessing
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .affine import AffineConfig, register_affine
from .atlas import DICE_THRESHOLD, AtlasBundle, PhaseTag, accumulate, success_filter, write_bundle
from .deform import Level, LevelSchedule, register_deform
from .fields import invert_field, transfer_labels, warp_volume, write_dfld
from .metrics import organ_metrics
from .nifti import read_nifti, write_nifti
from .transform import AffineTransform
from .voi import (DEFAULT_WINDOW, MIN_SLICES, FileScorer, LinearScorer, compute_slice_features,
                  crop_to_window, default_scorer, fit_linear_correction, score_slices)
from .volume import Volume, _axis_assignment, centered_geometry, reorient_canonical, resample

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PipelineConfig:
    window: tuple = DEFAULT_WINDOW
    min_slices: int = MIN_SLICES
    affine: AffineConfig = field(default_factory=AffineConfig)
    schedule: LevelSchedule = field(default_factory=LevelSchedule)
    alpha: float = 0.5
    dice_threshold: float = DICE_THRESHOLD
    threads: int = 0
    out_dir: str = "out"
    scorer_weights: str | None = None

    def __post_init__(self):
        lo, hi = self.window
        if not lo < hi:
            raise ValueError("crop window must satisfy lo < hi")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if "window" in d:
            d["window"] = tuple(float(x) for x in d["window"])
        if "affine" in d:
            d["affine"] = AffineConfig(**d["affine"])
        if "schedule" in d:
            d["schedule"] = LevelSchedule(tuple(Level(**lv) if isinstance(lv, dict) else Level(*lv)
                                                for lv in d["schedule"]))
        return cls(**d)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return {"window": list(self.window), "min_slices": self.min_slices,
                "affine": asdict(self.affine), "schedule": self.schedule.to_list(),
                "alpha": self.alpha, "dice_threshold": self.dice_threshold,
                "threads": self.threads, "out_dir": self.out_dir,
                "scorer_weights": self.scorer_weights}


# ---------------------------------------------------------------------------
# manifest

@dataclass(frozen=True)
class SubjectEntry:
    id: str
    volume: str
    phase: str
    scores: str | None = None
    label: str | None = None


@dataclass(frozen=True)
class CohortManifest:
    atlas: str
    atlas_label: str | None
    subjects: tuple

    @classmethod
    def load(cls, path) -> "CohortManifest":
        """Read a manifest; relative paths resolve against its directory."""
        with open(path) as fh:
            raw = json.load(fh)
        base = os.path.dirname(os.path.abspath(path))
        res = lambda p: None if p is None else (p if os.path.isabs(p) else os.path.join(base, p))
        subjects = []
        seen = set()
        for i, s in enumerate(raw.get("subjects", [])):
            sid = str(s.get("id", f"sub{i:03d}"))
            if sid in seen:
                raise ValueError(f"duplicate subject id {sid!r}")
            seen.add(sid)
            phase = PhaseTag.parse(s.get("phase", PhaseTag.PORTAL_VENOUS.value)).value
            scores = s.get("scores")
            vol = res(s["volume"])
            if scores is None and os.path.exists(FileScorer.sidecar_path(vol)):
                scores = FileScorer.sidecar_path(vol)
            subjects.append(SubjectEntry(sid, vol, phase, res(scores), res(s.get("label"))))
        m = cls(res(raw["atlas"]), res(raw.get("atlas_label")), tuple(subjects))
        m.check_paths()
        return m

    def check_paths(self):
        paths = [self.atlas, self.atlas_label] + [p for s in self.subjects for p in (s.volume, s.scores, s.label)]
        missing = [p for p in paths if p is not None and not os.path.exists(p)]
        if missing:
            raise FileNotFoundError(f"manifest paths not found: {missing}")

    def phases(self) -> list:
        return sorted({s.phase for s in self.subjects})


# ---------------------------------------------------------------------------
# per-subject stages

def canonical_scores(geometry, scores) -> np.ndarray:
    """Reorder per-slice scores from storage order to canonical slice order."""
    src_axis, signs = _axis_assignment(geometry.direction_matrix)
    if src_axis[2] != 2:
        raise ValueError("slice axis of the stored volume is not the superior-inferior axis")
    s = np.asarray(scores, dtype=np.float64)
    return s[::-1].copy() if signs[2] < 0 else s


def make_scorer(entry_scores, config: PipelineConfig, geometry):
    if entry_scores is not None:
        fs = FileScorer.from_path(entry_scores)
        if len(fs.scores) == geometry.dims[2]:
            fs = FileScorer(canonical_scores(geometry, fs.scores))
        return fs
    if config.scorer_weights is None:
        return default_scorer()
    with open(config.scorer_weights) as fh:
        return LinearScorer.from_dict(json.load(fh))


def extract_voi(volume: Volume, scorer, config: PipelineConfig):
    """Canonical VOI of a volume; returns (voi, series)."""
    canon = reorient_canonical(volume)
    raw = score_slices(compute_slice_features(canon), scorer)
    series = fit_linear_correction(raw)
    return crop_to_window(canon, series, config.window, config.min_slices), series


def prepare_subject(volume: Volume, scorer, atlas_geometry, config: PipelineConfig) -> Volume:
    """VOI resampled onto an atlas-sized grid centred on the VOI (same world frame)."""
    voi, _ = extract_voi(volume, scorer, config)
    return place_on_atlas_grid(voi, atlas_geometry)


def place_on_atlas_grid(voi: Volume, atlas_geometry) -> Volume:
    c_idx = (np.asarray(voi.geometry.dims) - 1) / 2.0
    target = centered_geometry(atlas_geometry, voi.geometry.world_coords(c_idx))
    return resample(voi, target, "trilinear")


@dataclass(frozen=True, eq=False)
class SubjectResult:
    id: str
    phase: str
    affine: AffineTransform
    field: object
    registered: Volume
    labels: object
    success: bool
    report: dict


def register_subject(atlas: Volume, prepped: Volume, config: PipelineConfig):
    """Affine then deformable registration; returns (affine, field, registered)."""
    aff = register_affine(atlas, prepped, config=config.affine)
    aff_warped = warp_volume(prepped, affine=aff, geometry=atlas.geometry)
    u = register_deform(atlas, aff_warped, config.schedule, config.alpha)
    return aff, u, warp_volume(prepped, u, aff)


def run_subject(entry: SubjectEntry, atlas: Volume, atlas_label, config: PipelineConfig) -> SubjectResult:
    vol = read_nifti(entry.volume, kind="volume")
    scorer = make_scorer(entry.scores, config, vol.geometry)
    prepped = prepare_subject(vol, scorer, atlas.geometry, config)
    aff, u, registered = register_subject(atlas, prepped, config)
    before = Volume(atlas.geometry, prepped.data)
    ok, rep = success_filter(registered, atlas, before, config.dice_threshold)
    labels = None
    if atlas_label is not None:
        inv = invert_field(u)
        rep["inversion_converged"] = inv.converged
        rep["inversion_residual_max"] = inv.residual_max
        labels = transfer_labels(atlas_label, aff, u, vol.geometry, inverse=inv.field)
    return SubjectResult(entry.id, entry.phase, aff, u, registered, labels, ok, rep)


def _subject_dir(out_dir, sid):
    d = os.path.join(out_dir, "subjects", sid)
    os.makedirs(d, exist_ok=True)
    return d


def _run_and_write(args):
    entry, atlas_path, label_path, config, numba_threads = args
    if numba_threads:
        import numba
        numba.set_num_threads(numba_threads)
    atlas = read_nifti(atlas_path, kind="volume")
    atlas_label = read_nifti(label_path, kind="label") if label_path else None
    d = _subject_dir(config.out_dir, entry.id)
    try:
        res = run_subject(entry, atlas, atlas_label, config)
    except Exception as exc:  # recorded per subject, never aborts the cohort
        log.error("subject %s failed: %s", entry.id, exc)
        return {"subject": entry.id, "phase": entry.phase, "success": False, "error": str(exc)}
    res.affine.save(os.path.join(d, "affine.json"))
    write_dfld(res.field, os.path.join(d, "field.dfld"))
    write_nifti(res.registered, os.path.join(d, "registered.nii"))
    row = {"subject": entry.id, "phase": entry.phase, "success": res.success, **res.report,
           "registered": os.path.join(d, "registered.nii")}
    if res.labels is not None:
        write_nifti(res.labels, os.path.join(d, "label.nii"))
        row["label"] = os.path.join(d, "label.nii")
        if entry.label is not None:
            truth = read_nifti(entry.label, kind="label")
            row["metrics"] = [dict(subject=entry.id, **r) for r in organ_metrics(res.labels, truth)]
    return row


def available_threads() -> int:
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:
        return os.cpu_count() or 1


def run_cohort(manifest: CohortManifest, config: PipelineConfig) -> list:
    """Run every subject; rows come back in manifest order regardless of threads."""
    threads = config.threads or available_threads()
    workers = max(1, min(threads, len(manifest.subjects)))
    jobs = [(s, manifest.atlas, manifest.atlas_label, config, 0) for s in manifest.subjects]
    if workers == 1:
        import numba
        numba.set_num_threads(min(threads, numba.config.NUMBA_NUM_THREADS))
        return [_run_and_write(j) for j in jobs]
    jobs = [j[:4] + (1,) for j in jobs]
    ctx = multiprocessing.get_context("spawn")
    with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
        return list(pool.map(_run_and_write, jobs))


def build_phase_atlases(manifest: CohortManifest, config: PipelineConfig, rows: list | None = None) -> tuple:
    """Accumulate successful registrations per phase; returns (bundles, rows)."""
    if rows is None:
        rows = run_cohort(manifest, config)
    atlas = read_nifti(manifest.atlas, kind="volume")
    bundles = {}
    for row in rows:
        phase = row["phase"]
        b = bundles.get(phase) or AtlasBundle.empty(phase, atlas.geometry, manifest.atlas_label)
        flag_metrics = {k: row.get(k) for k in ("body_dice", "ncc", "ncc_before", "error") if k in row}
        if row["success"]:
            reg = read_nifti(row["registered"], kind="volume")
            b = accumulate(b, Volume(atlas.geometry, reg.data))
        bundles[phase] = b.record(row["subject"], row["success"], **flag_metrics)
    return bundles, rows


def _relative(rows, out_dir):
    def rel(v):
        if isinstance(v, str) and os.path.isabs(v):
            return os.path.relpath(v, out_dir)
        return v
    return [{k: rel(v) for k, v in r.items()} for r in rows]


def run_pipeline(manifest: CohortManifest, config: PipelineConfig) -> dict:
    """Full cohort run writing bundles, per-subject outputs, metrics and a run report."""
    out = os.path.abspath(config.out_dir)
    os.makedirs(out, exist_ok=True)
    cfg = PipelineConfig(**{**config.__dict__, "out_dir": out})
    bundles, rows = build_phase_atlases(manifest, cfg)
    for b in bundles.values():
        write_bundle(b, out)
    metrics = [m for r in rows for m in r.get("metrics", [])]
    with open(os.path.join(out, "metrics.json"), "w") as fh:
        json.dump(metrics, fh, indent=2)
    rows_out = [{k: v for k, v in r.items() if k != "metrics"} for r in _relative(rows, out)]
    report = {"config": {k: v for k, v in cfg.to_dict().items() if k not in ("out_dir", "threads")},
              "subjects": rows_out,
              "n_success": sum(bool(r["success"]) for r in rows),
              "phases": {p: b.count for p, b in sorted(bundles.items())}}
    with open(os.path.join(out, "report.json"), "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
    return report
