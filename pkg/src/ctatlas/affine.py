"""Stage-1 affine registration by multi-resolution descriptor block matching."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .deform import _box_means, control_grid, label_set
from .fields import warp_volume
from .ssc import DescriptorVolume, patch_costs, ssc_descriptor
from .transform import AffineTransform
from .volume import Volume, downsample

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class Correspondences:
    """Matched point pairs in world mm with their patch costs (0..12)."""

    fixed_points: np.ndarray = field(repr=False)
    moving_points: np.ndarray = field(repr=False)
    costs: np.ndarray = field(repr=False)
    nodes: np.ndarray | None = field(default=None, repr=False)
    displacements: np.ndarray | None = field(default=None, repr=False)

    def __len__(self):
        return len(self.costs)

    def subset(self, mask) -> "Correspondences":
        pick = lambda a: None if a is None else a[mask]
        return Correspondences(self.fixed_points[mask], self.moving_points[mask], self.costs[mask],
                               pick(self.nodes), pick(self.displacements))


def block_match(fixed_desc: DescriptorVolume, moving_desc: DescriptorVolume, grid_spacing: int,
                search_radius_steps: int, step_voxels: int,
                cost_patch_radius: int | None = None) -> Correspondences:
    """Exhaustive discrete search of the best displacement per control point.

    Every displacement ``l * step`` with ``l`` in ``[-r, r]^3`` is scored;
    ties go to the smaller displacement norm, then lexicographic order.
    """
    if fixed_desc.codes.shape != moving_desc.codes.shape:
        raise ValueError("descriptors must share a grid")
    grid = control_grid(fixed_desc.codes.shape, grid_spacing)
    if grid.n_nodes == 0:
        raise ValueError("empty control grid")
    nodes = grid.nodes()
    labels = label_set(search_radius_steps, step_voxels)
    radius = grid_spacing // 2 if cost_patch_radius is None else cost_patch_radius
    costs = patch_costs(fixed_desc, moving_desc, nodes, labels, radius)
    best = np.argmin(costs, axis=1)  # first minimum = tie-break order of label_set
    disp = labels[best]
    g_f, g_m = fixed_desc.geometry, moving_desc.geometry
    return Correspondences(g_f.world_coords(nodes), g_m.world_coords(nodes + disp),
                           costs[np.arange(len(nodes)), best], nodes, disp)


def _lstsq_affine(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    centred = p - p.mean(axis=0)
    sv = np.linalg.svd(centred, compute_uv=False) if len(p) >= 3 else np.zeros(3)
    if len(p) < 4 or sv[-1] <= 1e-9 * max(sv[0], 1e-300):
        raise ValueError("degenerate (coplanar) correspondence configuration")
    x = np.hstack([p, np.ones((len(p), 1))])
    sol, *_ = np.linalg.lstsq(x, q, rcond=None)
    m = np.eye(4)
    m[:3, :] = sol.T
    return m


def fit_affine(corr: Correspondences, trim_fraction: float = 0.2, rounds: int = 2) -> AffineTransform:
    """Least-squares 12-parameter fit of fixed -> moving points with trimming.

    After the initial fit, each round drops the ``trim_fraction`` of the
    remaining correspondences with the largest residuals and refits.
    """
    p = np.asarray(corr.fixed_points, dtype=np.float64)
    q = np.asarray(corr.moving_points, dtype=np.float64)
    m = _lstsq_affine(p, q)
    for _ in range(rounds):
        resid = np.linalg.norm(p @ m[:3, :3].T + m[:3, 3] - q, axis=1)
        keep = len(p) - int(np.floor(trim_fraction * len(p)))
        order = np.argsort(resid, kind="stable")[:keep]
        order.sort()
        p, q = p[order], q[order]
        m = _lstsq_affine(p, q)
    return AffineTransform(m)


@dataclass(frozen=True)
class AffineConfig:
    levels: int = 3
    grid_spacing: int = 8
    search_radius: int = 4
    step: int = 2
    cost_patch_radius: int = 4
    trim_fraction: float = 0.2
    rounds: int = 2
    min_body_fraction: float = 0.1
    body_threshold: float = -500.0


def grid_alignment(fixed: Volume, moving: Volume) -> AffineTransform:
    """World map that sends fixed voxel (i, j, k) onto moving voxel (i, j, k)."""
    return AffineTransform(moving.geometry.vox2world @ fixed.geometry.world2vox)


def register_affine(fixed: Volume, moving: Volume, levels: int = 3,
                    init: AffineTransform | None = None,
                    config: AffineConfig | None = None) -> AffineTransform:
    """Coarse-to-fine affine registration (downsampling 4, 2, 1 for 3 levels).

    Returns the transform mapping fixed world points into moving space. The
    starting point is ``init``, or the voxel-grid alignment of the two
    volumes when omitted (identity for volumes on the same grid).
    """
    cfg = config or AffineConfig(levels=levels)
    total = init if init is not None else grid_alignment(fixed, moving)
    factors = [2 ** k for k in range(cfg.levels - 1, -1, -1)]
    for f in factors:
        warped = warp_volume(moving, affine=total, geometry=fixed.geometry)
        fd, md = downsample(fixed, f), downsample(warped, f)
        if min(fd.geometry.dims) < 5:
            continue
        fdesc = ssc_descriptor(fd, keep_channels=False)
        mdesc = ssc_descriptor(md, keep_channels=False)
        corr = block_match(fdesc, mdesc, cfg.grid_spacing, cfg.search_radius, cfg.step,
                           cfg.cost_patch_radius)
        body = _box_means((fd.data > cfg.body_threshold).astype(np.float64), corr.nodes,
                          cfg.cost_patch_radius)
        corr = corr.subset(body >= cfg.min_body_fraction)
        try:
            inc = fit_affine(corr, cfg.trim_fraction, cfg.rounds)
        except ValueError as exc:
            log.warning("affine level (factor %d) skipped: %s", f, exc)
            continue
        total = total @ inc
        log.debug("affine level factor %d: %d correspondences", f, len(corr))
    return total
