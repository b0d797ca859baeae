"""Discrete dense-displacement deformable registration on a control grid.

Each level samples a cubic label set of integer displacements at every
control node, scores them with SSC Hamming patch costs, and picks one label
per node by exact min-sum dynamic programming over a minimum spanning tree
of the grid with a squared-difference smoothness penalty.
"""
from __future__ import annotations

import heapq
import logging
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .fields import DenseField, compose, warp_volume
from .ssc import DescriptorVolume, patch_costs, ssc_descriptor
from .volume import Geometry, Volume

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Level:
    spacing: int
    radius: int
    quant: int

    @property
    def n_labels(self) -> int:
        return (2 * self.radius + 1) ** 3

    @property
    def patch_radius(self) -> int:
        return max(1, self.spacing // 2)


@dataclass(frozen=True)
class LevelSchedule:
    """Coarse-to-fine list of (grid spacing, search radius, quantisation)."""

    levels: tuple = (Level(8, 6, 5), Level(7, 5, 4), Level(6, 4, 3), Level(5, 3, 2), Level(4, 2, 1))

    def __post_init__(self):
        lv = tuple(lv if isinstance(lv, Level) else Level(*lv) for lv in self.levels)
        object.__setattr__(self, "levels", lv)
        if not lv:
            raise ValueError("schedule needs at least one level")
        for a in lv:
            if a.spacing < 1 or a.radius < 0 or a.quant < 1:
                raise ValueError(f"invalid level {a}")
        for a, b in zip(lv, lv[1:]):
            if b.spacing > a.spacing or b.radius > a.radius or b.quant > a.quant:
                raise ValueError("schedule values must be non-increasing from coarse to fine")

    @classmethod
    def interpolated(cls, n_levels=5, spacing=(8, 4), radius=(6, 2), quant=(5, 1)):
        """Linearly interpolate integer schedule values between the endpoints."""
        def ramp(a, b):
            return [int(round(x)) for x in np.linspace(a, b, n_levels)]
        return cls(tuple(Level(*t) for t in zip(ramp(*spacing), ramp(*radius), ramp(*quant))))

    def max_displacement(self) -> int:
        """Per-component bound on the accumulated displacement (voxels)."""
        return int(sum(lv.radius * lv.quant for lv in self.levels))

    def to_list(self):
        return [[lv.spacing, lv.radius, lv.quant] for lv in self.levels]


@dataclass(frozen=True, eq=False)
class ControlGrid:
    """Regular control nodes; ``axes[a]`` holds the voxel positions along axis a."""

    axes: tuple
    spacing: int

    @property
    def shape(self):
        return tuple(len(a) for a in self.axes)

    @property
    def n_nodes(self) -> int:
        return int(np.prod(self.shape))

    def nodes(self) -> np.ndarray:
        """Node voxel coordinates (N, 3), C-order over grid indices."""
        ii, jj, kk = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([ii.ravel(), jj.ravel(), kk.ravel()], axis=1).astype(np.int64)


def control_grid(dims, spacing: int) -> ControlGrid:
    """Nodes at ``spacing // 2 + k * spacing``, ``ceil(n / spacing)`` per axis."""
    if spacing < 1:
        raise ValueError("grid spacing must be positive")
    axes = []
    for n in dims:
        m = max(1, -(-int(n) // spacing))
        pos = np.minimum(spacing // 2 + spacing * np.arange(m), n - 1)
        axes.append(pos.astype(np.int64))
    return ControlGrid(tuple(axes), int(spacing))


def label_set(radius: int, quant: int) -> np.ndarray:
    """All displacements ``(i, j, k) * quant`` with ``|i|,|j|,|k| <= radius``.

    Sorted by squared norm, then lexicographically, so the first minimum in
    this order realises the zero-first tie-break.
    """
    r = np.arange(-radius, radius + 1)
    lab = np.stack(np.meshgrid(r, r, r, indexing="ij"), axis=-1).reshape(-1, 3) * quant
    return lab[tie_order(lab)].astype(np.int64)


def tie_order(labels) -> np.ndarray:
    """Indices of ``labels`` ordered by (squared norm, x, y, z)."""
    lab = np.asarray(labels)
    norm = (lab.astype(np.float64) ** 2).sum(axis=1)
    return np.lexsort((lab[:, 2], lab[:, 1], lab[:, 0], norm))


def node_costs(fixed_desc: DescriptorVolume, moving_desc: DescriptorVolume, grid: ControlGrid,
               labels, cost_patch_radius: int) -> np.ndarray:
    """Unary cost tensor [nodes x labels] of mean Hamming patch costs."""
    return patch_costs(fixed_desc, moving_desc, grid.nodes(), labels, cost_patch_radius)


@dataclass(frozen=True, eq=False)
class Tree:
    parent: np.ndarray
    order: np.ndarray
    weight: np.ndarray = field(repr=False, default=None)

    @property
    def n_nodes(self) -> int:
        return len(self.parent)

    def edges(self):
        return [(int(p), int(c)) for c, p in enumerate(self.parent) if p >= 0]


def tree_from_parents(parent) -> Tree:
    """Build a :class:`Tree` (root = the node with parent -1) with BFS order."""
    parent = np.asarray(parent, dtype=np.int64)
    roots = np.flatnonzero(parent < 0)
    if len(roots) != 1:
        raise ValueError("tree needs exactly one root")
    children = [[] for _ in parent]
    for c, p in enumerate(parent):
        if p >= 0:
            children[p].append(c)
    order = [int(roots[0])]
    head = 0
    while head < len(order):
        order.extend(sorted(children[order[head]]))
        head += 1
    if len(order) != len(parent):
        raise ValueError("parent array is not a connected tree")
    return Tree(parent, np.asarray(order, dtype=np.int64))


def _box_means(data: np.ndarray, nodes: np.ndarray, radius: int) -> np.ndarray:
    """Mean of ``data`` over each node's cube, clipped to the grid."""
    sat = np.zeros(tuple(s + 1 for s in data.shape))
    sat[1:, 1:, 1:] = data.astype(np.float64).cumsum(0).cumsum(1).cumsum(2)
    n = np.asarray(data.shape)
    lo = np.clip(nodes - radius, 0, n)
    hi = np.clip(nodes + radius + 1, 0, n)
    a0, b0, c0 = lo.T
    a1, b1, c1 = hi.T
    total = (sat[a1, b1, c1] - sat[a0, b1, c1] - sat[a1, b0, c1] - sat[a1, b1, c0]
             + sat[a0, b0, c1] + sat[a0, b1, c0] + sat[a1, b0, c0] - sat[a0, b0, c0])
    return total / np.prod(hi - lo, axis=1)


def build_mst(fixed: Volume, grid: ControlGrid, patch_radius: int | None = None) -> Tree:
    """Prim's minimum spanning tree over the 6-connected control grid.

    Edge weight is the absolute difference of the two nodes' patch mean HU.
    Grown from node 0; equal weights resolve to the smaller node index.
    """
    shape = grid.shape
    n = grid.n_nodes
    if n < 1:
        raise ValueError("empty grid")
    radius = grid.spacing // 2 if patch_radius is None else patch_radius
    means = _box_means(fixed.data, grid.nodes(), max(radius, 0))
    idx = np.arange(n).reshape(shape)
    neighbours = [[] for _ in range(n)]
    for axis in range(3):
        a = np.moveaxis(idx, axis, 0)
        for u, v in zip(a[:-1].ravel(), a[1:].ravel()):
            neighbours[u].append(int(v))
            neighbours[v].append(int(u))
    parent = np.full(n, -1, dtype=np.int64)
    weight = np.zeros(n)
    in_tree = np.zeros(n, dtype=bool)
    in_tree[0] = True
    heap = [(abs(means[0] - means[v]), v, 0) for v in neighbours[0]]
    heapq.heapify(heap)
    while heap:
        w, v, u = heapq.heappop(heap)
        if in_tree[v]:
            continue
        in_tree[v] = True
        parent[v] = u
        weight[v] = w
        for t in neighbours[v]:
            if not in_tree[t]:
                heapq.heappush(heap, (abs(means[v] - means[t]), t, v))
    tree = tree_from_parents(parent)
    return Tree(tree.parent, tree.order, weight)


def _grid_layout(labels: np.ndarray):
    """Return (side, quant, grid positions) if labels form a full centred cube."""
    lab = np.asarray(labels, dtype=np.int64)
    L = len(lab)
    side = int(round(L ** (1.0 / 3.0)))
    if side ** 3 != L or side % 2 == 0:
        return None
    radius = side // 2
    if radius == 0:
        return (1, 1, np.zeros((1, 3), dtype=np.int64)) if not lab.any() else None
    quant = int(np.abs(lab).max()) // radius
    if quant < 1 or np.any(lab % quant):
        return None
    pos = lab // quant + radius
    if pos.min() < 0 or pos.max() >= side:
        return None
    flat = (pos[:, 0] * side + pos[:, 1]) * side + pos[:, 2]
    if len(np.unique(flat)) != L:
        return None
    return side, quant, pos


@njit(cache=True)
def _message_grid(agg, pos, side, w):
    """min over l' of agg[l'] + w * |pos(l) - pos(l')|^2, separably per axis."""
    g = np.empty((side, side, side))
    for l in range(agg.shape[0]):
        g[pos[l, 0], pos[l, 1], pos[l, 2]] = agg[l]
    tmp = np.empty(side)
    for axis in range(3):
        for a in range(side):
            for b in range(side):
                for i in range(side):
                    best = np.inf
                    for t in range(side):
                        if axis == 0:
                            val = g[t, a, b]
                        elif axis == 1:
                            val = g[a, t, b]
                        else:
                            val = g[a, b, t]
                        val += w * (i - t) * (i - t)
                        if val < best:
                            best = val
                    tmp[i] = best
                for i in range(side):
                    if axis == 0:
                        g[i, a, b] = tmp[i]
                    elif axis == 1:
                        g[a, i, b] = tmp[i]
                    else:
                        g[a, b, i] = tmp[i]
    out = np.empty(agg.shape[0])
    for l in range(agg.shape[0]):
        out[l] = g[pos[l, 0], pos[l, 1], pos[l, 2]]
    return out


@njit(cache=True)
def _message_dense(agg, labels, alpha):
    L = agg.shape[0]
    out = np.empty(L)
    for lp in range(L):
        best = np.inf
        for lc in range(L):
            d0 = labels[lc, 0] - labels[lp, 0]
            d1 = labels[lc, 1] - labels[lp, 1]
            d2 = labels[lc, 2] - labels[lp, 2]
            val = agg[lc] + alpha * (d0 * d0 + d1 * d1 + d2 * d2)
            if val < best:
                best = val
        out[lp] = best
    return out


@njit(cache=True)
def _tree_dp(costs, parent, order, labels, rank, alpha, use_grid, pos, side, step_w):
    n_nodes, L = costs.shape
    agg = costs.copy()
    for t in range(n_nodes - 1, 0, -1):
        c = order[t]
        if use_grid:
            msg = _message_grid(agg[c], pos, side, step_w)
        else:
            msg = _message_dense(agg[c], labels, alpha)
        p = parent[c]
        for l in range(L):
            agg[p, l] += msg[l]
    sel = np.empty(n_nodes, dtype=np.int64)
    root = order[0]
    best = np.inf
    arg = -1
    for r in range(L):
        l = rank[r]
        if agg[root, l] < best:
            best = agg[root, l]
            arg = l
    sel[root] = arg
    for t in range(1, n_nodes):
        c = order[t]
        lp = sel[parent[c]]
        best = np.inf
        arg = -1
        for r in range(L):
            l = rank[r]
            d0 = labels[l, 0] - labels[lp, 0]
            d1 = labels[l, 1] - labels[lp, 1]
            d2 = labels[l, 2] - labels[lp, 2]
            val = agg[c, l] + alpha * (d0 * d0 + d1 * d1 + d2 * d2)
            if val < best:
                best = val
                arg = l
        sel[c] = arg
    return sel


def regularize_mst(costs, tree: Tree, alpha: float, labels) -> np.ndarray:
    """Exact minimiser of ``sum cost[n, l_n] + alpha * sum_edges |d_i - d_j|^2``.

    Leaves-to-root min-sum messages, then root-to-leaves backtracking in BFS
    order. Ties pick the label with smaller ``|d|``, then lexicographically
    smaller ``d``, node by node in BFS order. Cubic label sets use a
    separable per-axis message; other label sets fall back to the dense one.

    Returns
    -------
    ndarray of int, shape (n_nodes,)
        Selected label index per node.
    """
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    costs = np.ascontiguousarray(costs, dtype=np.float64)
    labels = np.ascontiguousarray(np.asarray(labels, dtype=np.int64).reshape(-1, 3))
    if costs.shape != (tree.n_nodes, len(labels)):
        raise ValueError(f"cost shape {costs.shape} does not match tree/labels")
    layout = _grid_layout(labels)
    rank = tie_order(labels).astype(np.int64)
    if layout is not None:
        side, quant, pos = layout
        return _tree_dp(costs, tree.parent, tree.order, labels, rank, float(alpha), True,
                        np.ascontiguousarray(pos), side, float(alpha) * quant * quant)
    dummy = np.zeros((1, 3), dtype=np.int64)
    return _tree_dp(costs, tree.parent, tree.order, labels, rank, float(alpha), False,
                    dummy, 1, 0.0)


def mrf_energy(costs, tree: Tree, alpha: float, labels, selection) -> float:
    """Objective value of a labelling (unary plus tree pairwise terms)."""
    costs = np.asarray(costs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    sel = np.asarray(selection)
    e = float(costs[np.arange(len(sel)), sel].sum())
    for p, c in tree.edges():
        d = labels[sel[c]] - labels[sel[p]]
        e += alpha * float(d @ d)
    return e


@dataclass(frozen=True, eq=False)
class ControlField:
    grid: ControlGrid
    displacement: np.ndarray = field(repr=False)  # grid.shape + (3,), voxels

    def __post_init__(self):
        arr = np.asarray(self.displacement, dtype=np.float64).reshape(self.grid.shape + (3,))
        if not np.all(np.isfinite(arr)):
            raise ValueError("control displacements must be finite")
        object.__setattr__(self, "displacement", arr)


def _axis_weights(n: int, nodes: np.ndarray) -> np.ndarray:
    """Linear interpolation matrix (n x m) from node positions to voxels, clamped."""
    m = len(nodes)
    w = np.zeros((n, m))
    t = np.arange(n, dtype=np.float64)
    if m == 1:
        w[:, 0] = 1.0
        return w
    for a in range(m):
        e = np.zeros(m)
        e[a] = 1.0
        w[:, a] = np.interp(t, nodes.astype(np.float64), e)
    return w


def upsample_field(cf: ControlField, target: Geometry) -> DenseField:
    """Trilinear interpolation of node displacements to every voxel."""
    wx, wy, wz = (_axis_weights(n, ax) for n, ax in zip(target.dims, cf.grid.axes))
    dense = np.einsum("ia,abcd->ibcd", wx, cf.displacement)
    dense = np.einsum("jb,ibcd->ijcd", wy, dense)
    dense = np.einsum("kc,ijcd->ijkd", wz, dense)
    return DenseField(target, dense)


@dataclass(frozen=True)
class DeformConfig:
    schedule: LevelSchedule = field(default_factory=LevelSchedule)
    alpha: float = 0.5
    ssc_offset: int = 1
    ssc_patch_radius: int = 1


def register_level(fixed: Volume, fixed_desc: DescriptorVolume, warped: Volume, level: Level,
                   alpha: float, ssc_offset: int = 1, ssc_patch_radius: int = 1) -> DenseField:
    """One deformable level: returns the incremental dense field."""
    moving_desc = ssc_descriptor(warped, ssc_offset, ssc_patch_radius, keep_channels=False)
    grid = control_grid(fixed.geometry.dims, level.spacing)
    labels = label_set(level.radius, level.quant)
    costs = node_costs(fixed_desc, moving_desc, grid, labels, level.patch_radius)
    tree = build_mst(fixed, grid, level.patch_radius)
    sel = regularize_mst(costs, tree, alpha, labels)
    cf = ControlField(grid, labels[sel].reshape(grid.shape + (3,)))
    return upsample_field(cf, fixed.geometry)


def register_deform(fixed: Volume, moving: Volume, schedule: LevelSchedule | None = None,
                    alpha: float = 0.5, ssc_offset: int = 1, ssc_patch_radius: int = 1) -> DenseField:
    """Multi-level deformable registration of ``moving`` (already on the fixed grid).

    Returns the accumulated pull-back field on the fixed grid: the registered
    image is ``warp_volume(moving, field)``.
    """
    schedule = schedule or LevelSchedule()
    if moving.geometry.dims != fixed.geometry.dims:
        raise ValueError("moving must be resampled onto the fixed grid first")
    fixed_desc = ssc_descriptor(fixed, ssc_offset, ssc_patch_radius, keep_channels=False)
    acc = DenseField.zeros(fixed.geometry)
    on_fixed = Volume(fixed.geometry, moving.data)
    for i, level in enumerate(schedule.levels):
        warped = warp_volume(on_fixed, acc) if i else on_fixed
        inc = register_level(fixed, fixed_desc, warped, level, alpha, ssc_offset, ssc_patch_radius)
        acc = compose(acc, inc)
        log.debug("deform level %d %s: mean |u| = %.3f", i, level, float(acc.magnitude().mean()))
    return acc
