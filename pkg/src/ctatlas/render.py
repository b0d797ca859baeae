"""PNG figures: slice montages, variance heatmaps and deformation checkerboards."""
from __future__ import annotations

import colorsys
import io

import numpy as np
from PIL import Image

from .fields import DenseField
from .volume import Volume

PLANES = {"sagittal": 0, "coronal": 1, "axial": 2}
DEFAULT_WINDOW = (-160.0, 240.0)
RAMP = np.array([[255, 255, 0], [255, 128, 0], [255, 0, 0]], dtype=np.float64)


def extract_slice(data: np.ndarray, plane: str, slice_frac: float) -> np.ndarray:
    """2D slice at ``slice_frac`` of the plane-normal axis.

    Image rows run along the second remaining axis, flipped so superior and
    anterior point up; columns run along the first remaining axis.
    """
    if plane not in PLANES:
        raise ValueError(f"unknown plane {plane!r}")
    if not 0.0 <= slice_frac <= 1.0:
        raise ValueError("slice_frac must lie in [0, 1]")
    axis = PLANES[plane]
    idx = int(round(slice_frac * (data.shape[axis] - 1)))
    sl = np.take(data, idx, axis=axis)
    return sl.T[::-1]


def window_to_uint8(values: np.ndarray, window=DEFAULT_WINDOW) -> np.ndarray:
    lo, hi = window
    if not hi > lo:
        raise ValueError("window maximum must exceed its minimum")
    t = (np.asarray(values, dtype=np.float64) - lo) / (hi - lo)
    return np.rint(np.clip(t, 0.0, 1.0) * 255.0).astype(np.uint8)


def png_bytes(pixels: np.ndarray) -> bytes:
    """Encode a uint8 (H, W) or (H, W, 3) array; identical arrays give identical bytes."""
    mode = "L" if pixels.ndim == 2 else "RGB"
    buf = io.BytesIO()
    Image.fromarray(np.ascontiguousarray(pixels), mode=mode).save(buf, format="PNG", optimize=False)
    return buf.getvalue()


def _save(pixels, path):
    data = png_bytes(pixels)
    if path is not None:
        with open(path, "wb") as fh:
            fh.write(data)
    return data


def montage_pixels(volumes, plane: str = "axial", slice_frac: float = 0.5,
                   hu_window=DEFAULT_WINDOW) -> np.ndarray:
    """Tiles of each volume's slice placed side by side."""
    vols = list(volumes)
    if not vols:
        raise ValueError("need at least one volume")
    g0 = vols[0].geometry
    for v in vols[1:]:
        if v.geometry.dims != g0.dims or not v.geometry.allclose(g0):
            raise ValueError("montage volumes must share geometry")
    tiles = [window_to_uint8(extract_slice(v.data, plane, slice_frac), hu_window) for v in vols]
    return np.concatenate(tiles, axis=1)


def render_montage(volumes, plane="axial", slice_frac=0.5, hu_window=DEFAULT_WINDOW, path=None) -> bytes:
    return _save(montage_pixels(volumes, plane, slice_frac, hu_window), path)


def heatmap_colors(values: np.ndarray, vmax: float) -> np.ndarray:
    """Yellow -> orange -> red ramp over [0, vmax], clamped; uint8 RGB."""
    if not vmax > 0:
        raise ValueError("vmax must be positive")
    t = np.clip(np.asarray(values, dtype=np.float64) / vmax, 0.0, 1.0) * 2.0
    seg = np.minimum(t.astype(np.int64), 1)
    frac = (t - seg)[..., None]
    rgb = RAMP[seg] * (1.0 - frac) + RAMP[seg + 1] * frac
    return np.rint(rgb).astype(np.uint8)


def render_variance_heatmap(variance: Volume, plane="axial", slice_frac=0.5, vmax=None, path=None) -> bytes:
    sl = extract_slice(variance.data, plane, slice_frac)
    if np.any(sl < 0):
        raise ValueError("variance must be non-negative")
    if vmax is None:
        vmax = float(variance.data.max()) or 1.0
    return _save(heatmap_colors(sl, vmax), path)


def cell_color(col: int, row: int, n_hues: int = 8, n_light: int = 6) -> tuple:
    """Colour of checkerboard cell (col, row): hue by column, lightness by row."""
    h = (col % n_hues) / n_hues
    light = 0.3 + 0.5 * ((row % n_light) / max(n_light - 1, 1))
    sat = 0.9 if (col + row) % 2 == 0 else 0.6
    r, g, b = colorsys.hls_to_rgb(h, light, sat)
    return int(round(r * 255)), int(round(g * 255)), int(round(b * 255))


def checkerboard_pixels(field: DenseField, axis: int, index: int, cell_px: int = 8) -> np.ndarray:
    """Checkerboard in atlas-slice coordinates sampled at field-displaced positions.

    The slice is taken normal to ``axis``; its in-plane axes (a, b) map to
    image columns and rows, unflipped. Each pixel takes the colour of the cell
    containing its displaced position, rounded to the nearest pixel.
    """
    if axis not in (0, 1, 2):
        raise ValueError("axis must be 0, 1 or 2")
    if not 0 <= index < field.geometry.dims[axis]:
        raise ValueError("slice index out of range")
    if cell_px < 1:
        raise ValueError("cell size must be positive")
    a, b = [k for k in range(3) if k != axis]
    sl = np.take(field.data, index, axis=axis).astype(np.float64)  # (na, nb, 3)
    na, nb = sl.shape[:2]
    ia, ib = np.meshgrid(np.arange(na), np.arange(nb), indexing="ij")
    pa = np.floor(ia + sl[..., a] + 0.5).astype(np.int64)
    pb = np.floor(ib + sl[..., b] + 0.5).astype(np.int64)
    col = np.floor_divide(pa, cell_px)
    row = np.floor_divide(pb, cell_px)
    cmin, rmin = int(col.min()), int(row.min())
    lut = np.array([[cell_color(c, r) for r in range(rmin, int(row.max()) + 1)]
                    for c in range(cmin, int(col.max()) + 1)], dtype=np.uint8)
    rgb = lut[col - cmin, row - rmin]  # (na, nb, 3)
    return np.ascontiguousarray(rgb.transpose(1, 0, 2))


def render_checkerboard_deformation(field: DenseField, axis: int = 2, index: int | None = None,
                                    cell_px: int = 8, path=None) -> bytes:
    if index is None:
        index = field.geometry.dims[axis] // 2
    return _save(checkerboard_pixels(field, axis, index, cell_px), path)


def label_overlay_pixels(v: Volume, labels, plane="axial", slice_frac=0.5, hu_window=DEFAULT_WINDOW):
    """Grayscale slice with label boundaries tinted red (diagnostic)."""
    gray = window_to_uint8(extract_slice(v.data, plane, slice_frac), hu_window)
    lab = extract_slice(labels.data, plane, slice_frac)
    rgb = np.repeat(gray[..., None], 3, axis=2)
    edge = np.zeros(lab.shape, dtype=bool)
    edge[1:, :] |= lab[1:, :] != lab[:-1, :]
    edge[:, 1:] |= lab[:, 1:] != lab[:, :-1]
    rgb[edge] = (255, 0, 0)
    return rgb
