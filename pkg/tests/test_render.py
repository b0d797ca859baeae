import io

import numpy as np
import pytest
from PIL import Image

from ctatlas.fields import DenseField
from ctatlas.render import (cell_color, checkerboard_pixels, extract_slice, heatmap_colors, label_overlay_pixels,
                            montage_pixels, png_bytes, render_checkerboard_deformation, render_montage,
                            render_variance_heatmap, window_to_uint8)
from ctatlas.volume import Geometry, Volume


def test_window_endpoints():
    np.testing.assert_array_equal(window_to_uint8(np.array([-160.0, 240.0, -1000.0, 40.0])), [0, 255, 0, 128])
    with pytest.raises(ValueError):
        window_to_uint8(np.zeros(2), (5, 5))


def test_montage_width_and_png(tmp_path, rng):
    g = Geometry((10, 8, 6))
    vols = [Volume(g, rng.normal(size=g.dims) * 100) for _ in range(3)]
    px = montage_pixels(vols, "axial")
    assert px.shape == (8, 30)
    data = render_montage(vols, "coronal", path=tmp_path / "m.png")
    img = Image.open(io.BytesIO(data))
    assert img.size == (30, 6)
    assert (tmp_path / "m.png").read_bytes() == data == render_montage(vols, "coronal")
    with pytest.raises(ValueError):
        montage_pixels([vols[0], Volume.from_array(np.zeros((3, 3, 3)))])
    with pytest.raises(ValueError):
        extract_slice(vols[0].data, "oblique", 0.5)


def test_kidney_brighter_than_background(atlas_target):
    vol, lab = atlas_target
    idx = np.argwhere(lab.data == 2).mean(0).round().astype(int)
    frac = idx[2] / (vol.geometry.dims[2] - 1)
    px = montage_pixels([vol], "axial", frac)
    ny = vol.geometry.dims[1]
    kidney = int(px[ny - 1 - idx[1], idx[0]])
    assert kidney > int(px[0, 0])
    assert kidney > np.median(px)


def test_heatmap_ramp():
    np.testing.assert_array_equal(heatmap_colors(np.zeros((2, 2)), 1.0), np.tile([255, 255, 0], (2, 2, 1)))
    np.testing.assert_array_equal(heatmap_colors(np.array([4.0, 2.0, 9.0]), 4.0),
                                  [[255, 0, 0], [255, 128, 0], [255, 0, 0]])
    with pytest.raises(ValueError):
        heatmap_colors(np.zeros(2), 0.0)
    g = Geometry((4, 4, 4))
    zero = render_variance_heatmap(Volume(g, np.zeros(g.dims)))
    rgb = np.asarray(Image.open(io.BytesIO(zero)))
    assert np.all(rgb == [255, 255, 0])


def test_regular_checkerboard_for_zero_field():
    g = Geometry((32, 24, 5))
    px = checkerboard_pixels(DenseField.zeros(g), 2, 2, 8)
    assert px.shape == (24, 32, 3)
    for r in range(24):
        for c in range(32):
            assert tuple(px[r, c]) == cell_color(c // 8, r // 8)


def test_shifted_checkerboard_is_translated():
    g = Geometry((32, 24, 5))
    base = checkerboard_pixels(DenseField.zeros(g), 2, 2, 8)
    shift = DenseField(g, np.broadcast_to([3.0, 2.0, 0.0], g.dims + (3,)))
    moved = checkerboard_pixels(shift, 2, 2, 8)
    # pixel (r, c) shows the cell of (r + 2, c + 3)
    np.testing.assert_array_equal(moved[:-2, :-3], base[2:, 3:])


def test_cell_colours_are_pure_and_distinct():
    assert cell_color(3, 4) == cell_color(3, 4)
    assert len({cell_color(c, r) for c in range(4) for r in range(4)}) == 16


def test_checkerboard_validation(tmp_path):
    g = Geometry((8, 8, 8))
    u = DenseField.zeros(g)
    with pytest.raises(ValueError):
        checkerboard_pixels(u, 3, 0)
    with pytest.raises(ValueError):
        checkerboard_pixels(u, 2, 8)
    with pytest.raises(ValueError):
        checkerboard_pixels(u, 2, 0, 0)
    assert render_checkerboard_deformation(u, path=tmp_path / "c.png") == (tmp_path / "c.png").read_bytes()


def test_png_is_deterministic_and_overlay_marks_edges():
    px = np.arange(12, dtype=np.uint8).reshape(3, 4)
    assert png_bytes(px) == png_bytes(px.copy())
    g = Geometry((6, 6, 3))
    from ctatlas.volume import LabelMap
    lab = np.zeros(g.dims, dtype=np.int16)
    lab[2:4, 2:4, :] = 2
    rgb = label_overlay_pixels(Volume(g, np.zeros(g.dims)), LabelMap(g, lab))
    assert (rgb == [255, 0, 0]).all(-1).any()
