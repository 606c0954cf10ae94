import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from demblind.errors import RasterDimensionError, RasterFormatError, RasterReadError
from demblind.raster import (PredictorVector, RasterTile, block_downsample, extract_patches,
                             load_raster, patch_is_reliable, save_raster)


def write_raw(path, values, meta):
    np.asarray(values, dtype="<f4").tofile(path)
    (path.parent / (path.name + ".json")).write_text(json.dumps(meta))


# -- types --------------------------------------------------------------------

def test_tile_invariants():
    with pytest.raises(ValueError):
        RasterTile(np.zeros((0, 3)), 30.0)
    with pytest.raises(ValueError):
        RasterTile(np.zeros((2, 2)), 0.0)
    with pytest.raises(ValueError):
        RasterTile(np.array([[1.0, np.inf]]), 30.0)
    t = RasterTile(np.array([[1.0, -9999.0]]), 30.0)
    assert t.valid_mask().tolist() == [[True, False]]
    with pytest.raises(ValueError):
        t.values[0, 0] = 3.0


def test_predictor_requires_positive_nstk():
    with pytest.raises(ValueError):
        PredictorVector(0.0, 100.0)


# -- I/O ----------------------------------------------------------------------

def test_ascii_grid_small(tmp_path):
    p = tmp_path / "a.asc"
    p.write_text("ncols 2\nnrows 2\nxllcorner 0\nyllcorner 0\ncellsize 30\n"
                 "NODATA_value -9999\n1 2\n3 -9999\n")
    t = load_raster(p)
    assert (t.nrows, t.ncols, t.cell_size) == (2, 2, 30.0)
    assert t.values[1, 1] == -9999 and not t.valid_mask()[1, 1]


def test_raw_f32_dimensions(tmp_path):
    p = tmp_path / "x.f32"
    write_raw(p, np.arange(12), {"nrows": 3, "ncols": 4, "cell_size_m": 30, "nodata": -9999})
    t = load_raster(p, "raw_f32")
    assert (t.nrows, t.ncols) == (3, 4)
    assert t.values[2, 3] == 11
    q = tmp_path / "y.f32"
    write_raw(q, np.arange(11), {"nrows": 3, "ncols": 4, "cell_size_m": 30, "nodata": -9999})
    with pytest.raises(RasterDimensionError):
        load_raster(q, "raw_f32")


def test_distinct_errors(tmp_path):
    with pytest.raises(RasterReadError):
        load_raster(tmp_path / "missing.asc")
    bad = tmp_path / "bad.asc"
    bad.write_text("ncols 2\nnrows two\ncellsize 30\n1 2\n")
    with pytest.raises(RasterFormatError):
        load_raster(bad)
    short = tmp_path / "short.asc"
    short.write_text("ncols 2\nnrows 2\ncellsize 30\n1 2 3\n")
    with pytest.raises(RasterDimensionError):
        load_raster(short)
    noside = tmp_path / "n.f32"
    np.zeros(4, "<f4").tofile(noside)
    with pytest.raises(RasterReadError):
        load_raster(noside, "raw_f32")
    with pytest.raises(ValueError):
        load_raster(bad, "geotiff")


@pytest.mark.parametrize("fmt", ["ascii_grid", "raw_f32"])
def test_save_load_roundtrip(tmp_path, fmt):
    v = np.arange(20, dtype=float).reshape(4, 5) * 0.5
    v[1, 2] = -9999
    t = RasterTile(v, 90.0, xll=10.0, yll=20.0)
    p = tmp_path / "r"
    save_raster(t, p, fmt)
    back = load_raster(p, fmt)
    np.testing.assert_allclose(back.values, v)
    assert back.cell_size == 90.0 and back.nodata == -9999
    assert not list(tmp_path.glob("*.tmp"))


# -- downsampling ---------------------------------------------------------------

def test_downsample_examples():
    t = RasterTile(np.full((6, 6), 5.0), 30.0)
    d = block_downsample(t, 3)
    assert d.cell_size == 90.0 and np.all(d.values == 5.0) and d.values.shape == (2, 2)
    assert block_downsample(RasterTile([[1, 2], [3, 4]], 1.0), 2).values[0, 0] == 2.5
    assert block_downsample(t, 1) is t
    with pytest.raises(ValueError):
        block_downsample(t, 0)
    with pytest.raises(ValueError):
        block_downsample(t, 7)


def test_downsample_nodata_majority():
    v = np.array([[1.0, -9999], [-9999, -9999]])
    assert block_downsample(RasterTile(v, 1.0), 2).values[0, 0] == -9999
    v = np.array([[1.0, 3.0], [-9999, -9999]])
    assert block_downsample(RasterTile(v, 1.0), 2).values[0, 0] == 2.0


@settings(max_examples=30)
@given(st.integers(1, 4), st.integers(1, 5), st.integers(1, 5),
       st.floats(-1e3, 1e3), st.integers(0, 2 ** 32 - 1))
def test_downsample_preserves_mean(f, br, bc, offset, seed):
    v = np.random.default_rng(seed).normal(offset, 10.0, (br * f, bc * f))
    d = block_downsample(RasterTile(v, 1.0), f)
    assert d.values.mean() == pytest.approx(v.mean(), rel=1e-9, abs=1e-9)


# -- patches ----------------------------------------------------------------------

def test_extract_grid_counts():
    dem = RasterTile(np.random.default_rng(0).normal(size=(33, 33)), 30.0)
    qa = RasterTile(np.full((33, 33), 6.0), 30.0)
    ps = extract_patches(dem, qa, 5, 10000)
    assert len(ps) == 9
    assert extract_patches(RasterTile(np.zeros((10, 10)), 1.0),
                           RasterTile(np.ones((10, 10)), 1.0)) == []
    p = ps[4]
    assert p.tile_position == (16, 16) and p.half_size == 5 and len(p.increments) == 120
    win = dem.values[11:22, 11:22]
    np.testing.assert_allclose(p.increments, np.delete(win.ravel(), 60) - win[5, 5])
    assert p.predictor.z == pytest.approx(win.mean())
    with pytest.raises(ValueError):
        extract_patches(dem, RasterTile(np.ones((3, 3)), 1.0))


def test_extract_skips_nodata_and_unreliable():
    v = np.zeros((22, 22))
    v[3, 3] = -9999
    qa = np.full((22, 22), 4.0)
    qa[15, 2] = 9.0  # ratio 9/4 > 2 in the bottom-left window
    qa[2, 15] = -1  # flagged value in the top-right window
    ps = extract_patches(RasterTile(v, 1.0), RasterTile(qa, 1.0), 5)
    assert [p.tile_position for p in ps] == [(16, 16)]
    assert len(extract_patches(RasterTile(v, 1.0), RasterTile(qa, 1.0), 5,
                               require_reliable=False)) == 3


def test_extract_max_count_and_disjoint():
    dem = RasterTile(np.zeros((55, 55)), 1.0)
    qa = RasterTile(np.ones((55, 55)), 1.0)
    ps = extract_patches(dem, qa, 2, max_count=40)
    assert len(ps) == 40
    cells = set()
    for p in ps:
        r, c = p.tile_position
        win = {(r + i, c + j) for i in range(-2, 3) for j in range(-2, 3)}
        assert not cells & win
        cells |= win


@pytest.mark.parametrize("window,ok", [([[5, 5], [5, -1]], False), ([[3, 7]], False),
                                       ([[5, 9]], True), ([[0, 1]], False)])
def test_patch_reliability(window, ok):
    assert patch_is_reliable(window) is ok


@given(st.lists(st.floats(0.5, 100), min_size=4, max_size=25), st.floats(0.01, 100))
def test_reliability_scale_invariant(vals, c):
    w = np.array(vals)
    assert patch_is_reliable(w) == patch_is_reliable(w * c) or \
        abs(w.max() / w.min() - 2.0) < 1e-9
