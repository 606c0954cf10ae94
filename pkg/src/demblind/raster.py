"""DEM and stacking-number rasters: I/O, block averaging and patch extraction.

Two on-disk formats are supported:

``ascii_grid``
    ESRI ASCII grid with ``ncols``, ``nrows``, ``xllcorner``/``xllcenter``,
    ``yllcorner``/``yllcenter``, ``cellsize`` and optional ``NODATA_value``
    header lines followed by whitespace-separated rows.
``raw_f32``
    Little-endian float32, row-major, with a JSON sidecar at ``path + ".json"``
    holding ``nrows``, ``ncols``, ``cell_size_m`` and ``nodata``.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .covmodel import patch_coords
from .errors import RasterDimensionError, RasterFormatError, RasterReadError

FORMATS = ("ascii_grid", "raw_f32")
DEFAULT_NODATA = -9999.0


@dataclass(frozen=True)
class RasterTile:
    values: np.ndarray
    cell_size: float
    nodata: float = DEFAULT_NODATA
    xll: float = 0.0
    yll: float = 0.0

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 1:
            raise ValueError(f"raster values must be a non-empty 2-D grid, got shape {v.shape}")
        if not self.cell_size > 0:
            raise ValueError(f"cell_size must be > 0, got {self.cell_size}")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        if not np.all(np.isfinite(v[self.valid_mask()])):
            raise ValueError("non-nodata raster values must be finite")

    @property
    def nrows(self) -> int:
        return self.values.shape[0]

    @property
    def ncols(self) -> int:
        return self.values.shape[1]

    def valid_mask(self) -> np.ndarray:
        v = self.values
        if np.isnan(self.nodata):
            return ~np.isnan(v)
        return (v != self.nodata) & ~np.isnan(v)


@dataclass(frozen=True)
class PredictorVector:
    n_stk: float
    z: float

    def __post_init__(self):
        if not self.n_stk > 0:
            raise ValueError(f"n_stk must be > 0, got {self.n_stk}")


@dataclass
class Patch:
    """Elevation increments of one N x N window relative to its center pixel."""

    increments: np.ndarray
    coords: np.ndarray
    predictor: PredictorVector
    tile_position: tuple[int, int]
    tile_index: int = 0
    qa_window: np.ndarray | None = field(default=None, repr=False)

    @property
    def half_size(self) -> int:
        return int(np.abs(self.coords).max())


# -- I/O ----------------------------------------------------------------------

_HEADER_KEYS = {"ncols", "nrows", "xllcorner", "yllcorner", "xllcenter", "yllcenter",
                "cellsize", "nodata_value"}


def _read_text(path: Path) -> str:
    try:
        return path.read_text()
    except (OSError, UnicodeDecodeError) as exc:
        raise RasterReadError(f"cannot read {path}: {exc}") from exc


def _load_ascii(path: Path) -> RasterTile:
    lines = _read_text(path).splitlines()
    header = {}
    i = 0
    while i < len(lines):
        parts = lines[i].split()
        if not parts:
            i += 1
            continue
        key = parts[0].lower()
        if key not in _HEADER_KEYS:
            break
        if len(parts) != 2:
            raise RasterFormatError(f"{path}: malformed header line {lines[i]!r}")
        try:
            header[key] = float(parts[1])
        except ValueError:
            raise RasterFormatError(f"{path}: non-numeric header value {lines[i]!r}") from None
        i += 1
    for key in ("ncols", "nrows", "cellsize"):
        if key not in header:
            raise RasterFormatError(f"{path}: missing header key {key!r}")
    ncols, nrows = header["ncols"], header["nrows"]
    if ncols != int(ncols) or nrows != int(nrows) or ncols < 1 or nrows < 1:
        raise RasterFormatError(f"{path}: invalid dimensions {nrows} x {ncols}")
    if header["cellsize"] <= 0:
        raise RasterFormatError(f"{path}: cellsize must be positive")
    try:
        data = np.array(" ".join(lines[i:]).split(), dtype=float)
    except ValueError:
        raise RasterFormatError(f"{path}: non-numeric sample in grid body") from None
    nrows, ncols = int(nrows), int(ncols)
    if data.size != nrows * ncols:
        raise RasterDimensionError(
            f"{path}: header declares {nrows}x{ncols}={nrows * ncols} samples, found {data.size}")
    half = header["cellsize"] / 2.0
    xll = header.get("xllcorner", header.get("xllcenter", half) - half)
    yll = header.get("yllcorner", header.get("yllcenter", half) - half)
    return RasterTile(data.reshape(nrows, ncols), header["cellsize"],
                      header.get("nodata_value", DEFAULT_NODATA), xll, yll)


def _load_raw(path: Path) -> RasterTile:
    side = Path(str(path) + ".json")
    try:
        meta = json.loads(_read_text(side))
    except json.JSONDecodeError as exc:
        raise RasterFormatError(f"{side}: invalid JSON sidecar: {exc}") from exc
    try:
        nrows, ncols = int(meta["nrows"]), int(meta["ncols"])
        cell = float(meta.get("cell_size_m", meta.get("cell_size")))
        nodata = float(meta.get("nodata", DEFAULT_NODATA))
    except (KeyError, TypeError, ValueError) as exc:
        raise RasterFormatError(f"{side}: incomplete sidecar: {exc}") from exc
    if nrows < 1 or ncols < 1 or not cell > 0:
        raise RasterFormatError(f"{side}: invalid dimensions or cell size")
    try:
        data = np.fromfile(path, dtype="<f4")
    except OSError as exc:
        raise RasterReadError(f"cannot read {path}: {exc}") from exc
    if data.size != nrows * ncols:
        raise RasterDimensionError(
            f"{path}: sidecar declares {nrows}x{ncols}={nrows * ncols} samples, found {data.size}")
    return RasterTile(data.astype(float).reshape(nrows, ncols), cell, nodata,
                      float(meta.get("xll", 0.0)), float(meta.get("yll", 0.0)))


def load_raster(path, format: str = "ascii_grid") -> RasterTile:
    """Read a DEM or QA raster.

    Raises
    ------
    RasterReadError
        The file is missing or unreadable.
    RasterFormatError
        The header or sidecar is malformed.
    RasterDimensionError
        The sample count disagrees with the declared dimensions.
    """
    path = Path(path)
    if format not in FORMATS:
        raise ValueError(f"unknown raster format {format!r}; expected one of {FORMATS}")
    if not path.is_file():
        raise RasterReadError(f"no such raster file: {path}")
    return _load_ascii(path) if format == "ascii_grid" else _load_raw(path)


def _atomic_write(path: Path, data: bytes):
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def save_raster(tile: RasterTile, path, format: str = "ascii_grid", fmt: str = "%.6f"):
    """Write ``tile`` atomically in one of the supported formats."""
    path = Path(path)
    if format == "ascii_grid":
        rows = [" ".join(fmt % x for x in row) for row in tile.values]
        head = (f"ncols {tile.ncols}\nnrows {tile.nrows}\nxllcorner {tile.xll}\n"
                f"yllcorner {tile.yll}\ncellsize {tile.cell_size}\n"
                f"NODATA_value {tile.nodata}\n")
        _atomic_write(path, (head + "\n".join(rows) + "\n").encode())
    elif format == "raw_f32":
        _atomic_write(path, tile.values.astype("<f4").tobytes())
        meta = {"nrows": tile.nrows, "ncols": tile.ncols, "cell_size_m": tile.cell_size,
                "nodata": tile.nodata, "xll": tile.xll, "yll": tile.yll}
        _atomic_write(Path(str(path) + ".json"), json.dumps(meta).encode())
    else:
        raise ValueError(f"unknown raster format {format!r}")


# -- resampling and patches ---------------------------------------------------

def block_downsample(tile: RasterTile, factor: int) -> RasterTile:
    """Average non-overlapping ``factor x factor`` blocks.

    Trailing rows and columns that do not fill a block are dropped. A block
    with more than half of its cells missing becomes nodata.
    """
    if not isinstance(factor, (int, np.integer)) or factor < 1:
        raise ValueError(f"factor must be a positive integer, got {factor!r}")
    if tile.nrows < factor or tile.ncols < factor:
        raise ValueError(f"tile {tile.nrows}x{tile.ncols} smaller than factor {factor}")
    if factor == 1:
        return tile
    nr, nc = tile.nrows // factor, tile.ncols // factor
    v = tile.values[:nr * factor, :nc * factor]
    m = tile.valid_mask()[:nr * factor, :nc * factor]
    vals = np.where(m, v, 0.0).reshape(nr, factor, nc, factor).sum(axis=(1, 3))
    cnt = m.reshape(nr, factor, nc, factor).sum(axis=(1, 3))
    with np.errstate(invalid="ignore", divide="ignore"):
        out = vals / cnt
    out[cnt * 2 < factor * factor] = tile.nodata
    return RasterTile(out, tile.cell_size * factor, tile.nodata, tile.xll, tile.yll)


def patch_is_reliable(window) -> bool:
    """Reject windows with non-positive stacking numbers or max/min > 2."""
    w = np.asarray(window, dtype=float)
    if w.size == 0 or not np.all(np.isfinite(w)) or np.any(w <= 0):
        return False
    return bool(w.max() <= 2.0 * w.min())


def extract_patches(dem: RasterTile, qa: RasterTile, half_size: int = 5,
                    max_count: int = 10000, tile_index: int = 0,
                    require_reliable: bool = True) -> list[Patch]:
    """Cut non-overlapping ``N x N`` patches on a regular grid.

    The grid starts at the top-left pixel with stride ``N = 2 * half_size + 1``.
    Windows touching nodata in either raster are skipped, and so are windows
    failing :func:`patch_is_reliable` when ``require_reliable``. If more than
    ``max_count`` windows survive, an evenly spaced subset is kept.
    """
    if (dem.nrows, dem.ncols) != (qa.nrows, qa.ncols):
        raise ValueError(f"DEM {dem.nrows}x{dem.ncols} and QA {qa.nrows}x{qa.ncols} differ")
    if half_size < 2:
        raise ValueError("half_size must be >= 2")
    n = 2 * half_size + 1
    coords = patch_coords(half_size)
    center = half_size * n + half_size
    keep = np.ones(n * n, dtype=bool)
    keep[center] = False
    dmask = dem.valid_mask()
    qmask = qa.valid_mask()
    out = []
    for r0 in range(0, dem.nrows - n + 1, n):
        for c0 in range(0, dem.ncols - n + 1, n):
            sl = (slice(r0, r0 + n), slice(c0, c0 + n))
            if not (dmask[sl].all() and qmask[sl].all()):
                continue
            qw = qa.values[sl]
            if require_reliable and not patch_is_reliable(qw):
                continue
            if qw.mean() <= 0:
                continue
            w = dem.values[sl].ravel()
            inc = w[keep] - w[center]
            pred = PredictorVector(float(np.mean(qw)), float(np.mean(w)))
            out.append(Patch(inc, coords, pred, (r0 + half_size, c0 + half_size),
                             tile_index, np.array(qw)))
    if len(out) > max_count:
        idx = np.unique(np.linspace(0, len(out) - 1, max_count).round().astype(int))
        out = [out[i] for i in idx]
    return out
