"""Synthetic DEM/QA tiles with known error models.

A tile is a grid of *sites*. Each site is a block of ``site_size x site_size``
non-overlapping patches sharing one stacking number and one nominal
elevation, the way a real DEM has spatially coherent stacking counts and
terrain height. Every patch is an independent draw of fBm terrain plus
correlated noise whose parameters follow the true regression models at the
patch predictor. The window is then shifted so its mean equals the target
elevation.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .covmodel import Theta, patch_coords, sample_patch
from .raster import RasterTile, save_raster
from .regression import fit_from_coefficients, predict_many

# published GDEM2 reproduction targets
EQ16 = ("full_quadratic", (1.0293, 25.6667, 4.8991e-7, 6.1069e-6))
EQ17 = ("z_quadratic", (0.1937, 1.7786e-8))


@dataclass(frozen=True)
class SimulationConfig:
    n_tiles: int = 3
    sites_per_side: int = 8
    site_size: int = 4
    half_size: int = 5
    nstk_range: tuple[int, int] = (1, 50)
    z_range: tuple[float, float] = (0.0, 6000.0)
    z_jitter: float = 10.0
    hurst_range: tuple[float, float] = (0.4, 0.8)
    texture_ratio_range: tuple[float, float] = (1e-3, 10.0)
    variance_model: tuple = EQ16
    corr_model: tuple = EQ17
    shape: str = "gaussian"
    cell_size: float = 90.0

    def __post_init__(self):
        if min(self.n_tiles, self.sites_per_side, self.site_size) < 1:
            raise ValueError("tile, site and patch counts must be >= 1")
        lo, hi = self.texture_ratio_range
        if lo < 0 or hi < lo or (lo == 0 and hi != 0):
            raise ValueError("texture_ratio_range must be (0, 0) or 0 < lo <= hi")
        if self.nstk_range[0] < 1 or self.nstk_range[1] < self.nstk_range[0]:
            raise ValueError("nstk_range must satisfy 1 <= lo <= hi")

    @property
    def n_patches(self) -> int:
        return self.n_tiles * (self.sites_per_side * self.site_size) ** 2


def true_noise(cfg: SimulationConfig, nstk, z):
    """True ``(sigma_e2, sigma_corr2)`` at the given predictors."""
    var = fit_from_coefficients(*cfg.variance_model)
    corr = fit_from_coefficients(*cfg.corr_model)
    return predict_many(var, nstk, z), predict_many(corr, nstk, z)


def _ratio(rng, lo, hi):
    if hi == 0:
        return 0.0
    return float(np.exp(rng.uniform(np.log(lo), np.log(hi))))


def simulate_tile(cfg: SimulationConfig, seed: int, tile: int):
    """One ``(dem, qa, info)`` triple. ``info`` records the site draws."""
    rng = np.random.default_rng([seed, tile])
    n = 2 * cfg.half_size + 1
    side = cfg.sites_per_side * cfg.site_size * n
    dem = np.empty((side, side))
    qa = np.empty((side, side))
    coords = patch_coords(cfg.half_size)
    center = cfg.half_size * n + cfg.half_size
    hurst = float(rng.uniform(*cfg.hurst_range))
    sites = []
    k = 0
    for si in range(cfg.sites_per_side):
        for sj in range(cfg.sites_per_side):
            nstk = int(rng.integers(cfg.nstk_range[0], cfg.nstk_range[1] + 1))
            z0 = float(rng.uniform(*cfg.z_range))
            sites.append({"row": si, "col": sj, "nstk": nstk, "z": z0})
            for pi in range(cfg.site_size):
                for pj in range(cfg.site_size):
                    prng = np.random.default_rng([seed, tile, k])
                    z = z0 + prng.uniform(-cfg.z_jitter, cfg.z_jitter)
                    se, sc = (float(v[0]) for v in true_noise(cfg, [nstk], [z]))
                    sx = se * _ratio(prng, *cfg.texture_ratio_range)
                    theta = Theta.from_values(sx, hurst, se, sc, shape=cfg.shape)
                    inc = sample_patch(coords, theta, prng)
                    w = np.insert(inc, center, 0.0)
                    w += z - w.mean()
                    r0 = (si * cfg.site_size + pi) * n
                    c0 = (sj * cfg.site_size + pj) * n
                    dem[r0:r0 + n, c0:c0 + n] = w.reshape(n, n)
                    qa[r0:r0 + n, c0:c0 + n] = nstk
                    k += 1
    info = {"tile": tile, "hurst": hurst, "sites": sites}
    return RasterTile(dem, cfg.cell_size), RasterTile(qa, cfg.cell_size), info


def simulate_tiles(cfg: SimulationConfig, seed: int = 0):
    """All tiles plus a JSON-ready truth record."""
    tiles, infos = [], []
    for t in range(cfg.n_tiles):
        dem, qa, info = simulate_tile(cfg, seed, t)
        tiles.append((dem, qa))
        infos.append(info)
    truth = {
        "seed": seed,
        "config": asdict(cfg),
        "variance_model": {"model_kind": cfg.variance_model[0],
                           "coeffs": list(cfg.variance_model[1])},
        "corr_width_model": {"model_kind": cfg.corr_model[0], "coeffs": list(cfg.corr_model[1])},
        "tiles": infos,
    }
    return tiles, truth


def write_simulation(out_dir, tiles, truth, format: str = "ascii_grid") -> list[Path]:
    """Write ``tile_NNN_dem``/``tile_NNN_qa`` rasters and ``truth.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ext = ".asc" if format == "ascii_grid" else ".f32"
    paths = []
    for i, (dem, qa) in enumerate(tiles):
        for kind, tile in (("dem", dem), ("qa", qa)):
            p = out / f"tile_{i:03d}_{kind}{ext}"
            save_raster(tile, p, format, fmt="%.4f" if kind == "dem" else "%g")
            paths.append(p)
    tp = out / "truth.json"
    tmp = tp.with_name(tp.name + ".tmp")
    tmp.write_text(json.dumps(truth, indent=2, sort_keys=True))
    tmp.replace(tp)
    return paths + [tp]
