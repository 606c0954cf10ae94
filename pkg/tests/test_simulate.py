import json

import numpy as np
import pytest

from demblind.raster import extract_patches
from demblind.simulate import (EQ16, SimulationConfig, simulate_tile, simulate_tiles,
                               true_noise, write_simulation)

SMALL = SimulationConfig(n_tiles=2, sites_per_side=2, site_size=2)


def test_config_validation():
    with pytest.raises(ValueError):
        SimulationConfig(texture_ratio_range=(0.0, 1.0))
    with pytest.raises(ValueError):
        SimulationConfig(nstk_range=(0, 5))
    assert SimulationConfig().n_patches == 3072


def test_tile_layout_and_predictors():
    dem, qa, info = simulate_tile(SMALL, seed=1, tile=0)
    assert dem.values.shape == (44, 44) and qa.values.shape == (44, 44)
    assert 0.4 <= info["hurst"] <= 0.8
    patches = extract_patches(dem, qa, 5)
    assert len(patches) == 16
    site = info["sites"][0]
    p = patches[0]
    assert p.predictor.n_stk == site["nstk"]
    assert abs(p.predictor.z - site["z"]) <= SMALL.z_jitter + 1e-9


def test_truth_uses_published_models():
    se, sc = true_noise(SimulationConfig(), [1], [0.0])
    assert se[0] == pytest.approx(EQ16[1][0] + EQ16[1][1])
    assert sc[0] == pytest.approx(0.1937)


def test_seed_determinism(tmp_path):
    a, ta = simulate_tiles(SMALL, seed=1)
    b, tb = simulate_tiles(SMALL, seed=1)
    c, _ = simulate_tiles(SMALL, seed=2)
    for (d1, q1), (d2, q2) in zip(a, b):
        np.testing.assert_array_equal(d1.values, d2.values)
        np.testing.assert_array_equal(q1.values, q2.values)
    assert ta == tb
    assert not np.array_equal(a[0][0].values, c[0][0].values)
    files = write_simulation(tmp_path / "x", a, ta)
    assert len(files) == 5
    truth = json.loads((tmp_path / "x" / "truth.json").read_text())
    assert truth["variance_model"]["model_kind"] == "full_quadratic"


def test_pure_noise_window_variance():
    # uncorrelated noise: the unbiased window variance has expectation sigma_e2
    cfg = SimulationConfig(n_tiles=1, sites_per_side=4, texture_ratio_range=(0.0, 0.0),
                           variance_model=("constant", (4.0,)),
                           corr_model=("constant", (1e-4,)))
    dem, qa, _ = simulate_tile(cfg, seed=11, tile=0)
    n = 11
    v = dem.values.reshape(16, n, 16, n).transpose(0, 2, 1, 3).reshape(256, n * n)
    wvar = v.var(axis=1, ddof=1)
    se = 4.0 * np.sqrt(2.0 / (n * n - 1)) / np.sqrt(len(wvar))
    assert abs(wvar.mean() - 4.0) < 4 * se
