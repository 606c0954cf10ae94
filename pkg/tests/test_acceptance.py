"""Acceptance gate: ten criteria at their stated tolerances.

Each test records one PASS/FAIL line; the lines are printed in the terminal
summary (see ``conftest.py``) and, with ``-s``, as the tests run.
"""

import dataclasses
import math

import numpy as np
import pytest

from demblind.covmodel import (Theta, cov_derivative, jittered_cholesky, observed_cov_matrix,
                               patch_coords, sample_patch)
from demblind.likelihood import (PatchLikelihood, combine_crlb, crlb, estimate_sigma_e2,
                                 fisher_information)
from demblind.pipeline import PipelineConfig, group_patches, homogeneity_index, run_pipeline
from demblind.raster import Patch, PredictorVector
from demblind.regression import (ModelFit, ModelType, elevation_contribution,
                                 fit_from_coefficients, fit_robust_wls, generalized_r2, predict,
                                 reduce_at_elevation, select_model)
from demblind.simulate import SimulationConfig, simulate_tiles

from conftest import random_theta
from synth import EQ16, EQ17, group_estimates

RESULTS: list[str] = []
C7, C11 = patch_coords(3), patch_coords(5)


def record(label, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] {label}: {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


# -- 1 -------------------------------------------------------------------------------

def _primitive_draws(coords, th, n, rng):
    """Increments built from the fBm and noise-field definitions directly.

    fBm is anchored at the center pixel, so B(0) = 0 and
    cov(B(x), B(y)) = s/2 (|x|^2H + |y|^2H - |x-y|^2H). The noise field
    covers the center too, and the observed increment is
    B(x) + e(x) - e(0).
    """
    sx, h, se, sc = th.as_array()
    x = np.asarray(coords, float)
    r2 = np.sum(x ** 2, axis=1)
    d2 = np.sum((x[:, None] - x[None]) ** 2, axis=2)
    fbm = 0.5 * sx * (r2[:, None] ** h + r2[None, :] ** h - np.where(d2 > 0, d2, 1) ** h
                      * (d2 > 0))
    allx = np.vstack([np.zeros((1, 2)), x])
    dd = np.sqrt(np.sum((allx[:, None] - allx[None]) ** 2, axis=2))
    rho = np.exp(-dd ** 2 / (2 * sc)) if th.noise.shape == "gaussian" else np.exp(-dd / np.sqrt(sc))
    b = np.linalg.cholesky(fbm + 1e-12 * np.eye(len(x))) @ rng.standard_normal((len(x), n))
    e = np.linalg.cholesky(se * rho + 1e-12 * np.eye(len(allx))) @ rng.standard_normal((len(allx), n))
    return b + e[1:] - e[:1]


def test_c1_covariance_matches_empirical():
    rng = np.random.default_rng(2024)
    n = 100_000
    worst = 0.0
    for _ in range(5):
        th = random_theta(rng)
        r = observed_cov_matrix(C7, th)
        x = _primitive_draws(C7, th, n, rng)
        emp = x @ x.T / n
        se = np.sqrt((r ** 2 + np.outer(np.diag(r), np.diag(r))) / n)
        worst = max(worst, float(np.max(np.abs(emp - r) / se)))
    record("C1 covariance vs 1e5 draws", worst <= 4.0,
           f"max |emp - R| = {worst:.2f} SE over 5 thetas (limit 4)")


# -- 2 -------------------------------------------------------------------------------

def test_c2_derivatives_match_finite_differences():
    rng = np.random.default_rng(7)
    worst = 0.0
    names = ("sigma_x2", "hurst", "sigma_e2", "sigma_corr2")
    for i in range(20):
        th = random_theta(rng, "gaussian" if i % 2 == 0 else "exponential")
        for name, v in zip(names, th.as_array()):
            h = 1e-5 * max(1.0, abs(v)) if name != "hurst" else 1e-6
            fd = (observed_cov_matrix(C11, th.replace(**{name: v + h}))
                  - observed_cov_matrix(C11, th.replace(**{name: v - h}))) / (2 * h)
            an = cov_derivative(C11, th, name)
            worst = max(worst, float(np.max(np.abs(an - fd)) / np.max(np.abs(an))))
    record("C2 derivatives vs central differences", worst <= 1e-4,
           f"max relative deviation {worst:.2e} over 20 thetas (limit 1e-4)")


# -- 3 -------------------------------------------------------------------------------

def test_c3_fim_valid():
    th = Theta.from_values(1.5, 0.6, 2.0, 0.5)
    fim = fisher_information(C11, th)
    sym = np.array_equal(fim, fim.T)
    psd = np.linalg.eigvalsh(fim).min() >= -1e-8 * np.trace(fim)
    p = th.as_array()
    scores = np.array([PatchLikelihood(sample_patch(C11, th, s), C11).value_and_grad(p)[1]
                       for s in range(10_000)])
    emp = np.cov(scores, rowvar=False, bias=True)
    rel = float(np.linalg.norm(emp - fim) / np.linalg.norm(fim))
    record("C3 FIM symmetry/PSD/score covariance", sym and psd and rel < 0.05,
           f"symmetric={sym} psd={psd} frobenius rel err {rel:.3f} (limit 0.05)")


# -- 4 -------------------------------------------------------------------------------

def test_c4_crlb_anchor():
    r = homogeneity_index(C11, Theta.from_values(0.0, 0.5, 1.0, 0.25), "sigma_e2")
    record("C4 CRLB anchor", abs(r / 0.129 - 1) <= 0.05, f"r_HA = {r:.4f} (0.129 +- 5%)")


# -- 5 -------------------------------------------------------------------------------

def test_c5_estimator_calibration():
    th = Theta.from_values(0.4, 0.5, 4.0, 0.25)
    est = np.array([
        estimate_sigma_e2(Patch(sample_patch(C11, th, s), C11, PredictorVector(5, 0.0), (0, 0)),
                          (0.5, 0.05), 0.25).theta_hat.noise.sigma_e2 for s in range(500)])
    bound = crlb(C11, th, "sigma_e2", 0.05)
    ratio = est.std(ddof=1) / bound
    bias = abs(np.median(est) - 4.0) / 4.0
    record("C5 estimator calibration", abs(ratio - 1) <= 0.15 and bias < 0.05,
           f"SD/CRLB = {ratio:.3f} (1 +- 0.15), median bias {100 * bias:.2f}% (< 5%)")


# -- 6 -------------------------------------------------------------------------------

def test_c6a_group_of_equal_patches():
    s = 0.37
    errs = [abs(combine_crlb([s] * k) / (s / math.sqrt(k)) - 1) for k in range(1, 16)]
    # the grouping stage uses the same combination
    g = group_patches([PredictorVector(5, 100)] * 4, [0.24] * 4, PipelineConfig())
    ok = max(errs) < 1e-12 and g[0].r_ha_combined == pytest.approx(0.12, rel=1e-12)
    record("C6a k equal patches -> SD/sqrt(k)", ok, f"max rel err {max(errs):.1e} for k=1..15")


def test_c6b_two_patch_printed_formula():
    s1, s2 = 0.3, 0.7
    got = combine_crlb([s1, s2])
    printed = s1 * s2 / (s1 + s2)
    ok = got == pytest.approx(printed, rel=1e-9)
    record("C6b two patches vs s1*s2/(s1+s2)", ok,
           f"combined {got:.4f} vs printed {printed:.4f}; the printed form gives s/2 for "
           f"equal patches, not s/sqrt(2)")


# -- 7 -------------------------------------------------------------------------------

def test_c7_arithmetic():
    v, c = fit_from_coefficients(*EQ16), fit_from_coefficients(*EQ17)
    checks = {
        "sigma_e(1, 0)": (math.sqrt(predict(v, PredictorVector(1, 0.0))), 5.1668, 1e-3),
        "elev(10, 4000)": (elevation_contribution(v, PredictorVector(10, 4000.0)), 17.61, 0.01),
        "reduced a": (reduce_at_elevation(v, 234.7)[0], 1.0563, 1e-3),
        "reduced b": (reduce_at_elevation(v, 234.7)[1], 26.0031, 1e-3),
        "sigma_corr(Z=0)": (math.sqrt(predict(c, PredictorVector(5, 0.0))), 0.440, 5e-3),
        "sigma_corr(Z=5000)": (math.sqrt(predict(c, PredictorVector(5, 5000.0))), 0.8, 5e-3),
    }
    bad = [k for k, (got, want, tol) in checks.items() if abs(got - want) > tol]
    detail = ", ".join(f"{k}={got:.4f}" for k, (got, _, _) in checks.items())
    record("C7 arithmetic reproduction", not bad, detail)


# -- 8 -------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def e2e():
    cfg = SimulationConfig()
    tiles, _ = simulate_tiles(cfg, seed=20)
    return cfg, run_pipeline(tiles, PipelineConfig())


def test_c8_end_to_end_recovery(e2e):
    cfg, res = e2e
    d = res.diagnostics
    parts, ok = [f"{cfg.n_patches} patches", f"{d['iterations']} iterations"], \
        d["converged"] and d["iterations"] <= 15
    for fit, (kind, truth) in ((res.variance_fit, EQ16), (res.corr_fit, EQ17)):
        err = np.abs(np.asarray(fit.coeffs) / np.asarray(truth) - 1) \
            if fit.model.value == kind else np.array([np.inf])
        ok &= fit.model.value == kind and bool(np.all(err < 0.15))
        parts.append(f"{fit.model.value} max coef err {100 * err.max():.1f}%")
    parts.append(f"{d['runtime_s']:.0f} s")
    record("C8 end-to-end synthetic recovery", ok, ", ".join(parts))


# -- 9 -------------------------------------------------------------------------------

def test_c9_gross_outliers():
    ests = group_estimates(3000, *EQ16, seed=31)
    clean = fit_robust_wls(ests, "full_quadratic")
    rng = np.random.default_rng(32)
    hit = rng.choice(len(ests), size=30, replace=False)
    dirty = list(ests)
    for i in hit:
        dirty[i] = dataclasses.replace(dirty[i], value=dirty[i].value * 100)
    f = fit_robust_wls(dirty, "full_quadratic")
    change = float(np.max(np.abs(f.coeffs / clean.coeffs - 1)))
    flagged = float(np.mean(f.outlier_mask[hit]))
    record("C9 robustness to 1% x100 outliers", change < 0.03 and flagged >= 0.9,
           f"max coef change {100 * change:.3f}% (< 3%), flagged {100 * flagged:.0f}% (>= 90%)")


# -- 10 ------------------------------------------------------------------------------

def test_c10_regression_statistics():
    rng = np.random.default_rng(41)
    r2_const = []
    monotone = True
    for k in range(20):
        n = int(rng.integers(5, 400))
        ests = group_estimates(n, *EQ16, seed=100 + k, rel_sd=rng.uniform(0.05, 2.0))
        r2_const.append(abs(fit_robust_wls(ests, "constant").r2))
        full = fit_robust_wls(ests, "full_quadratic", reject=np.inf)
        for sub in ("inv_nstk", "z_quadratic", "constant"):
            f = fit_robust_wls(ests, sub, reject=np.inf)
            monotone &= generalized_r2(full, ests) >= generalized_r2(f, ests) - 1e-12
    t = ModelFit.from_report({"model_kind": "constant", "coeffs": [1.0293],
                              "coeff_sds": [0.0648]}).t_stats[0]
    ok = max(r2_const) < 1e-12 and monotone and abs(t - 15.88) <= 0.01
    record("C10 regression statistics", ok,
           f"max |R2(constant)| {max(r2_const):.1e}, nested monotone={monotone}, t = {t:.4f}")
