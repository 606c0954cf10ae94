"""Iterative blind estimation over many DEM patches.

One iteration runs four stages:

1. Texture fit per patch, with the noise parameters taken from the current
   regression models (or from the per-patch initializer on iteration 1).
2. Texture-informative (TI) classification and Hurst interpolation. Patches
   with ``sigma_x2 / sigma_e2 > sn_ratio_ti`` keep their own Hurst estimate,
   and every other patch gets an inverse-distance interpolation of the TI
   values from the same tile.
3. Homogeneity indexing and grouping of noise-informative (NI) patches in
   weighted predictor space, followed by a joint fit per group.
4. A regression of the group estimates on ``(N_stk, Z)``. Its predictions
   become the per-patch noise parameters for the next iteration.

The variance pass runs first with the correlation width fixed. The
correlation-width pass follows with the variance fixed at the refreshed
model predictions.
"""

from __future__ import annotations

import logging
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .covmodel import SHAPES, NoiseParams, Theta
from .errors import DegenerateModelError, ModelInestimableError, UnboundedCRLBError
from .likelihood import (SIGMA_CORR2_BOUNDS, GroupEstimate, combine_crlb, crlb_from_fim,
                         estimate_group, estimate_texture, fisher_information,
                         initial_noise_variance)
from .raster import Patch, PredictorVector, RasterTile, extract_patches
from .regression import (ALL_MODELS, LowSignificanceWarning, ModelFit, ModelType,
                         predict_many, select_model)

logger = logging.getLogger(__name__)

TARGET_OF = {"variance": "sigma_e2", "corr_width": "sigma_corr2"}
HURST_FALLBACK = 0.5
SIGMA_BAR_FALLBACK = 0.25
_MIN_SIGMA_E2 = 1e-6


@dataclass(frozen=True)
class PipelineConfig:
    patch_half_size: int = 5
    r_ha_threshold: float = 0.125
    group_size_cap: int = 15
    sn_ratio_ti: float = 2.0
    predictor_weights: tuple[float, float] = (1.0, 0.01)
    max_iterations: int = 15
    shepard_power: float = 2.0
    shape: str = "gaussian"
    max_patches_per_tile: int = 10000
    t_min: float = 10.0
    convergence_tol: float = 0.01
    m_exponent: str = "both"
    initial_sigma_corr2: float = 0.25
    sigma_bar_floor: float = 1e-3
    n_jobs: int = 1

    def __post_init__(self):
        for name in ("r_ha_threshold", "sn_ratio_ti", "shepard_power", "t_min",
                     "convergence_tol", "initial_sigma_corr2", "sigma_bar_floor"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if self.group_size_cap < 1 or self.max_iterations < 1 or self.patch_half_size < 2:
            raise ValueError("group_size_cap and max_iterations must be >= 1, patch_half_size >= 2")
        if len(self.predictor_weights) != 2 or min(self.predictor_weights) <= 0:
            raise ValueError("predictor_weights must be two positive numbers")
        if self.shape not in SHAPES:
            raise ValueError(f"shape must be one of {SHAPES}")
        if str(self.m_exponent) not in ("1", "2", "both"):
            raise ValueError("m_exponent must be 1, 2 or 'both'")
        if self.n_jobs < 1:
            raise ValueError("n_jobs must be >= 1")

    @property
    def candidates(self) -> tuple[ModelType, ...]:
        m = str(self.m_exponent)
        if m == "both":
            return ALL_MODELS
        return tuple(t for t in ALL_MODELS if t.m_exponent in (None, int(m)))


@dataclass
class NIGroup:
    patch_ids: list[int]
    cell_id: tuple[int, int]
    r_ha_combined: float
    mean_predictor: PredictorVector


@dataclass
class PipelineResult:
    variance: list[GroupEstimate]
    corr_width: list[GroupEstimate]
    diagnostics: dict
    variance_fit: ModelFit | None = None
    corr_fit: ModelFit | None = None

    def __iter__(self):
        return iter((self.variance, self.corr_width, self.diagnostics))


# -- homogeneity ----------------------------------------------------------------

def homogeneity_index(patch, theta: Theta, target: str, hurst_prior_sd: float = 0.05) -> float:
    """CRLB standard deviation of ``target`` divided by its value.

    Returns ``inf`` when the value is not positive or the reduced Fisher
    information is singular.
    """
    if target not in TARGET_OF.values():
        raise ValueError(f"unknown target {target!r}")
    s = theta.noise.sigma_e2 if target == "sigma_e2" else theta.noise.sigma_corr2
    if not s > 0:
        return float("inf")
    coords = patch.coords if hasattr(patch, "coords") else patch
    try:
        sd = crlb_from_fim(fisher_information(coords, theta), target, hurst_prior_sd)
    except (UnboundedCRLBError, DegenerateModelError):
        return float("inf")
    return sd / s


# -- Hurst interpolation ----------------------------------------------------------

def _ti_arrays(ti_estimates):
    if len(ti_estimates) == 0:
        return np.zeros((0, 2)), np.zeros(0)
    pos = np.array([np.asarray(p, dtype=float) for p, _ in ti_estimates]).reshape(-1, 2)
    val = np.array([h for _, h in ti_estimates], dtype=float)
    return pos, val


def _idw(pos, val, queries, power):
    d = np.sqrt(((queries[:, None, :] - pos[None, :, :]) ** 2).sum(-1))
    out = np.empty(len(queries))
    hit = d == 0
    exact = hit.any(axis=1)
    with np.errstate(divide="ignore"):
        w = d[~exact] ** -power
    out[~exact] = (w @ val) / w.sum(axis=1)
    out[exact] = val[np.argmax(hit[exact], axis=1)]
    return out


def interpolate_hurst(ti_estimates, query_position, power: float = 2.0) -> float:
    """Shepard interpolation of TI Hurst estimates at ``query_position``.

    ``ti_estimates`` is a sequence of ``(position, hurst)`` pairs. Returns the
    fallback 0.5 when the sequence is empty.
    """
    pos, val = _ti_arrays(ti_estimates)
    if len(val) == 0:
        return HURST_FALLBACK
    return float(_idw(pos, val, np.asarray(query_position, float).reshape(1, 2), power)[0])


def _loo_residuals(pos, val, power):
    k = len(val)
    if k < 2:
        return np.zeros(0)
    res = np.empty(k)
    for i in range(k):
        m = np.arange(k) != i
        res[i] = _idw(pos[m], val[m], pos[i:i + 1], power)[0] - val[i]
    return res


def hurst_interp_error_sd(ti_estimates, power: float = 2.0) -> float:
    """Leave-one-out SD of the interpolated minus the estimated TI Hurst values.

    Fewer than three TI estimates give the fallback 0.25.
    """
    pos, val = _ti_arrays(ti_estimates)
    if len(val) < 3:
        return SIGMA_BAR_FALLBACK
    return float(np.std(_loo_residuals(pos, val, power)))


# -- grouping -------------------------------------------------------------------

def weighted_distance(p1, p2, weights=(1.0, 0.01)) -> float:
    """Distance between predictors after scaling each axis by its weight."""
    d = np.array([p1.n_stk - p2.n_stk, p1.z - p2.z], dtype=float) * np.asarray(weights)
    return float(np.sqrt(d @ d))


def _combined_r(r, s):
    """Harmonic CRLB combination relative to the mean parameter value."""
    return combine_crlb(r * s) / float(np.mean(s))


def _group(predictors, r_ha, values, config):
    w = np.asarray(config.predictor_weights, dtype=float)
    u = np.array([[p.n_stk, p.z] for p in predictors], dtype=float).reshape(-1, 2) * w
    r_ha = np.asarray(r_ha, dtype=float)
    values = np.ones(len(r_ha)) if values is None else np.asarray(values, dtype=float)
    stats = {"size_cap": 0, "leftover": 0, "uninformative": 0}
    usable = np.isfinite(r_ha) & (r_ha > 0) & (values > 0)
    stats["uninformative"] = int((~usable).sum())
    if not usable.any():
        return [], stats
    cells = np.floor(u - u[usable].min(axis=0) + 1e-9).astype(int)
    groups = []
    idx = np.flatnonzero(usable)
    keys = sorted({tuple(cells[i]) for i in idx})
    by_cell = {k: [] for k in keys}
    for i in idx:
        by_cell[tuple(cells[i])].append(i)
    for key in keys:
        members = sorted(by_cell[key], key=lambda i: r_ha[i])
        cur: list[int] = []
        for i in members:
            cur.append(i)
            comb = _combined_r(r_ha[cur], values[cur])
            if comb <= config.r_ha_threshold:
                mp = PredictorVector(float(np.mean([predictors[j].n_stk for j in cur])),
                                     float(np.mean([predictors[j].z for j in cur])))
                groups.append(NIGroup(list(map(int, cur)), key, comb, mp))
                cur = []
            elif len(cur) >= config.group_size_cap:
                stats["size_cap"] += 1
                cur = []
        stats["leftover"] += len(cur)
    return groups, stats


def group_patches(patches: Sequence, per_patch_r_ha, config: PipelineConfig,
                  param_values=None) -> list[NIGroup]:
    """Greedy grouping of noise-informative patches in predictor space.

    Predictors are scaled by ``config.predictor_weights`` and binned into unit
    cells anchored at the smallest scaled predictor. Inside each cell, patches
    are taken in ascending ``r_HA`` order and accumulated until the combined
    index drops to ``r_ha_threshold``; an accumulation that reaches
    ``group_size_cap`` first is dropped. Patches with infinite ``r_HA`` are
    never grouped.

    ``param_values`` holds the current per-patch parameter values used to
    turn ``r_HA`` back into CRLBs. When omitted, all values are taken as
    equal, so the combined index reduces to ``(sum r^-2)^(-1/2)``.
    """
    preds = [p.predictor if hasattr(p, "predictor") else p for p in patches]
    return _group(preds, per_patch_r_ha, param_values, config)[0]


# -- parallel helpers -----------------------------------------------------------

def _map(func, items, n_jobs):
    if n_jobs <= 1 or len(items) < 2 * n_jobs:
        return [func(*it) for it in items]
    chunk = max(1, len(items) // (4 * n_jobs))
    with ProcessPoolExecutor(n_jobs) as ex:
        return list(ex.map(_star, [(func, it) for it in items], chunksize=chunk))


def _star(arg):
    func, it = arg
    return func(*it)


def _texture_task(patch, se, sc, shape, start):
    tex = estimate_texture(patch, NoiseParams(se, sc, shape), start)
    return tex.sigma_x2, tex.hurst, tex.converged


def _crlb_task(coords, sx, h, se, sc, shape, prior_sd):
    theta = Theta.from_values(sx, h, se, sc, shape=shape)
    try:
        fim = fisher_information(coords, theta)
    except DegenerateModelError:
        return float("inf"), float("inf")
    out = []
    for target in ("sigma_e2", "sigma_corr2"):
        try:
            out.append(crlb_from_fim(fim, target, prior_sd))
        except UnboundedCRLBError:
            out.append(float("inf"))
    return tuple(out)


def _group_task(patches, target, priors, fixed, shape, starts, target_start):
    return estimate_group(patches, target, priors, fixed, shape=shape, starts=starts,
                          target_start=target_start)


# -- the iteration ----------------------------------------------------------------

@dataclass
class _State:
    patches: list[Patch]
    nstk: np.ndarray
    z: np.ndarray
    se: np.ndarray
    sc: np.ndarray
    sx: np.ndarray = None
    h: np.ndarray = None
    h_used: np.ndarray = None
    ti: np.ndarray = None
    sigma_bar: float = SIGMA_BAR_FALLBACK
    extra: dict = field(default_factory=dict)


def _stage_texture(st: _State, config):
    n = len(st.patches)
    starts = [None] * n if st.sx is None else list(zip(st.sx, st.h))
    res = _map(_texture_task, [(st.patches[i], float(st.se[i]), float(st.sc[i]), config.shape,
                                starts[i]) for i in range(n)], config.n_jobs)
    st.sx = np.array([r[0] for r in res])
    st.h = np.array([r[1] for r in res])
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(st.se > 0, st.sx / st.se, np.inf)
    st.ti = ratio > config.sn_ratio_ti
    return int(sum(not r[2] for r in res))


def _stage_hurst(st: _State, config):
    tiles = np.array([p.tile_index for p in st.patches])
    pos = np.array([p.tile_position for p in st.patches], dtype=float).reshape(-1, 2)
    h_used = st.h.copy()
    resid, fallback_tiles = [], []
    for t in np.unique(tiles):
        m = tiles == t
        ti = m & st.ti
        non = m & ~st.ti
        if not ti.any():
            h_used[non] = HURST_FALLBACK
            fallback_tiles.append(int(t))
            continue
        if non.any():
            h_used[non] = _idw(pos[ti], st.h[ti], pos[non], config.shepard_power)
        resid.append(_loo_residuals(pos[ti], st.h[ti], config.shepard_power))
    resid = np.concatenate(resid) if resid else np.zeros(0)
    if st.ti.sum() < 3 or resid.size == 0:
        sigma_bar, fb = SIGMA_BAR_FALLBACK, True
    else:
        sigma_bar, fb = max(float(np.std(resid)), config.sigma_bar_floor), False
    st.h_used = np.clip(h_used, 0.01, 0.99)
    st.sigma_bar = sigma_bar
    return {"hurst_fallback_tiles": fallback_tiles, "sigma_bar": sigma_bar,
            "sigma_bar_fallback": fb}


def _stage_crlb(st: _State, config):
    res = _map(_crlb_task, [(p.coords, float(st.sx[i]), float(st.h_used[i]), float(st.se[i]),
                             float(st.sc[i]), config.shape, st.sigma_bar)
                            for i, p in enumerate(st.patches)], config.n_jobs)
    sd = np.array(res, dtype=float).reshape(-1, 2)
    with np.errstate(divide="ignore", invalid="ignore"):
        r_var = np.where(st.se > 0, sd[:, 0] / st.se, np.inf)
        r_corr = np.where(st.sc > 0, sd[:, 1] / st.sc, np.inf)
    return r_var, r_corr


def _pass(st: _State, kind: str, r_ha, config):
    """Group, estimate and regress one error parameter."""
    target = TARGET_OF[kind]
    values = st.se if kind == "variance" else st.sc
    fixed = st.sc if kind == "variance" else st.se
    preds = [p.predictor for p in st.patches]
    groups, stats = _group(preds, r_ha, values, config)
    tasks = []
    for g in groups:
        ids = g.patch_ids
        tasks.append(([st.patches[i] for i in ids], target,
                      [(float(st.h_used[i]), st.sigma_bar) for i in ids],
                      [float(fixed[i]) for i in ids], config.shape,
                      [(float(st.sx[i]), float(st.h_used[i])) for i in ids],
                      float(np.mean(values[ids]))))
    ests = _map(_group_task, tasks, config.n_jobs)
    stats["not_converged"] = sum(not e.converged for e in ests)
    stats["unbounded_crlb"] = sum(e.converged and not (np.isfinite(e.crlb_sd) and e.crlb_sd > 0)
                                  for e in ests)
    kept = [e for e in ests if e.converged and np.isfinite(e.crlb_sd) and e.crlb_sd > 0]
    stats["n_groups"] = len(groups)
    stats["n_accepted"] = len(kept)
    fit = None
    if kept:
        try:
            with warnings.catch_warnings(record=True) as caught:
                warnings.simplefilter("always", LowSignificanceWarning)
                fit = select_model(kept, config.candidates, config.t_min)
            stats["low_significance"] = any(issubclass(w.category, LowSignificanceWarning)
                                            for w in caught)
        except ModelInestimableError as exc:
            stats["model_error"] = str(exc)
    return kept, fit, stats


def _relative_change(a: ModelFit | None, b: ModelFit | None) -> float:
    if a is None or b is None or a.model != b.model:
        return float("inf")
    scale = np.maximum(np.abs(a.coeffs), 1e-300)
    return float(np.max(np.abs(b.coeffs - a.coeffs) / scale))


def _fit_summary(fit):
    if fit is None:
        return None
    return {"model_kind": fit.model.value, "coeffs": [float(c) for c in fit.coeffs],
            "r2": float(fit.r2), "n_used": fit.n_used, "n_outliers": fit.n_outliers}


def _coverage(ests):
    if not ests:
        return None
    n = [e.nstk for e in ests]
    z = [e.z for e in ests]
    return {"nstk": [float(min(n)), float(max(n))], "z": [float(min(z)), float(max(z))]}


def run_pipeline_on_patches(patches: Sequence[Patch], config: PipelineConfig | None = None,
                            extra_diagnostics: dict | None = None) -> PipelineResult:
    """Run the iteration on already extracted patches."""
    config = config or PipelineConfig()
    t0 = time.perf_counter()
    diag = {"status": "ok", "n_patches": len(patches), "iterations": 0, "converged": False,
            "history": []}
    diag.update(extra_diagnostics or {})
    if not patches:
        diag["status"] = "no_reliable_patches"
        return PipelineResult([], [], diag)
    nstk = np.array([p.predictor.n_stk for p in patches], dtype=float)
    z = np.array([p.predictor.z for p in patches], dtype=float)
    se0 = np.array([initial_noise_variance(p.increments, p.coords) for p in patches])
    st = _State(list(patches), nstk, z, np.maximum(se0, 0.0),
                np.full(len(patches), config.initial_sigma_corr2))
    var_ests, corr_ests, var_fit, corr_fit = [], [], None, None
    for it in range(1, config.max_iterations + 1):
        n_nc = _stage_texture(st, config)
        hdiag = _stage_hurst(st, config)
        r_var, r_corr = _stage_crlb(st, config)
        var_ests, new_var, vstats = _pass(st, "variance", r_var, config)
        if new_var is not None:
            st.se = np.maximum(predict_many(new_var, nstk, z), _MIN_SIGMA_E2)
        corr_ests, new_corr, cstats = _pass(st, "corr_width", r_corr, config)
        if new_corr is not None:
            st.sc = np.clip(predict_many(new_corr, nstk, z), *SIGMA_CORR2_BOUNDS)
        rec = {"iteration": it, "n_ti": int(st.ti.sum()), "texture_not_converged": n_nc,
               **hdiag, "variance": {**vstats, "fit": _fit_summary(new_var)},
               "corr_width": {**cstats, "fit": _fit_summary(new_corr)}}
        diag["history"].append(rec)
        diag["iterations"] = it
        logger.info("iteration %d: %d/%d variance groups, %d/%d corr groups, %s / %s", it,
                    len(var_ests), vstats["n_groups"], len(corr_ests), cstats["n_groups"],
                    new_var and new_var.model.value, new_corr and new_corr.model.value)
        if not var_ests and not corr_ests:
            diag["status"] = "no_informative_data"
            break
        change = max(_relative_change(var_fit, new_var), _relative_change(corr_fit, new_corr))
        rec["max_relative_change"] = change
        var_fit, corr_fit = new_var, new_corr
        if new_var is None or new_corr is None:
            # nothing to feed back into the next iteration
            break
        if change < config.convergence_tol:
            diag["converged"] = True
            break
    last = diag["history"][-1]
    diag.update({
        "n_ti": last["n_ti"], "sigma_bar": last["sigma_bar"],
        "sigma_bar_fallback": last["sigma_bar_fallback"],
        "hurst_fallback_tiles": last["hurst_fallback_tiles"],
        "n_groups": {"variance": len(var_ests), "corr_width": len(corr_ests)},
        "discards": {k: {d: last[k].get(d, 0) for d in
                         ("size_cap", "leftover", "uninformative", "not_converged",
                          "unbounded_crlb")} for k in ("variance", "corr_width")},
        "predictor_coverage": {"variance": _coverage(var_ests),
                               "corr_width": _coverage(corr_ests)},
        "variance_model": _fit_summary(var_fit), "corr_width_model": _fit_summary(corr_fit),
        "runtime_s": time.perf_counter() - t0,
    })
    return PipelineResult(var_ests, corr_ests, diag, var_fit, corr_fit)


def run_pipeline(tiles: Sequence[tuple[RasterTile, RasterTile]],
                 config: PipelineConfig | None = None) -> PipelineResult:
    """Extract patches from ``(dem, qa)`` pairs and run the estimation loop.

    Returns a :class:`PipelineResult`, which also unpacks as
    ``(variance_estimates, corr_width_estimates, diagnostics)``.
    """
    config = config or PipelineConfig()
    if len(tiles) == 0:
        raise ValueError("no tiles given")
    patches = []
    for t, (dem, qa) in enumerate(tiles):
        patches += extract_patches(dem, qa, config.patch_half_size,
                                   config.max_patches_per_tile, tile_index=t)
    return run_pipeline_on_patches(patches, config, {"n_tiles": len(tiles)})
