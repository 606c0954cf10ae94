"""Gaussian log-likelihood of patch increments, Fisher information, CRLBs and
bounded maximum-likelihood estimators for single patches and patch groups.

Parameter order everywhere is ``(sigma_x2, hurst, sigma_e2, sigma_corr2)``.
Estimators maximize the (optionally Hurst-penalized) log-likelihood with
L-BFGS-B on rescaled variables and analytic gradients.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.linalg import lapack
from scipy.optimize import minimize

from ._backend import kernels
from .covmodel import (PARAM_NAMES, NoiseParams, Theta, geometry_for,
                       jittered_cholesky)
from .errors import DegenerateModelError, UnboundedCRLBError

logger = logging.getLogger(__name__)

SX, HQ, SE, SC = range(4)
TARGETS = {"sigma_e2": SE, "sigma_corr2": SC}

HURST_BOUNDS = (0.01, 0.99)
SIGMA_CORR2_BOUNDS = (1e-4, 4.0)
FTOL = 1e-8
GTOL = 1e-6
MAX_ITER = 500
# returned instead of +inf so the line search can back off a degenerate point
_BAD = 1e20


@dataclass
class PatchEstimate:
    theta_hat: Theta
    crlb_sd_sigma_e2: float
    crlb_sd_sigma_corr2: float
    hurst_source: str = "estimated"
    converged: bool = True
    loglik: float = float("nan")


@dataclass
class TextureEstimate:
    sigma_x2: float
    hurst: float
    converged: bool
    loglik: float


@dataclass
class GroupEstimate:
    param_kind: str  # "variance" | "corr_width"
    value: float
    crlb_sd: float
    nstk: float
    z: float
    n_patches: int
    converged: bool = True
    nuisance: np.ndarray | None = field(default=None, repr=False)

    @property
    def mean_predictor(self):
        from .raster import PredictorVector
        return PredictorVector(self.nstk, self.z)


class PatchLikelihood:
    """Log-likelihood of one increment vector as a function of the parameters."""

    def __init__(self, increments, coords, shape="gaussian"):
        self.geom = geometry_for(coords)
        self.z = np.ascontiguousarray(increments, dtype=float)
        if self.z.shape != (self.geom.n,):
            raise ValueError(f"expected {self.geom.n} increments, got {self.z.shape}")
        self.shape = shape

    def _factor(self, p):
        g = self.geom
        f, fl = g.fbm_tables(p[HQ])
        nt, dnt = g.noise_tables(p[SC], self.shape)
        cov = kernels.cov_matrix(g.r2, g.lag2, f, nt, float(p[SX]), float(p[SE]))
        chol = jittered_cholesky(cov, overwrite=True, clean=False)
        return chol, (f, fl, nt, dnt)

    def __call__(self, p) -> float:
        chol, _ = self._factor(p)
        alpha, _ = lapack.dpotrs(chol, self.z, lower=1)
        logdet = 2.0 * np.sum(np.log(np.diag(chol)))
        return -0.5 * (self.z @ alpha + logdet)

    def value_and_grad(self, p):
        g = self.geom
        chol, (f, fl, nt, dnt) = self._factor(p)
        alpha, _ = lapack.dpotrs(chol, self.z, lower=1)
        logdet = 2.0 * np.sum(np.log(np.diag(chol)))
        w, info = lapack.dpotri(chol, lower=1)
        if info != 0:
            raise DegenerateModelError(f"covariance inversion failed (info={info})")
        traces, quads = kernels.score_terms(w, alpha, g.r2, g.lag2, f, fl, nt, dnt,
                                            float(p[SX]), float(p[SE]))
        value = -0.5 * (self.z @ alpha + logdet)
        return value, 0.5 * (quads - traces)


def _params(theta: Theta) -> np.ndarray:
    return theta.as_array()


def log_likelihood(increments, coords, theta: Theta) -> float:
    """Gaussian log-likelihood of the increments, constants omitted."""
    return PatchLikelihood(increments, coords, theta.noise.shape)(_params(theta))


def fisher_information(coords, theta: Theta) -> np.ndarray:
    """4 x 4 Fisher information ``0.5 tr(R^-1 dR_i R^-1 dR_j)``."""
    geom = geometry_for(coords)
    p = _params(theta)
    cov = geom.cov(*p, theta.noise.shape)
    chol = jittered_cholesky(cov, overwrite=True, clean=False)
    derivs = geom.derivatives(*p, theta.noise.shape)
    w, info = lapack.dpotri(chol, lower=1)
    if info != 0:
        raise DegenerateModelError(f"covariance inversion failed (info={info})")
    w = np.tril(w)
    w += np.tril(w, -1).T
    m = [w @ d for d in derivs]
    fim = np.empty((4, 4))
    for i in range(4):
        for j in range(i + 1):
            fim[i, j] = fim[j, i] = 0.5 * np.sum(m[i] * m[j].T)
    return fim


def crlb_from_fim(fim: np.ndarray, target: str, hurst_prior_sd: float) -> float:
    """CRLB standard deviation of ``target`` from a full 4 x 4 FIM.

    The other error parameter is treated as known, and a Gaussian prior with
    standard deviation ``hurst_prior_sd`` is added on the Hurst exponent.
    """
    if target not in TARGETS:
        raise ValueError(f"target must be one of {tuple(TARGETS)}, got {target!r}")
    if not hurst_prior_sd > 0:
        raise ValueError("hurst_prior_sd must be > 0")
    keep = [SX, HQ, TARGETS[target]]
    red = fim[np.ix_(keep, keep)].copy()
    red[1, 1] += hurst_prior_sd ** -2.0
    d = np.diag(red)
    if not np.all(np.isfinite(red)) or np.any(d <= 0):
        raise UnboundedCRLBError(f"no information on {target}")
    s = 1.0 / np.sqrt(d)
    scaled = red * np.outer(s, s)
    try:
        c = np.linalg.cholesky(scaled)
    except np.linalg.LinAlgError:
        raise UnboundedCRLBError(f"reduced FIM for {target} is singular") from None
    if np.min(np.diag(c)) ** 2 < 1e-12:
        raise UnboundedCRLBError(f"reduced FIM for {target} is singular")
    inv = np.linalg.inv(scaled)
    var = inv[2, 2] * s[2] ** 2
    if not np.isfinite(var) or var <= 0:
        raise UnboundedCRLBError(f"reduced FIM for {target} is singular")
    return float(np.sqrt(var))


def crlb(coords, theta: Theta, target: str, hurst_prior_sd: float) -> float:
    """Lower bound on the standard deviation of an unbiased estimate of ``target``."""
    return crlb_from_fim(fisher_information(coords, theta), target, hurst_prior_sd)


def combine_crlb(sds: Sequence[float]) -> float:
    """Harmonic combination ``(sum sd^-2)^(-1/2)`` for independent patches."""
    sds = np.asarray(sds, dtype=float)
    if sds.size == 0 or np.any(sds <= 0):
        raise ValueError("need at least one positive CRLB")
    return float(np.sum(sds ** -2.0) ** -0.5)


# -- initialization ---------------------------------------------------------

def _grid(increments, coords):
    c = np.asarray(coords, dtype=int)
    h = int(np.abs(c).max())
    grid = np.full((2 * h + 1, 2 * h + 1), np.nan)
    grid[c[:, 1] + h, c[:, 0] + h] = increments
    grid[h, h] = 0.0
    return grid


def initial_noise_variance(increments, coords) -> float:
    """Robust noise-variance start from the MAD of the 5-point Laplacian."""
    g = _grid(increments, coords)
    lap = 4 * g[1:-1, 1:-1] - g[:-2, 1:-1] - g[2:, 1:-1] - g[1:-1, :-2] - g[1:-1, 2:]
    lap = lap[np.isfinite(lap)]
    if lap.size == 0:
        return float(np.mean(np.square(increments)) / 2.0)
    mad = np.median(np.abs(lap - np.median(lap)))
    # white noise: Var(laplacian) = (16 + 4) sigma^2
    return float((1.4826 * mad) ** 2 / 20.0)


def unit_lag_msd(increments, coords) -> float:
    """Mean squared difference between 4-connected neighbours."""
    g = _grid(increments, coords)
    dx = (g[:, 1:] - g[:, :-1]).ravel()
    dy = (g[1:, :] - g[:-1, :]).ravel()
    d = np.concatenate([dx, dy])
    d = d[np.isfinite(d)]
    return float(np.mean(d * d)) if d.size else 0.0


def initial_theta(increments, coords, shape="gaussian", sigma_e2=None,
                  sigma_corr2=0.25) -> np.ndarray:
    """Cheap moment-based start ``(sigma_x2, 0.5, sigma_e2, sigma_corr2)``."""
    if sigma_e2 is None:
        sigma_e2 = initial_noise_variance(increments, coords)
    rho1 = NoiseParams(1.0, sigma_corr2, shape)
    from .covmodel import noise_cov
    msd = unit_lag_msd(increments, coords)
    sigma_x2 = max(msd - sigma_e2 * (2.0 - 2.0 * noise_cov(1.0, rho1)), 0.0)
    return np.array([sigma_x2, 0.5, sigma_e2, sigma_corr2])


# -- bounded maximization ---------------------------------------------------

_LOWER = {SX: 0.0, HQ: HURST_BOUNDS[0], SE: 0.0, SC: SIGMA_CORR2_BOUNDS[0]}
_UPPER = {SX: None, HQ: HURST_BOUNDS[1], SE: None, SC: SIGMA_CORR2_BOUNDS[1]}


def _clip(idx, v):
    lo, hi = _LOWER[idx], _UPPER[idx]
    v = max(v, lo)
    return min(v, hi) if hi is not None else v


@dataclass
class _Solution:
    params: np.ndarray  # (n_patches, 4)
    objective: float
    converged: bool
    n_evals: int
    message: str


def _maximize(liks: Sequence[PatchLikelihood], starts: np.ndarray, free: Sequence[int],
              shared: int | None, priors: Sequence[tuple[float, float]] | None,
              var_scale: float) -> _Solution:
    """Maximize ``sum_v lnL_v - (H_v - H0_v)^2 / (2 sd^2)``.

    ``free`` lists per-patch free parameters; ``shared`` is an optional
    parameter common to all patches (its start is taken from ``starts[0]``).
    Everything else stays at ``starts``.
    """
    starts = np.array(starts, dtype=float)
    k = len(liks)
    free = list(free)
    nf = len(free)
    scales = {SX: var_scale, HQ: 1.0, SE: var_scale, SC: 1.0}

    def unpack(x):
        p = starts.copy()
        for v in range(k):
            for j, idx in enumerate(free):
                p[v, idx] = x[v * nf + j] * scales[idx]
        if shared is not None:
            p[:, shared] = x[-1] * scales[shared]
        return p

    x0, bounds = [], []
    for v in range(k):
        for idx in free:
            x0.append(_clip(idx, starts[v, idx]) / scales[idx])
            hi = _UPPER[idx]
            bounds.append((_LOWER[idx] / scales[idx], None if hi is None else hi / scales[idx]))
    if shared is not None:
        x0.append(_clip(shared, starts[0, shared]) / scales[shared])
        hi = _UPPER[shared]
        bounds.append((_LOWER[shared] / scales[shared], None if hi is None else hi / scales[shared]))
    x0 = np.array(x0)
    n_evals = 0

    def objective(x):
        nonlocal n_evals
        n_evals += 1
        p = unpack(x)
        total = 0.0
        grad = np.zeros_like(x)
        for v, lik in enumerate(liks):
            try:
                val, g = lik.value_and_grad(p[v])
            except DegenerateModelError:
                return _BAD, np.zeros_like(x)
            if priors is not None:
                h0, sd = priors[v]
                val -= (p[v, HQ] - h0) ** 2 / (2.0 * sd * sd)
                g = g.copy()
                g[HQ] -= (p[v, HQ] - h0) / (sd * sd)
            total += val
            for j, idx in enumerate(free):
                grad[v * nf + j] -= g[idx] * scales[idx]
            if shared is not None:
                grad[-1] -= g[shared] * scales[shared]
        if not np.isfinite(total):
            return _BAD, np.zeros_like(x)
        return -total, grad

    res = minimize(objective, x0, jac=True, method="L-BFGS-B", bounds=bounds,
                   options={"ftol": FTOL, "gtol": GTOL, "maxiter": MAX_ITER,
                            "maxfun": 4 * MAX_ITER})
    msg = str(res.message)
    converged = bool(res.success) or ("ABNORMAL" in msg and np.isfinite(res.fun)
                                      and res.fun < _BAD)
    return _Solution(unpack(res.x), -float(res.fun), converged and res.fun < _BAD,
                     n_evals, msg)


def _as_lik(patch, shape):
    return PatchLikelihood(patch.increments, patch.coords, shape)


def _scale_for(increments, coords, *values):
    s = max([unit_lag_msd(increments, coords) / 2.0] + [abs(v) for v in values if v is not None])
    return s if s > 0 else 1.0


def estimate_texture(patch, noise: NoiseParams, start=None) -> TextureEstimate:
    """Fit ``(sigma_x2, hurst)`` with the noise parameters held fixed."""
    z = np.asarray(patch.increments, dtype=float)
    if not np.any(z):
        return TextureEstimate(0.0, 0.5, True, float("nan"))
    p0 = initial_theta(z, patch.coords, noise.shape, noise.sigma_e2, noise.sigma_corr2)
    if start is not None:
        p0[SX], p0[HQ] = start
    p0[SE], p0[SC] = noise.sigma_e2, noise.sigma_corr2
    lik = _as_lik(patch, noise.shape)
    sol = _maximize([lik], p0[None], free=(SX, HQ), shared=None, priors=None,
                    var_scale=_scale_for(z, patch.coords, noise.sigma_e2))
    p = sol.params[0]
    return TextureEstimate(float(p[SX]), float(p[HQ]), sol.converged, sol.objective)


def _patch_crlbs(coords, theta, hurst_prior_sd):
    try:
        fim = fisher_information(coords, theta)
    except DegenerateModelError:
        return {name: float("inf") for name in TARGETS}
    sds = {}
    for name in TARGETS:
        try:
            sds[name] = crlb_from_fim(fim, name, hurst_prior_sd)
        except UnboundedCRLBError:
            sds[name] = float("inf")
    return sds


def estimate_sigma_e2(patch, hurst_prior: tuple[float, float], sigma_corr2: float,
                      shape: str = "gaussian", start=None) -> PatchEstimate:
    """Penalized ML fit of ``(sigma_x2, hurst, sigma_e2)`` at fixed correlation width."""
    return _estimate_single(patch, "sigma_e2", hurst_prior, sigma_corr2, shape, start)


def estimate_sigma_corr2(patch, hurst_prior: tuple[float, float], sigma_e2: float,
                         shape: str = "gaussian", start=None) -> PatchEstimate:
    """Penalized ML fit of ``(sigma_x2, hurst, sigma_corr2)`` at fixed error variance."""
    return _estimate_single(patch, "sigma_corr2", hurst_prior, sigma_e2, shape, start)


def _estimate_single(patch, target, hurst_prior, fixed_other, shape, start):
    grp = estimate_group([patch], target, [hurst_prior], [fixed_other], shape=shape,
                         starts=None if start is None else [start])
    theta = Theta.from_values(*grp.nuisance[0], shape=shape)
    sds = _patch_crlbs(patch.coords, theta, hurst_prior[1])
    return PatchEstimate(theta, sds["sigma_e2"], sds["sigma_corr2"], "estimated",
                         grp.converged)


def _group_start(patches, target, fixed_other, shape, starts, target_start):
    rows = []
    for v, patch in enumerate(patches):
        if target == "sigma_e2":
            p = initial_theta(patch.increments, patch.coords, shape, None, fixed_other[v])
        else:
            p = initial_theta(patch.increments, patch.coords, shape, fixed_other[v], 0.25)
        if starts is not None and starts[v] is not None:
            p[SX], p[HQ] = starts[v][0], starts[v][1]
        rows.append(p)
    p = np.array(rows)
    t = TARGETS[target]
    if target_start is not None:
        p[:, t] = target_start
    elif target == "sigma_e2":
        p[:, t] = np.median(p[:, t])
    return p


def estimate_group(patches: Sequence, target: str, hurst_priors: Sequence[tuple[float, float]],
                   fixed_other, shape: str = "gaussian", starts=None, target_start=None,
                   param_kind: str | None = None) -> GroupEstimate:
    """Joint penalized ML over per-patch texture and one shared error parameter.

    Parameters
    ----------
    patches : sequence of Patch
        Non-overlapping patches with similar predictors.
    target : {"sigma_e2", "sigma_corr2"}
        Shared parameter to estimate.
    hurst_priors : sequence of (mean, sd)
        Hurst prior per patch.
    fixed_other : float or sequence of float
        Value of the other error parameter per patch.
    starts : sequence of (sigma_x2, hurst), optional
        Warm start for the per-patch texture parameters.

    Returns
    -------
    GroupEstimate
        ``crlb_sd`` is the harmonic combination of per-patch CRLBs evaluated
        at the group estimate. ``nuisance`` holds the fitted per-patch
        parameter rows.
    """
    if target not in TARGETS:
        raise ValueError(f"target must be one of {tuple(TARGETS)}, got {target!r}")
    k = len(patches)
    if k == 0:
        raise ValueError("empty group")
    if np.isscalar(fixed_other):
        fixed_other = [float(fixed_other)] * k
    if param_kind is None:
        param_kind = "variance" if target == "sigma_e2" else "corr_width"
    nstk = float(np.mean([p.predictor.n_stk for p in patches])) if hasattr(patches[0], "predictor") else float("nan")
    zbar = float(np.mean([p.predictor.z for p in patches])) if hasattr(patches[0], "predictor") else float("nan")
    t = TARGETS[target]

    if target == "sigma_e2" and not any(np.any(np.asarray(p.increments)) for p in patches):
        p = np.zeros((k, 4))
        p[:, HQ] = [h for h, _ in hurst_priors]
        p[:, SC] = fixed_other
        return GroupEstimate(param_kind, 0.0, float("inf"), nstk, zbar, k, True, p)

    p0 = _group_start(patches, target, fixed_other, shape, starts, target_start)
    other = SC if target == "sigma_e2" else SE
    p0[:, other] = fixed_other
    liks = [_as_lik(p, shape) for p in patches]
    scale = max(_scale_for(p.increments, p.coords, p0[v, SE])
                for v, p in enumerate(patches))
    sol = _maximize(liks, p0, free=(SX, HQ), shared=t, priors=list(hurst_priors),
                    var_scale=scale)
    value = float(sol.params[0, t])
    sds = []
    for v, patch in enumerate(patches):
        theta = Theta.from_values(*sol.params[v], shape=shape)
        try:
            fim = fisher_information(patch.coords, theta)
            sds.append(crlb_from_fim(fim, target, hurst_priors[v][1]))
        except (UnboundedCRLBError, DegenerateModelError):
            sds.append(float("inf"))
    finite = [s for s in sds if np.isfinite(s) and s > 0]
    crlb_sd = combine_crlb(finite) if finite else float("inf")
    if not sol.converged:
        logger.debug("group fit did not converge: %s", sol.message)
    return GroupEstimate(param_kind, value, crlb_sd, nstk, zbar, k, sol.converged,
                         sol.params)


__all__ = [
    "PatchLikelihood", "PatchEstimate", "TextureEstimate", "GroupEstimate",
    "log_likelihood", "fisher_information", "crlb", "crlb_from_fim", "combine_crlb",
    "estimate_texture", "estimate_sigma_e2", "estimate_sigma_corr2", "estimate_group",
    "initial_theta", "initial_noise_variance", "PARAM_NAMES",
]
