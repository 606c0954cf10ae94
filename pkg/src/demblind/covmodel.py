"""Covariance of elevation increments inside a DEM patch.

Error-free terrain is a 2-D fractional Brownian motion; measurement error is a
stationary isotropic field with Gaussian or exponential correlation. The
observed increments ``Z(t, s) - Z(0, 0)`` are zero-mean Gaussian with the sum
covariance built here.

Lags are integer pixel offsets. Radial functions are tabulated once per
parameter value over the squared lags present in a patch, and the compiled
kernels (or their numpy fallback) assemble the matrices from those tables.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.linalg import lapack

from ._backend import kernels
from .errors import DegenerateModelError

SHAPES = ("gaussian", "exponential")
JITTER = 1e-10
PARAM_NAMES = ("sigma_x2", "hurst", "sigma_e2", "sigma_corr2")


@dataclass(frozen=True)
class FbmParams:
    sigma_x2: float
    hurst: float

    def __post_init__(self):
        if not self.sigma_x2 >= 0:
            raise ValueError(f"sigma_x2 must be >= 0, got {self.sigma_x2}")
        if not 0 < self.hurst < 1:
            raise ValueError(f"hurst must lie in (0, 1), got {self.hurst}")


@dataclass(frozen=True)
class NoiseParams:
    sigma_e2: float
    sigma_corr2: float
    shape: str = "gaussian"

    def __post_init__(self):
        if not self.sigma_e2 >= 0:
            raise ValueError(f"sigma_e2 must be >= 0, got {self.sigma_e2}")
        if not self.sigma_corr2 > 0:
            raise ValueError(f"sigma_corr2 must be > 0, got {self.sigma_corr2}")
        if self.shape not in SHAPES:
            raise ValueError(f"unknown correlation shape {self.shape!r}")


@dataclass(frozen=True)
class Theta:
    fbm: FbmParams
    noise: NoiseParams

    @classmethod
    def from_values(cls, sigma_x2, hurst, sigma_e2, sigma_corr2, shape="gaussian"):
        return cls(FbmParams(sigma_x2, hurst), NoiseParams(sigma_e2, sigma_corr2, shape))

    def as_array(self) -> np.ndarray:
        return np.array([self.fbm.sigma_x2, self.fbm.hurst,
                         self.noise.sigma_e2, self.noise.sigma_corr2])

    def replace(self, **values) -> "Theta":
        v = dict(zip(PARAM_NAMES, self.as_array()))
        v.update(values)
        return Theta.from_values(v["sigma_x2"], v["hurst"], v["sigma_e2"],
                                 v["sigma_corr2"], self.noise.shape)


def fbm_increment_cov(t1, s1, t2, s2, fbm: FbmParams) -> float:
    """Covariance of fBm increments at offsets (t1, s1) and (t2, s2)."""
    h = fbm.hurst
    a = float(t1 * t1 + s1 * s1)
    b = float(t2 * t2 + s2 * s2)
    c = float((t1 - t2) ** 2 + (s1 - s2) ** 2)
    return 0.5 * fbm.sigma_x2 * (_pow(a, h) + _pow(b, h) - _pow(c, h))


def _pow(x, h):
    return x ** h if x > 0 else 0.0


def noise_cov(d, noise: NoiseParams) -> float:
    """Measurement-error covariance at lag ``d`` pixels."""
    d = abs(float(d))
    if noise.shape == "gaussian":
        return noise.sigma_e2 * np.exp(-d * d / (2.0 * noise.sigma_corr2))
    return noise.sigma_e2 * np.exp(-d / np.sqrt(noise.sigma_corr2))


class PatchGeometry:
    """Integer squared lags of a set of increment coordinates.

    Parameters
    ----------
    coords : array_like, shape (n, 2)
        Integer pixel offsets ``(t, s)`` relative to the patch center,
        excluding ``(0, 0)``.
    """

    def __init__(self, coords):
        c = np.asarray(coords)
        if c.ndim != 2 or c.shape[1] != 2 or c.shape[0] == 0:
            raise ValueError("coords must have shape (n, 2) with n >= 1")
        ci = np.rint(c).astype(np.int64)
        if not np.array_equal(ci, c):
            raise ValueError("coords must be integer pixel offsets")
        if np.any((ci[:, 0] == 0) & (ci[:, 1] == 0)):
            raise ValueError("coords must exclude the patch center (0, 0)")
        self.coords = ci
        t, s = ci[:, 0], ci[:, 1]
        self.r2 = np.ascontiguousarray(t * t + s * s, dtype=np.int32)
        lag2 = (t[:, None] - t[None, :]) ** 2 + (s[:, None] - s[None, :]) ** 2
        self.lag2 = np.ascontiguousarray(lag2, dtype=np.int32)
        self.kmax = int(max(self.r2.max(), self.lag2.max()))
        self.n = ci.shape[0]
        self._k = np.arange(self.kmax + 1, dtype=float)

    def fbm_tables(self, hurst):
        """Tables of ``k**H`` and ``k**H * log k`` over squared lags ``k``."""
        k = self._k
        f = np.zeros_like(k)
        fl = np.zeros_like(k)
        # (k)^H with k a squared distance equals (d^2)^H
        f[1:] = k[1:] ** hurst
        fl[1:] = f[1:] * np.log(k[1:])
        return f, fl

    def noise_tables(self, sigma_corr2, shape):
        """Correlation table and its derivative in ``sigma_corr2``."""
        k = self._k
        if shape == "gaussian":
            g = np.exp(-k / (2.0 * sigma_corr2))
            dg = g * k / (2.0 * sigma_corr2 ** 2)
        elif shape == "exponential":
            rk = np.sqrt(k)
            g = np.exp(-rk / np.sqrt(sigma_corr2))
            dg = g * rk * 0.5 * sigma_corr2 ** -1.5
        else:
            raise ValueError(f"unknown correlation shape {shape!r}")
        return g, dg

    def cov(self, sigma_x2, hurst, sigma_e2, sigma_corr2, shape="gaussian"):
        f, _ = self.fbm_tables(hurst)
        g, _ = self.noise_tables(sigma_corr2, shape)
        return kernels.cov_matrix(self.r2, self.lag2, f, g, float(sigma_x2), float(sigma_e2))

    def derivatives(self, sigma_x2, hurst, sigma_e2, sigma_corr2, shape="gaussian"):
        f, fl = self.fbm_tables(hurst)
        g, dg = self.noise_tables(sigma_corr2, shape)
        return kernels.cov_derivatives(self.r2, self.lag2, f, fl, g, dg,
                                       float(sigma_x2), float(sigma_e2))


@lru_cache(maxsize=64)
def _cached_geometry(key: bytes, n: int) -> PatchGeometry:
    return PatchGeometry(np.frombuffer(key, dtype=np.int64).reshape(n, 2))


def geometry_for(coords) -> PatchGeometry:
    if isinstance(coords, PatchGeometry):
        return coords
    c = np.asarray(coords)
    ci = np.rint(c).astype(np.int64)
    if c.ndim == 2 and c.shape[1:] == (2,) and np.array_equal(ci, c):
        return _cached_geometry(np.ascontiguousarray(ci).tobytes(), ci.shape[0])
    return PatchGeometry(c)


def patch_coords(half_size: int) -> np.ndarray:
    """Row-major offsets of an N x N patch, center excluded.

    Column offset ``t`` varies fastest, matching the flattening of a patch
    window with ``window.ravel()``.
    """
    r = np.arange(-half_size, half_size + 1)
    s, t = np.meshgrid(r, r, indexing="ij")
    c = np.column_stack([t.ravel(), s.ravel()])
    return c[(c[:, 0] != 0) | (c[:, 1] != 0)]


def observed_cov_matrix(coords, theta: Theta) -> np.ndarray:
    """Covariance matrix of observed increments (terrain plus error)."""
    geom = geometry_for(coords)
    return geom.cov(theta.fbm.sigma_x2, theta.fbm.hurst, theta.noise.sigma_e2,
                    theta.noise.sigma_corr2, theta.noise.shape)


def cov_derivative(coords, theta: Theta, which: str) -> np.ndarray:
    """Partial derivative of the observed covariance in one parameter."""
    if which not in PARAM_NAMES:
        raise ValueError(f"which must be one of {PARAM_NAMES}, got {which!r}")
    geom = geometry_for(coords)
    d = geom.derivatives(theta.fbm.sigma_x2, theta.fbm.hurst, theta.noise.sigma_e2,
                         theta.noise.sigma_corr2, theta.noise.shape)
    return d[PARAM_NAMES.index(which)]


def jittered_cholesky(cov: np.ndarray, overwrite: bool = False, clean: bool = True) -> np.ndarray:
    """Lower Cholesky factor after adding ``1e-10 * trace / n`` to the diagonal.

    The factor is returned in Fortran order. With ``clean=False`` the strict
    upper triangle holds leftover entries and only the lower part is valid.

    Raises
    ------
    DegenerateModelError
        If the jittered matrix is not positive definite.
    """
    n = cov.shape[0]
    tr = float(np.trace(cov))
    if not np.isfinite(tr) or tr <= 0:
        raise DegenerateModelError("covariance has non-positive trace")
    a = cov if overwrite else cov.copy()
    a.flat[::n + 1] += JITTER * tr / n
    # a is symmetric, so its transpose is the same matrix in Fortran order
    c, info = lapack.dpotrf(a.T, lower=1, clean=int(clean), overwrite_a=1)
    if info != 0:
        raise DegenerateModelError(f"Cholesky factorization failed (info={info})")
    return c


def sample_patch(coords, theta: Theta, seed=None) -> np.ndarray:
    """Draw one vector of observed increments with the model covariance."""
    geom = geometry_for(coords)
    cov = observed_cov_matrix(geom, theta)
    rng = np.random.default_rng(seed)
    z = rng.standard_normal(geom.n)
    if not np.any(cov):
        return np.zeros(geom.n)
    return jittered_cholesky(cov) @ z
