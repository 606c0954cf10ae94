"""Heteroscedastic robust regression of error parameters on (N_stk, Z).

Six candidate models are linear in their coefficients::

    constant        1
    inv_nstk        1 + 1/N
    z_linear        1 + Z
    z_quadratic     1 + Z^2
    full_linear     1 + 1/N + Z + Z/N
    full_quadratic  1 + 1/N + Z^2 + Z^2/N

Each group estimate enters with weight ``crlb_sd ** -2``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from .errors import ModelInestimableError


class LowSignificanceWarning(UserWarning):
    """No candidate model has all coefficients above the t-stat cutoff."""


class ModelType(str, Enum):
    CONSTANT = "constant"
    INV_NSTK = "inv_nstk"
    Z_LINEAR = "z_linear"
    Z_QUADRATIC = "z_quadratic"
    FULL_LINEAR = "full_linear"
    FULL_QUADRATIC = "full_quadratic"

    @property
    def m_exponent(self) -> int | None:
        return _M_EXPONENT[self]

    @property
    def terms(self) -> tuple[str, ...]:
        return _TERMS[self]

    @property
    def n_terms(self) -> int:
        return len(_TERMS[self])

    @property
    def formula(self) -> str:
        return _FORMULA[self]


_M_EXPONENT = {ModelType.CONSTANT: None, ModelType.INV_NSTK: None,
               ModelType.Z_LINEAR: 1, ModelType.Z_QUADRATIC: 2,
               ModelType.FULL_LINEAR: 1, ModelType.FULL_QUADRATIC: 2}
_TERMS = {ModelType.CONSTANT: ("1",),
          ModelType.INV_NSTK: ("1", "1/N"),
          ModelType.Z_LINEAR: ("1", "Z"),
          ModelType.Z_QUADRATIC: ("1", "Z^2"),
          ModelType.FULL_LINEAR: ("1", "1/N", "Z", "Z/N"),
          ModelType.FULL_QUADRATIC: ("1", "1/N", "Z^2", "Z^2/N")}
_FORMULA = {ModelType.CONSTANT: "1", ModelType.INV_NSTK: "1 + N^-1",
            ModelType.Z_LINEAR: "1 + Z", ModelType.Z_QUADRATIC: "1 + Z^2",
            ModelType.FULL_LINEAR: "1 + N^-1 + Z + Z N^-1",
            ModelType.FULL_QUADRATIC: "1 + N^-1 + Z^2 + Z^2 N^-1"}
ALL_MODELS = tuple(ModelType)


def design_matrix(model, nstk, z) -> np.ndarray:
    model = ModelType(model)
    inv = 1.0 / np.asarray(nstk, dtype=float)
    z = np.asarray(z, dtype=float)
    one = np.ones_like(inv * z)
    zm = z ** (model.m_exponent or 1)
    cols = {"1": one, "1/N": inv, "Z": zm, "Z^2": zm, "Z/N": zm * inv, "Z^2/N": zm * inv}
    return np.column_stack([cols[t] * one for t in model.terms])


def design_row(model, p) -> np.ndarray:
    """Regressor vector of one predictor ``p`` (anything with ``n_stk`` and ``z``)."""
    return design_matrix(model, [p.n_stk], [p.z])[0]


@dataclass
class ModelFit:
    model: ModelType
    coeffs: np.ndarray
    coeff_sds: np.ndarray
    t_stats: np.ndarray
    r2: float
    n_used: int
    outlier_mask: np.ndarray
    param_kind: str = ""
    low_significance: bool = False
    loglik_u: float = float("nan")
    loglik_r: float = float("nan")
    n_passes: int = 0
    partial: dict = field(default_factory=dict, repr=False)

    @property
    def n_outliers(self) -> int:
        return int(np.sum(self.outlier_mask))

    def to_report(self) -> dict:
        return {
            "param_kind": self.param_kind,
            "model_kind": self.model.value,
            "formula": self.model.formula,
            "terms": list(self.model.terms),
            "coeffs": [float(c) for c in self.coeffs],
            "coeff_sds": [float(c) for c in self.coeff_sds],
            "t_stats": [float(c) for c in self.t_stats],
            "r2": float(self.r2),
            "n_used": int(self.n_used),
            "n_outliers": self.n_outliers,
            "m_exponent": self.model.m_exponent,
        }

    @classmethod
    def from_report(cls, rep: dict) -> "ModelFit":
        model = ModelType(rep["model_kind"])
        coeffs = np.asarray(rep["coeffs"], dtype=float)
        sds = np.asarray(rep.get("coeff_sds", [np.nan] * len(coeffs)), dtype=float)
        t = np.asarray(rep.get("t_stats", coeffs / sds), dtype=float)
        return cls(model, coeffs, sds, t, float(rep.get("r2", np.nan)),
                   int(rep.get("n_used", 0)), np.zeros(0, dtype=bool),
                   rep.get("param_kind", ""))


def fit_from_coefficients(model, coeffs, param_kind="") -> ModelFit:
    """A fit holding known coefficients, e.g. published values."""
    coeffs = np.asarray(coeffs, dtype=float)
    model = ModelType(model)
    if coeffs.shape != (model.n_terms,):
        raise ValueError(f"{model.value} needs {model.n_terms} coefficients")
    nan = np.full_like(coeffs, np.nan)
    return ModelFit(model, coeffs, nan, nan, float("nan"), 0,
                    np.zeros(0, dtype=bool), param_kind)


def _arrays(estimates):
    y = np.array([e.value for e in estimates], dtype=float)
    sd = np.array([e.crlb_sd for e in estimates], dtype=float)
    nstk = np.array([e.nstk for e in estimates], dtype=float)
    z = np.array([e.z for e in estimates], dtype=float)
    return y, sd, nstk, z


def _wls(x, y, w):
    """Weighted least squares with column equilibration.

    Returns coefficients and the covariance ``(X' W X)^-1``.
    """
    sw = np.sqrt(w)
    a = x * sw[:, None]
    norms = np.linalg.norm(a, axis=0)
    if np.any(norms == 0):
        raise ModelInestimableError("design has an all-zero column")
    a = a / norms
    u, s, vt = np.linalg.svd(a, full_matrices=False)
    if s[-1] <= s[0] * 1e-10:
        raise ModelInestimableError("design matrix is rank deficient")
    beta = vt.T @ ((u.T @ (y * sw)) / s)
    cov = (vt.T / s ** 2) @ vt
    return beta / norms, cov / np.outer(norms, norms)


def _loglik(y, pred, sd):
    return -0.5 * float(np.sum(((y - pred) / sd) ** 2))


def fit_arrays(y, sd, nstk, z, model, reject: float = 3.0, max_passes: int = 10,
               param_kind: str = "", exclude=None) -> ModelFit:
    """Robust weighted fit on raw arrays; see :func:`fit_robust_wls`.

    Rows set in ``exclude`` are treated as already flagged.
    """
    model = ModelType(model)
    y, sd = np.asarray(y, float), np.asarray(sd, float)
    x = design_matrix(model, nstk, z)
    ok = np.isfinite(y) & np.isfinite(sd) & (sd > 0) & np.all(np.isfinite(x), axis=1)
    pre = np.zeros_like(ok) if exclude is None else np.asarray(exclude, dtype=bool)
    p = model.n_terms
    if ok.sum() < p + 1:
        raise ModelInestimableError(f"{model.value}: {ok.sum()} usable rows for {p} terms")
    w = np.zeros_like(y)
    w[ok] = sd[ok] ** -2.0
    ok_all = ok
    ok = ok & ~pre
    if ok.sum() < p + 1:
        raise ModelInestimableError(f"{model.value}: {ok.sum()} usable rows for {p} terms")
    keep = ok.copy()
    for n_pass in range(1, max_passes + 1):
        beta, cov = _wls(x[keep], y[keep], w[keep])
        resid = np.zeros_like(y)
        resid[ok] = (y[ok] - x[ok] @ beta) / sd[ok]
        new_keep = ok & (np.abs(resid) <= reject)
        if np.array_equal(new_keep, keep):
            break
        keep = new_keep
        if keep.sum() < p + 1:
            raise ModelInestimableError(f"{model.value}: too few rows left after outlier rejection")
    else:
        beta, cov = _wls(x[keep], y[keep], w[keep])
    sds = np.sqrt(np.diag(cov))
    yk, sk = y[keep], sd[keep]
    l_u = _loglik(yk, x[keep] @ beta, sk)
    wk = sk ** -2.0
    l_r = _loglik(yk, np.sum(wk * yk) / np.sum(wk), sk)
    n = int(keep.sum())
    r2 = 1.0 - np.exp(-2.0 / n * (l_u - l_r))
    resid_k = yk - x[keep] @ beta
    partial = {t: resid_k + beta[j] * x[keep][:, j] for j, t in enumerate(model.terms)}
    return ModelFit(model, beta, sds, beta / sds, float(r2), n, ok_all & ~keep, param_kind,
                    loglik_u=l_u, loglik_r=l_r, n_passes=n_pass, partial=partial)


def fit_robust_wls(estimates: Sequence, model, reject: float = 3.0,
                   max_passes: int = 10) -> ModelFit:
    """Weighted least squares with iterated 3-sigma outlier rejection.

    Weights are ``crlb_sd ** -2``. After every pass, rows whose standardized
    residual ``|r_i| / crlb_sd_i`` exceeds ``reject`` are excluded, and all
    rows are re-tested against the new fit until the set is stable.
    Coefficient SDs come from ``(X' W X)^-1``.

    Raises
    ------
    ModelInestimableError
        Too few usable rows or a rank-deficient design.
    """
    y, sd, nstk, z = _arrays(estimates)
    kind = estimates[0].param_kind if len(estimates) else ""
    return fit_arrays(y, sd, nstk, z, model, reject, max_passes, kind)


def generalized_r2(fit: ModelFit, estimates: Sequence) -> float:
    """Likelihood-ratio R^2 against the best weighted constant.

    Evaluated on the rows the fit did not flag as outliers.
    """
    y, sd, nstk, z = _arrays(estimates)
    keep = np.ones(len(y), dtype=bool)
    if fit.outlier_mask.shape == keep.shape:
        keep &= ~fit.outlier_mask
    keep &= np.isfinite(sd) & (sd > 0)
    y, sd = y[keep], sd[keep]
    pred = design_matrix(fit.model, nstk[keep], z[keep]) @ fit.coeffs
    w = sd ** -2.0
    l_u = _loglik(y, pred, sd)
    l_r = _loglik(y, np.sum(w * y) / np.sum(w), sd)
    return float(1.0 - np.exp(-2.0 / len(y) * (l_u - l_r)))


def partial_residuals(fit: ModelFit, estimates: Sequence) -> dict[str, np.ndarray]:
    """Partial residuals ``e_i + beta_j x_ij`` per term over non-outlier rows."""
    y, sd, nstk, z = _arrays(estimates)
    keep = ~fit.outlier_mask if fit.outlier_mask.shape == y.shape else np.ones(len(y), bool)
    x = design_matrix(fit.model, nstk[keep], z[keep])
    e = y[keep] - x @ fit.coeffs
    return {t: e + fit.coeffs[j] * x[:, j] for j, t in enumerate(fit.model.terms)}


def fit_all(estimates, candidates=ALL_MODELS, **kw) -> dict[ModelType, ModelFit | Exception]:
    out = {}
    for m in candidates:
        try:
            out[ModelType(m)] = fit_robust_wls(estimates, m, **kw)
        except ModelInestimableError as exc:
            out[ModelType(m)] = exc
    return out


def common_basis_fits(estimates: Sequence, candidates=ALL_MODELS,
                      fits: dict | None = None) -> dict[ModelType, ModelFit]:
    """Refit every candidate on one shared set of inlier rows.

    Each candidate's own robust fit may discard a different subset, and a
    misspecified model can shed a large share of the data as "outliers".
    The shared set is the one kept by the candidate that flags the fewest
    rows (ties go to the larger model). Candidates are refitted there
    without further rejection, so their R^2 values are comparable.
    """
    if fits is None:
        fits = fit_all(estimates, candidates)
    ok = [f for f in fits.values() if isinstance(f, ModelFit)]
    if not ok:
        raise ModelInestimableError("no candidate model could be fitted")
    ref = min(ok, key=lambda f: (f.n_outliers, -f.model.n_terms))
    y, sd, nstk, z = _arrays(estimates)
    kind = estimates[0].param_kind if len(estimates) else ""
    out = {}
    for f in ok:
        try:
            out[f.model] = fit_arrays(y, sd, nstk, z, f.model, reject=np.inf,
                                      param_kind=kind, exclude=ref.outlier_mask)
        except ModelInestimableError:
            pass
    return out


def _lr_stat(f: ModelFit) -> float:
    # monotone in R^2 but does not saturate at 1 in floating point
    return (f.loglik_u - f.loglik_r) / f.n_used


def select_model(estimates: Sequence, candidates=ALL_MODELS, t_min: float = 10.0,
                 fits: dict | None = None) -> ModelFit:
    """Highest-R^2 candidate whose coefficients all have ``|t| >= t_min``.

    Candidates are compared on a common inlier set (see
    :func:`common_basis_fits`). Falls back to the highest-R^2 estimable
    candidate, marked ``low_significance`` and with a
    :class:`LowSignificanceWarning`.
    """
    ok = list(common_basis_fits(estimates, candidates, fits).values())
    if not ok:
        raise ModelInestimableError("no candidate model could be fitted")
    good = [f for f in ok if np.all(np.abs(f.t_stats) >= t_min)]
    if good:
        return max(good, key=_lr_stat)
    best = max(ok, key=_lr_stat)
    best.low_significance = True
    warnings.warn(f"no candidate has all |t| >= {t_min}; using {best.model.value}",
                  LowSignificanceWarning, stacklevel=2)
    return best


def predict(fit: ModelFit, p) -> float:
    """Model value at predictor ``p``, clamped at zero."""
    return max(0.0, float(design_row(fit.model, p) @ fit.coeffs))


def predict_many(fit: ModelFit, nstk, z) -> np.ndarray:
    return np.maximum(design_matrix(fit.model, nstk, z) @ fit.coeffs, 0.0)


def elevation_contribution(fit: ModelFit, p) -> float:
    """Sum of the elevation-dependent terms at ``p``."""
    row = design_row(fit.model, p)
    mask = np.array(["Z" in t for t in fit.model.terms])
    return float(row[mask] @ fit.coeffs[mask])


def reduce_at_elevation(fit: ModelFit, z: float) -> tuple[float, float]:
    """Collapse the model at fixed ``z`` into ``a + b / N_stk``."""
    c = dict(zip(fit.model.terms, fit.coeffs))
    zm = z ** (fit.model.m_exponent or 1)
    a = c.get("1", 0.0) + zm * (c.get("Z", 0.0) + c.get("Z^2", 0.0))
    b = c.get("1/N", 0.0) + zm * (c.get("Z/N", 0.0) + c.get("Z^2/N", 0.0))
    return float(a), float(b)
