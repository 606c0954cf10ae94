"""Pure numpy implementations of the covariance kernels.

All kernels work on integer squared lags: ``r2[i]`` is the squared distance
of increment ``i`` from the patch center and ``lag2[i, j]`` the squared
distance between increments ``i`` and ``j``. Every radial function is passed
as a lookup table indexed by squared lag, so no transcendental function is
evaluated per matrix entry.

Derivative order is always (sigma_x2, hurst, sigma_e2, sigma_corr2).
"""

import numpy as np


def cov_matrix(r2, lag2, fbm_tab, noise_tab, sigma_x2, sigma_e2):
    fr = fbm_tab[r2]
    gr = noise_tab[r2]
    out = 0.5 * sigma_x2 * (fr[:, None] + fr[None, :] - fbm_tab[lag2])
    out += sigma_e2 * (noise_tab[lag2] + 1.0 - (gr[:, None] + gr[None, :]))
    return out


def cov_derivatives(r2, lag2, fbm_tab, fbm_log_tab, noise_tab, noise_dtab,
                    sigma_x2, sigma_e2):
    n = r2.shape[0]
    out = np.empty((4, n, n))
    fr = fbm_tab[r2]
    lr = fbm_log_tab[r2]
    gr = noise_tab[r2]
    dr = noise_dtab[r2]
    out[0] = 0.5 * (fr[:, None] + fr[None, :] - fbm_tab[lag2])
    out[1] = 0.5 * sigma_x2 * (lr[:, None] + lr[None, :] - fbm_log_tab[lag2])
    out[2] = noise_tab[lag2] + 1.0 - (gr[:, None] + gr[None, :])
    out[3] = sigma_e2 * (noise_dtab[lag2] - (dr[:, None] + dr[None, :]))
    return out


def score_terms(w_lower, alpha, r2, lag2, fbm_tab, fbm_log_tab, noise_tab,
                noise_dtab, sigma_x2, sigma_e2):
    """Return ``tr(W dR_k)`` and ``alpha' dR_k alpha`` for the four parameters.

    Only the lower triangle (with diagonal) of ``w_lower`` is read.
    """
    derivs = cov_derivatives(r2, lag2, fbm_tab, fbm_log_tab, noise_tab,
                             noise_dtab, sigma_x2, sigma_e2)
    w = np.tril(w_lower)
    w = w + np.tril(w, -1).T
    aa = np.outer(alpha, alpha)
    traces = np.einsum("ij,kij->k", w, derivs)
    quads = np.einsum("ij,kij->k", aa, derivs)
    return traces, quads
