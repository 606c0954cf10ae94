# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled covariance kernels; same contracts as ``_kernels_py``."""

import numpy as np
cimport numpy as cnp

cnp.import_array()


def cov_matrix(const int[::1] r2, const int[:, ::1] lag2,
               const double[::1] fbm_tab, const double[::1] noise_tab,
               double sigma_x2, double sigma_e2):
    cdef Py_ssize_t n = r2.shape[0]
    cdef Py_ssize_t i, j
    cdef int k
    cdef double hx = 0.5 * sigma_x2
    cdef double v, fi, gi
    out_arr = np.empty((n, n), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    for i in range(n):
        fi = fbm_tab[r2[i]]
        gi = noise_tab[r2[i]]
        for j in range(i + 1):
            k = lag2[i, j]
            v = hx * (fi + fbm_tab[r2[j]] - fbm_tab[k])
            v += sigma_e2 * (noise_tab[k] + 1.0 - gi - noise_tab[r2[j]])
            out[i, j] = v
            out[j, i] = v
    return out_arr


def cov_derivatives(const int[::1] r2, const int[:, ::1] lag2,
                    const double[::1] fbm_tab, const double[::1] fbm_log_tab,
                    const double[::1] noise_tab, const double[::1] noise_dtab,
                    double sigma_x2, double sigma_e2):
    cdef Py_ssize_t n = r2.shape[0]
    cdef Py_ssize_t i, j
    cdef int k, ri, rj
    cdef double v0, v1, v2, v3
    out_arr = np.empty((4, n, n), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    for i in range(n):
        ri = r2[i]
        for j in range(i + 1):
            rj = r2[j]
            k = lag2[i, j]
            v0 = 0.5 * (fbm_tab[ri] + fbm_tab[rj] - fbm_tab[k])
            v1 = 0.5 * sigma_x2 * (fbm_log_tab[ri] + fbm_log_tab[rj] - fbm_log_tab[k])
            v2 = noise_tab[k] + 1.0 - noise_tab[ri] - noise_tab[rj]
            v3 = sigma_e2 * (noise_dtab[k] - noise_dtab[ri] - noise_dtab[rj])
            out[0, i, j] = v0
            out[0, j, i] = v0
            out[1, i, j] = v1
            out[1, j, i] = v1
            out[2, i, j] = v2
            out[2, j, i] = v2
            out[3, i, j] = v3
            out[3, j, i] = v3
    return out_arr


def score_terms(const double[:, :] w_lower, const double[::1] alpha,
                const int[::1] r2, const int[:, ::1] lag2,
                const double[::1] fbm_tab, const double[::1] fbm_log_tab,
                const double[::1] noise_tab, const double[::1] noise_dtab,
                double sigma_x2, double sigma_e2):
    cdef Py_ssize_t n = r2.shape[0]
    cdef Py_ssize_t i, j
    cdef int k, ri, rj
    cdef double w, q, c, d0, d1, d2, d3
    cdef double t0 = 0.0, t1 = 0.0, t2 = 0.0, t3 = 0.0
    cdef double q0 = 0.0, q1 = 0.0, q2 = 0.0, q3 = 0.0
    for i in range(n):
        ri = r2[i]
        for j in range(i + 1):
            rj = r2[j]
            k = lag2[i, j]
            # off-diagonal entries appear twice in the symmetric sums
            c = 1.0 if i == j else 2.0
            w = c * w_lower[i, j]
            q = c * alpha[i] * alpha[j]
            d0 = fbm_tab[ri] + fbm_tab[rj] - fbm_tab[k]
            d1 = fbm_log_tab[ri] + fbm_log_tab[rj] - fbm_log_tab[k]
            d2 = noise_tab[k] + 1.0 - noise_tab[ri] - noise_tab[rj]
            d3 = noise_dtab[k] - noise_dtab[ri] - noise_dtab[rj]
            t0 += w * d0
            t1 += w * d1
            t2 += w * d2
            t3 += w * d3
            q0 += q * d0
            q1 += q * d1
            q2 += q * d2
            q3 += q * d3
    traces = np.array([0.5 * t0, 0.5 * sigma_x2 * t1, t2, sigma_e2 * t3])
    quads = np.array([0.5 * q0, 0.5 * sigma_x2 * q1, q2, sigma_e2 * q3])
    return traces, quads
