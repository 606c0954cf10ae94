"""Time the compiled kernels against the numpy fallback.

Usage::

    python benchmarks/bench_kernels.py [--half-size 5] [--repeat 5]

Reports the best per-call time of each kernel for both backends, plus one
full log-likelihood-and-gradient evaluation and a single-patch sigma_e2 fit.
"""

import argparse
import timeit

import numpy as np
from scipy.linalg import lapack

from demblind import _backend, covmodel, likelihood
from demblind.covmodel import Theta, patch_coords, sample_patch
from demblind.raster import Patch, PredictorVector


def _use(kernels):
    covmodel.kernels = kernels
    likelihood.kernels = kernels


def _cases(half_size):
    coords = patch_coords(half_size)
    th = Theta.from_values(1.2, 0.6, 2.0, 0.4)
    p = th.as_array()
    geom = covmodel.geometry_for(coords)
    f, fl = geom.fbm_tables(p[1])
    g, dg = geom.noise_tables(p[3], "gaussian")
    z = sample_patch(coords, th, 0)
    cov = geom.cov(*p)
    chol = covmodel.jittered_cholesky(cov)
    alpha, _ = lapack.dpotrs(chol, z, lower=1)
    w, _ = lapack.dpotri(chol, lower=1)
    lik = likelihood.PatchLikelihood(z, coords)
    patch = Patch(z, coords, PredictorVector(5, 0.0), (0, 0))
    args = (geom.r2, geom.lag2)
    k = lambda: covmodel.kernels  # noqa: E731  resolved at call time
    return {
        "cov_matrix": lambda: k().cov_matrix(*args, f, g, p[0], p[2]),
        "cov_derivatives": lambda: k().cov_derivatives(*args, f, fl, g, dg, p[0], p[2]),
        "score_terms": lambda: k().score_terms(w, alpha, *args, f, fl, g, dg, p[0], p[2]),
        "loglik+grad": lambda: lik.value_and_grad(p),
        "fit sigma_e2": lambda: likelihood.estimate_sigma_e2(patch, (0.5, 0.1), 0.4),
    }


def bench(half_size=5, repeat=5):
    backends = {"python": _backend.python_kernels}
    if _backend.compiled_kernels is not None:
        backends["cython"] = _backend.compiled_kernels
    rows = {}
    for name, kern in backends.items():
        _use(kern)
        for case, fn in _cases(half_size).items():
            n, _ = timeit.Timer(fn).autorange()
            rows.setdefault(case, {})[name] = min(timeit.repeat(fn, number=n, repeat=repeat)) / n
    _use(_backend.kernels)
    return rows


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--half-size", type=int, default=5)
    ap.add_argument("--repeat", type=int, default=5)
    a = ap.parse_args()
    rows = bench(a.half_size, a.repeat)
    n = (2 * a.half_size + 1) ** 2 - 1
    print(f"patch {2 * a.half_size + 1}x{2 * a.half_size + 1} ({n} increments)")
    print(f"{'kernel':<16}{'python [us]':>14}{'cython [us]':>14}{'speedup':>10}")
    for case, t in rows.items():
        py, cy = t["python"] * 1e6, t.get("cython", np.nan) * 1e6
        print(f"{case:<16}{py:>14.1f}{cy:>14.1f}{py / cy:>10.2f}")


if __name__ == "__main__":
    main()
