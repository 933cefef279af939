# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled coordinate-descent kernels: the hot inner loops of every penalized fit.

See dpme._cd_py for the contracts; these are line-for-line ports with
sequential C reductions.
"""

import numpy as np
cimport numpy as cnp

cnp.import_array()


def cd_sweeps(const double[::1, :] x, const double[::1] w, double[::1] r,
              double[::1] beta, const long[::1] free_idx,
              const unsigned char[::1] penalized,
              double lam, double tol, long max_sweeps):
    """Residual-mode sweeps; r and beta updated in place."""
    cdef Py_ssize_t n = x.shape[0]
    cdef Py_ssize_t nfree = free_idx.shape[0]
    cdef Py_ssize_t i, k, j
    cdef long sweeps = 0
    cdef bint converged = (nfree == 0 or max_sweeps <= 0)
    cdef double s, rho, new, delta, max_delta, acc
    cdef double inv_n = 1.0 / n

    if converged:
        return 0, True

    col_scale_arr = np.empty(nfree, dtype=np.float64)
    cdef double[::1] col_scale = col_scale_arr
    with nogil:
        for k in range(nfree):
            j = free_idx[k]
            acc = 0.0
            for i in range(n):
                acc += w[i] * x[i, j] * x[i, j]
            col_scale[k] = acc * inv_n

        while sweeps < max_sweeps:
            sweeps += 1
            max_delta = 0.0
            for k in range(nfree):
                s = col_scale[k]
                if s <= 0.0:
                    continue
                j = free_idx[k]
                acc = 0.0
                for i in range(n):
                    acc += w[i] * x[i, j] * r[i]
                rho = acc * inv_n + s * beta[j]
                if penalized[j]:
                    if rho > lam:
                        new = (rho - lam) / s
                    elif rho < -lam:
                        new = (rho + lam) / s
                    else:
                        new = 0.0
                else:
                    new = rho / s
                delta = new - beta[j]
                if delta != 0.0:
                    for i in range(n):
                        r[i] -= delta * x[i, j]
                    beta[j] = new
                    if delta < 0.0:
                        delta = -delta
                    if delta > max_delta:
                        max_delta = delta
            if max_delta <= tol:
                converged = True
                break

    return sweeps, bool(converged)


def cd_sweeps_gram(const double[:, ::1] gram, double[::1] grad, double[::1] beta,
                   const long[::1] free_idx, const unsigned char[::1] penalized,
                   double lam, double tol, long max_sweeps):
    """Gram-mode sweeps; grad = x'W(z - offset - x beta)/n and beta updated in place."""
    cdef Py_ssize_t p = gram.shape[0]
    cdef Py_ssize_t nfree = free_idx.shape[0]
    cdef Py_ssize_t i, k, j
    cdef long sweeps = 0
    cdef bint converged = (nfree == 0 or max_sweeps <= 0)
    cdef double s, rho, new, delta, max_delta

    if converged:
        return 0, True

    with nogil:
        while sweeps < max_sweeps:
            sweeps += 1
            max_delta = 0.0
            for k in range(nfree):
                j = free_idx[k]
                s = gram[j, j]
                if s <= 0.0:
                    continue
                rho = grad[j] + s * beta[j]
                if penalized[j]:
                    if rho > lam:
                        new = (rho - lam) / s
                    elif rho < -lam:
                        new = (rho + lam) / s
                    else:
                        new = 0.0
                else:
                    new = rho / s
                delta = new - beta[j]
                if delta != 0.0:
                    for i in range(p):
                        grad[i] -= delta * gram[j, i]
                    beta[j] = new
                    if delta < 0.0:
                        delta = -delta
                    if delta > max_delta:
                        max_delta = delta
            if max_delta <= tol:
                converged = True
                break

    return sweeps, bool(converged)
