"""Pure-Python coordinate-descent kernels (fallback when the compiled core is absent).

Same cyclic sweep order and update rules as the compiled kernels; only the
floating-point reduction order of the inner products differs (numpy vs a
sequential C loop), so the two backends agree to solver tolerance, not bitwise.

Two modes cover the same penalized weighted least squares problem
    (1/2n) sum_i w_i (z_i - offset_i - x_i'beta)^2 + lam * sum_{penalized} |beta_j|:
residual mode maintains r = z - offset - x @ beta (O(n) per update, preferred
when p > n) and Gram mode maintains the gradient c - G beta where G = x'Wx/n
(O(p) per update, preferred when p <= n).
"""

import numpy as np


def cd_sweeps(x, w, r, beta, free_idx, penalized, lam, tol, max_sweeps):
    """Residual-mode sweeps; r and beta updated in place.

    Returns (sweeps_done, converged) where converged means the largest absolute
    coefficient change in the final sweep was <= tol.
    """
    n = x.shape[0]
    if len(free_idx) == 0 or max_sweeps <= 0:
        return 0, True
    col_scale = np.empty(len(free_idx))
    for k, j in enumerate(free_idx):
        col_scale[k] = (w @ (x[:, j] * x[:, j])) / n
    sweeps = 0
    converged = False
    while sweeps < max_sweeps:
        sweeps += 1
        max_delta = 0.0
        for k, j in enumerate(free_idx):
            s = col_scale[k]
            if s <= 0.0:
                continue
            xj = x[:, j]
            rho = ((w * xj) @ r) / n + s * beta[j]
            if penalized[j]:
                new = np.sign(rho) * max(abs(rho) - lam, 0.0) / s
            else:
                new = rho / s
            delta = new - beta[j]
            if delta != 0.0:
                r -= delta * xj
                beta[j] = new
                if abs(delta) > max_delta:
                    max_delta = abs(delta)
        if max_delta <= tol:
            converged = True
            break
    return sweeps, converged


def cd_sweeps_gram(gram, grad, beta, free_idx, penalized, lam, tol, max_sweeps):
    """Gram-mode sweeps; grad = x'W(z - offset - x beta)/n and beta updated in place."""
    if len(free_idx) == 0 or max_sweeps <= 0:
        return 0, True
    sweeps = 0
    converged = False
    while sweeps < max_sweeps:
        sweeps += 1
        max_delta = 0.0
        for j in free_idx:
            s = gram[j, j]
            if s <= 0.0:
                continue
            rho = grad[j] + s * beta[j]
            if penalized[j]:
                new = np.sign(rho) * max(abs(rho) - lam, 0.0) / s
            else:
                new = rho / s
            delta = new - beta[j]
            if delta != 0.0:
                grad -= delta * gram[j]
                beta[j] = new
                if abs(delta) > max_delta:
                    max_delta = abs(delta)
        if max_delta <= tol:
            converged = True
            break
    return sweeps, converged
