"""Penalized M-estimation by cyclic coordinate descent.

One solver covers all three families: the linear family is a single penalized
weighted least-squares problem, the logistic families wrap the same inner
kernel in an outer iteratively-reweighted least-squares loop.  Coordinates can
be pinned to fixed values; they are kept in the coefficient vector, never
updated, and carry no penalty.  A fit is reported converged only if its exact
subgradient (KKT) residual is within kkt_tol, so the converged flag is a
certificate, not a hope.

The inner kernel runs in one of two modes chosen by shape: residual mode
(O(n) per coordinate update) when p > n, Gram mode (O(p) per update on a
precomputed x'Wx/n) when p <= n.  Both modes live in the compiled extension
with a pure-Python fallback.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from ._backend import cd_sweeps, cd_sweeps_gram
from .core import (
    Dataset,
    Family,
    FitResult,
    InputError,
    ModelSpec,
    NumericalError,
    PinSet,
    _row_masses,
    empirical_m,
    m_eta_gradient,
    m_values,
    sigmoid,
)

PROB_FLOOR = 1e-8  # fitted probabilities this close to 0/1 get their IRLS weight floored


class SolverError(NumericalError):
    """Non-convergence or degeneracy inside a penalized fit."""

    def __init__(self, message, stage="solver", pins: Optional[PinSet] = None):
        super().__init__(message, stage=stage)
        self.pins = pins


@dataclass(frozen=True)
class SolverConfig:
    max_iter: int = 10000          # total coordinate-descent sweeps per fit
    tol: float = 1e-7              # max absolute coefficient change per sweep
    kkt_tol: float = 1e-5
    cv_folds: int = 10
    lambda_grid_size: int = 100
    lambda_min_ratio: float = 1e-3
    seed: int = 0
    irls_max_iter: int = 50
    irls_tol: float = 1e-7         # max absolute linear-predictor change per outer pass

    def __post_init__(self):
        if self.max_iter < 1:
            raise InputError("max_iter must be >= 1")
        if self.tol <= 0 or self.kkt_tol <= 0:
            raise InputError("tol and kkt_tol must be positive")
        if self.cv_folds < 2:
            raise InputError("cv_folds must be >= 2")


DEFAULT_CONFIG = SolverConfig()


def _free_and_penalized(dataset: Dataset, pins: PinSet):
    pins.validate_for(dataset.p)
    pinned = np.zeros(dataset.p, dtype=bool)
    if len(pins):
        pinned[list(pins.indices)] = True
    free_idx = np.flatnonzero(~pinned).astype(np.int64)
    # an exactly-constant nonzero column acts as the intercept and is never penalized
    col_min = dataset.x.min(axis=0)
    col_max = dataset.x.max(axis=0)
    constant = (col_min == col_max) & (col_min != 0.0)
    penalized = (~pinned & ~constant).astype(np.uint8)
    return free_idx, penalized


def _apply_pins(beta: np.ndarray, pins: PinSet):
    for j, v in zip(pins.indices, pins.values):
        beta[j] = v


def _penalty_l1(beta, free_idx, penalized):
    if len(free_idx) == 0:
        return 0.0
    mask = penalized[free_idx].astype(bool)
    return float(np.abs(beta[free_idx][mask]).sum())


def _kkt_from_gradient(g, beta, lam, free_idx, penalized) -> float:
    if len(free_idx) == 0:
        return 0.0
    viol = 0.0
    for j in free_idx:
        if penalized[j]:
            if beta[j] == 0.0:
                v = abs(g[j]) - lam
                v = v if v > 0.0 else 0.0
            else:
                v = abs(g[j] - lam * np.sign(beta[j]))
        else:
            v = abs(g[j])
        if v > viol:
            viol = v
    return float(viol)


def kkt_residual(model: ModelSpec, dataset: Dataset, beta, lam: float,
                 pins: PinSet = PinSet()) -> float:
    """Largest subgradient-optimality violation over the free coordinates."""
    beta = np.asarray(beta, dtype=np.float64)
    free_idx, penalized = _free_and_penalized(dataset, pins)
    eta = dataset.x @ beta
    g = dataset.x.T @ m_eta_gradient(model, dataset, eta) / dataset.n
    return _kkt_from_gradient(g, beta, lam, free_idx, penalized)


def fit_penalized(model: ModelSpec, dataset: Dataset, lam: float,
                  pins: PinSet = PinSet(), warm_start=None,
                  config: SolverConfig = DEFAULT_CONFIG) -> FitResult:
    """Maximize the empirical objective minus lam * l1 over the free coordinates."""
    if lam < 0:
        raise InputError(f"lambda must be nonnegative, got {lam}")
    free_idx, penalized = _free_and_penalized(dataset, pins)

    beta = np.zeros(dataset.p)
    if warm_start is not None:
        ws = np.asarray(warm_start, dtype=np.float64)
        if ws.shape != (dataset.p,):
            raise InputError("warm_start must have length p")
        beta[free_idx] = ws[free_idx]
    _apply_pins(beta, pins)

    if len(free_idx) == 0:
        unpen = empirical_m(model, dataset, beta)
        return FitResult(beta=beta, lam=lam, penalized_objective=unpen,
                         unpenalized_objective=unpen, iterations=0,
                         converged=True, kkt=0.0)

    if model.family is Family.LINEAR:
        beta, sweeps, kkt = _fit_linear(model, dataset, lam, beta, free_idx,
                                        penalized, config)
    else:
        beta, sweeps, kkt = _fit_irls(model, dataset, lam, beta, free_idx,
                                      penalized, config)

    unpen = empirical_m(model, dataset, beta)
    pen = unpen - lam * _penalty_l1(beta, free_idx, penalized)
    return FitResult(beta=beta, lam=lam, penalized_objective=pen,
                     unpenalized_objective=unpen, iterations=sweeps,
                     converged=bool(kkt <= config.kkt_tol), kkt=kkt)


def _linear_gram(dataset: Dataset):
    """x'Wx/n and x'Wy/n for the fixed per-dataset weights, computed once."""
    cached = getattr(dataset, "_lin_gram", None)
    if cached is None:
        w = dataset.obs_weights if dataset.obs_weights is not None else None
        xw = dataset.x if w is None else dataset.x * w[:, None]
        gram = np.ascontiguousarray(dataset.x.T @ xw / dataset.n)
        wy = dataset.y if w is None else w * dataset.y
        xty = dataset.x.T @ wy / dataset.n
        cached = (gram, xty)
        object.__setattr__(dataset, "_lin_gram", cached)
    return cached


def _work_set(beta, free_idx, penalized):
    """Free coordinates to sweep: current support plus every unpenalized one."""
    keep = (beta[free_idx] != 0.0) | (penalized[free_idx] == 0)
    return np.ascontiguousarray(free_idx[keep])


def _violators(g, beta, lam, free_idx, penalized, work):
    in_work = np.zeros(len(penalized), dtype=bool)
    in_work[work] = True
    out = [j for j in free_idx
           if not in_work[j] and penalized[j] and abs(g[j]) > lam and beta[j] == 0.0]
    return np.asarray(out, dtype=np.int64)


def _fit_linear(model, dataset, lam, beta, free_idx, penalized, config):
    x, n = dataset.x, dataset.n
    total_sweeps = 0
    kkt = np.inf
    use_gram = dataset.p <= n
    if use_gram:
        gram, xty = _linear_gram(dataset)
        grad = np.ascontiguousarray(xty - gram @ beta)
    else:
        w = dataset.obs_weights if dataset.obs_weights is not None else np.ones(n)
        w = np.ascontiguousarray(w)
        r = np.ascontiguousarray(dataset.y - x @ beta)
    work = _work_set(beta, free_idx, penalized)
    tol = config.tol
    while total_sweeps < config.max_iter:
        budget = int(config.max_iter - total_sweeps)
        if use_gram:
            sweeps, _ = cd_sweeps_gram(gram, grad, beta, work, penalized,
                                       float(lam), float(tol), budget)
            g = grad  # maintained Gram gradient is the exact objective gradient
        else:
            sweeps, _ = cd_sweeps(x, w, r, beta, work, penalized,
                                  float(lam), float(tol), budget)
            g = x.T @ (w * r) / n
        total_sweeps += sweeps
        newcomers = _violators(g, beta, lam, free_idx, penalized, work)
        if len(newcomers):
            work = np.ascontiguousarray(np.sort(np.concatenate([work, newcomers])))
            continue
        kkt = _kkt_from_gradient(g, beta, lam, free_idx, penalized)
        if kkt <= config.kkt_tol or tol < 1e-15:
            break
        tol *= 0.1  # coefficient tolerance met but certificate not yet: tighten
    return beta, total_sweeps, kkt


def _fit_irls(model, dataset, lam, beta, free_idx, penalized, config):
    """Outer reweighting loop; each pass solves the local quadratic restricted
    to the working set (current support plus unpenalized), step-halving if the
    penalized objective would fall, with KKT violators admitted whenever the
    linear predictor has settled."""
    total, frac = _row_masses(model, dataset)
    total = np.ascontiguousarray(total, dtype=np.float64)
    x, n = dataset.x, dataset.n
    eta = x @ beta
    total_sweeps = 0
    kkt = np.inf
    work = _work_set(beta, free_idx, penalized)
    x_ws = None

    def objective(eta_vec, beta_vec):
        # mean objective minus penalty, from the linear predictor directly
        vals = total * (frac * eta_vec - np.logaddexp(0.0, eta_vec))
        return float(vals.mean()) - lam * _penalty_l1(beta_vec, free_idx, penalized)

    current_obj = objective(eta, beta)
    for _ in range(config.irls_max_iter):
        sig = sigmoid(eta)
        v = sig * (1.0 - sig)
        v = np.where((sig < PROB_FLOOR) | (sig > 1.0 - PROB_FLOOR), PROB_FLOOR, v)
        w_work = total * v
        # rows with zero mass contribute nothing; their working residual stays 0
        with np.errstate(invalid="ignore", divide="ignore"):
            shift = np.where(total > 0, (frac - sig) / v, 0.0)
        budget = config.max_iter - total_sweeps
        if budget <= 0:
            break
        delta_eta = 0.0
        if len(work):
            if x_ws is None:
                x_ws = np.asfortranarray(x[:, work])
                pen_sub = np.ascontiguousarray(penalized[work])
                sub_idx = np.arange(len(work), dtype=np.int64)
            gram_ws = np.ascontiguousarray(x_ws.T @ (x_ws * w_work[:, None]) / n)
            grad_ws = np.ascontiguousarray(x_ws.T @ (w_work * shift) / n)
            beta_sub = np.ascontiguousarray(beta[work])
            before = beta_sub.copy()
            sweeps, _ = cd_sweeps_gram(gram_ws, grad_ws, beta_sub, sub_idx, pen_sub,
                                       float(lam), float(config.tol), int(budget))
            total_sweeps += sweeps
            eta_prev = eta
            eta = eta + x_ws @ (beta_sub - before)
            new_obj = objective(eta, _scatter(beta, work, beta_sub))
            halvings = 0
            while new_obj < current_obj - 1e-12 and halvings < 30:
                # saturated weights can make the quadratic model overshoot
                beta_sub = 0.5 * (beta_sub + before)
                eta = 0.5 * (eta + eta_prev)
                new_obj = objective(eta, _scatter(beta, work, beta_sub))
                halvings += 1
            beta[work] = beta_sub
            current_obj = new_obj
            delta_eta = float(np.max(np.abs(eta - eta_prev)))
        if delta_eta <= config.irls_tol:
            g = x.T @ m_eta_gradient(model, dataset, eta) / n
            newcomers = _violators(g, beta, lam, free_idx, penalized, work)
            if len(newcomers):
                work = np.ascontiguousarray(np.sort(np.concatenate([work, newcomers])))
                x_ws = None
                continue
            kkt = _kkt_from_gradient(g, beta, lam, free_idx, penalized)
            if kkt <= config.kkt_tol:
                break
    if not np.isfinite(kkt) or kkt > config.kkt_tol:
        g = x.T @ m_eta_gradient(model, dataset, x @ beta) / n
        kkt = _kkt_from_gradient(g, beta, lam, free_idx, penalized)
    return beta, total_sweeps, kkt


def _scatter(beta, work, beta_sub):
    out = beta.copy()
    out[work] = beta_sub
    return out


def _take(dataset: Dataset, idx) -> Dataset:
    return Dataset(
        x=dataset.x[idx],
        y=dataset.y[idx],
        treatment=None if dataset.treatment is None else dataset.treatment[idx],
        obs_weights=None if dataset.obs_weights is None else dataset.obs_weights[idx],
    )


def _model_take(model: ModelSpec, idx) -> ModelSpec:
    if model.family is Family.WEIGHTED_LOGISTIC:
        return ModelSpec(family=model.family,
                         weights_pos=model.weights_pos[idx],
                         weights_neg=model.weights_neg[idx])
    return model


def _null_gradient(model, dataset, pins, free_idx, penalized, config):
    """Gradient at the solution with all penalized coordinates forced to zero."""
    if (penalized[free_idx] == 0).any():
        fit = fit_penalized(model, dataset, 1e300, pins=pins, config=config)
        beta = fit.beta.copy()
    else:
        beta = np.zeros(dataset.p)
        _apply_pins(beta, pins)
    eta = dataset.x @ beta
    return dataset.x.T @ m_eta_gradient(model, dataset, eta) / dataset.n


def lambda_grid(model: ModelSpec, dataset: Dataset, pins: PinSet = PinSet(),
                config: SolverConfig = DEFAULT_CONFIG) -> np.ndarray:
    """Decreasing log-spaced grid from lambda_max (all free coefficients zero)."""
    free_idx, penalized = _free_and_penalized(dataset, pins)
    pen_free = free_idx[penalized[free_idx].astype(bool)]
    if len(pen_free) == 0:
        return np.array([0.0])
    g = _null_gradient(model, dataset, pins, free_idx, penalized, config)
    lam_max = max(float(np.max(np.abs(g[pen_free]))), 1e-10)
    return np.geomspace(lam_max, lam_max * config.lambda_min_ratio,
                        config.lambda_grid_size)


def _fold_indices(n: int, folds: int, seed: int):
    perm = np.random.Generator(np.random.Philox(key=np.uint64(seed))).permutation(n)
    return [np.sort(chunk) for chunk in np.array_split(perm, folds)]


def _fold_degenerate(model: ModelSpec, dataset: Dataset, train_idx) -> bool:
    if len(train_idx) < 1:
        return True
    if model.family is Family.LOGISTIC:
        y = dataset.y[train_idx]
        return bool(y.min() == y.max())
    if model.family is Family.WEIGHTED_LOGISTIC:
        mass = model.weights_pos[train_idx].sum() + model.weights_neg[train_idx].sum()
        return bool(mass <= 0)
    return False


def cv_select_lambda(model: ModelSpec, dataset: Dataset, pins: PinSet = PinSet(),
                     config: SolverConfig = DEFAULT_CONFIG) -> float:
    """Pick lambda minimizing the mean out-of-fold negative objective value."""
    if dataset.n < config.cv_folds:
        raise InputError(f"n={dataset.n} is below cv_folds={config.cv_folds}")
    grid = lambda_grid(model, dataset, pins, config)
    if len(grid) == 1 and grid[0] == 0.0:
        return 0.0

    for attempt, seed in enumerate((config.seed, config.seed + 1)):
        folds = _fold_indices(dataset.n, config.cv_folds, seed)
        losses = np.zeros((len(folds), len(grid)))
        used = np.zeros(len(folds), dtype=bool)
        all_rows = np.arange(dataset.n)
        for f, val_idx in enumerate(folds):
            train_idx = np.setdiff1d(all_rows, val_idx)
            if _fold_degenerate(model, dataset, train_idx):
                continue
            used[f] = True
            train = _take(dataset, train_idx)
            m_train = _model_take(model, train_idx)
            warm = None
            for g, lam in enumerate(grid):
                fit = fit_penalized(m_train, train, float(lam), pins=pins,
                                    warm_start=warm, config=config)
                warm = fit.beta
                # full-sample values indexed by the fold keep single-row folds legal
                losses[f, g] = -float(np.mean(m_values(model, dataset, fit.beta)[val_idx]))
        if used.any():
            mean_loss = losses[used].mean(axis=0)
            best = mean_loss.min()
            # grid is decreasing, so the largest index among ties is the smallest lambda
            pick = int(np.flatnonzero(mean_loss == best).max())
            return float(grid[pick])
        if attempt == 1:
            raise SolverError("all cross-validation folds are degenerate", stage="cv")
    raise SolverError("unreachable", stage="cv")


def config_with_seed(config: SolverConfig, seed: int) -> SolverConfig:
    return replace(config, seed=int(seed))
