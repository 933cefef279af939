"""Treatment-rule estimation with sample splitting and cross-fitting.

One half of the sample fits nuisances (kernel propensity and outcome models on
distance-correlation-screened covariates), the other half turns them into AIPW
pseudo-outcomes, decomposes them into nonnegative for/against masses, fits a
weighted-logistic lasso for the linear rule sign(x'beta), and debiases each
target coordinate with the masses held fixed.  Swapping the halves and
averaging gives the cross-fit estimate.  The application pipeline repeats the
whole split several times, reports coordinatewise medians, and combines the
p-values by harmonic mean.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Mapping, Sequence

import numpy as np
from scipy.spatial.distance import pdist, squareform
from scipy.special import ndtr, ndtri

from .core import Dataset, Family, InputError, ModelSpec, NumericalError
from .debias import DEFAULT_ALPHAS, run_dpme_per_coordinate
from .solvers import DEFAULT_CONFIG, SolverConfig, _take, config_with_seed, cv_select_lambda, fit_penalized

PROPENSITY_CLIP = (0.05, 0.95)
SCREEN_COUNT = 4


class ScreenTarget(Enum):
    PROPENSITY = "propensity"
    OUTCOME = "outcome"


def split_sample(n: int, seed: int):
    """Deterministic half split: ceil(n/2) training rows, floor(n/2) inference rows."""
    if n < 4:
        raise InputError(f"need at least 4 observations to split, got {n}")
    rng = np.random.Generator(np.random.Philox(key=np.uint64(seed)))
    perm = rng.permutation(n)
    cut = (n + 1) // 2
    return np.sort(perm[:cut]), np.sort(perm[cut:])


def _centered_distances(v: np.ndarray) -> np.ndarray:
    d = squareform(pdist(v[:, None]))
    return d - d.mean(axis=0)[None, :] - d.mean(axis=1)[:, None] + d.mean()


def _dcov2(a_centered, b_centered) -> float:
    n = a_centered.shape[0]
    return float((a_centered * b_centered).sum()) / (n * n)


def distance_correlation(u, v) -> float:
    """Sample distance correlation in [0, 1]; 0 for a constant argument."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.ndim != 1 or v.ndim != 1 or u.shape != v.shape or len(u) < 2:
        raise InputError("distance_correlation expects two equal-length vectors, n >= 2")
    if not (np.isfinite(u).all() and np.isfinite(v).all()):
        raise InputError("distance_correlation requires finite inputs")
    a = _centered_distances(u)
    b = _centered_distances(v)
    duu = _dcov2(a, a)
    dvv = _dcov2(b, b)
    if duu <= 0 or dvv <= 0:
        return 0.0
    duv = _dcov2(a, b)
    if duv <= 0:
        return 0.0
    return float(np.sqrt(duv) / np.sqrt(np.sqrt(duu) * np.sqrt(dvv)))


def screen_covariates(dataset: Dataset, target: ScreenTarget, k: int = SCREEN_COUNT):
    """Indices of the k covariates most distance-correlated with A or Y."""
    if k > dataset.p:
        raise InputError(f"k={k} exceeds p={dataset.p}")
    if target is ScreenTarget.PROPENSITY:
        if dataset.treatment is None:
            raise InputError("propensity screening needs a treatment column")
        ref = dataset.treatment
    else:
        ref = dataset.y
    b = _centered_distances(np.asarray(ref, dtype=np.float64))
    dvv = _dcov2(b, b)
    scores = np.zeros(dataset.p)
    if dvv > 0:
        for j in range(dataset.p):
            a = _centered_distances(dataset.x[:, j])
            duu = _dcov2(a, a)
            if duu <= 0:
                continue
            duv = _dcov2(a, b)
            if duv > 0:
                scores[j] = np.sqrt(duv) / np.sqrt(np.sqrt(duu) * np.sqrt(dvv))
    order = np.argsort(-scores, kind="stable")  # ties resolve to the lower index
    return np.sort(order[:k])


def kernel_regress(train_x, train_y, bandwidth: float, query) -> float:
    """Nadaraya-Watson estimate with a product Gaussian kernel."""
    out = kernel_regress_batch(train_x, train_y, bandwidth,
                               np.atleast_2d(np.asarray(query, dtype=np.float64)))
    return float(out[0])


def kernel_regress_batch(train_x, train_y, bandwidth: float, queries) -> np.ndarray:
    if bandwidth <= 0:
        raise InputError("bandwidth must be positive")
    train_x = np.atleast_2d(np.asarray(train_x, dtype=np.float64))
    train_y = np.asarray(train_y, dtype=np.float64)
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    if len(train_y) < 1:
        raise InputError("kernel_regress needs at least one training point")
    # squared distances between each query and each training point
    d2 = ((queries[:, None, :] - train_x[None, :, :]) ** 2).sum(axis=2)
    k = np.exp(-0.5 * d2 / (bandwidth * bandwidth))
    mass = k.sum(axis=1)
    fallback = float(train_y.mean())
    with np.errstate(invalid="ignore", divide="ignore"):
        est = np.where(mass >= 1e-12, (k @ train_y) / np.where(mass > 0, mass, 1.0), fallback)
    return est


@dataclass(frozen=True)
class NuisanceFit:
    """Kernel nuisance models fit on the training half."""

    screened_indices_pi: tuple
    screened_indices_mu: tuple
    bandwidth: float
    train_x_pi: np.ndarray
    train_a_pos: np.ndarray          # indicator of treatment +1
    train_x_mu_pos: np.ndarray
    train_y_pos: np.ndarray
    train_x_mu_neg: np.ndarray
    train_y_neg: np.ndarray

    def propensity(self, x) -> np.ndarray:
        """Clipped P(A=1 | X) on rows of x."""
        q = np.atleast_2d(np.asarray(x, dtype=np.float64))[:, list(self.screened_indices_pi)]
        p1 = kernel_regress_batch(self.train_x_pi, self.train_a_pos, self.bandwidth, q)
        return np.clip(p1, *PROPENSITY_CLIP)

    def outcome(self, x, arm: int) -> np.ndarray:
        q = np.atleast_2d(np.asarray(x, dtype=np.float64))[:, list(self.screened_indices_mu)]
        if arm == 1:
            return kernel_regress_batch(self.train_x_mu_pos, self.train_y_pos,
                                        self.bandwidth, q)
        return kernel_regress_batch(self.train_x_mu_neg, self.train_y_neg,
                                    self.bandwidth, q)


def fit_nuisances(train_data: Dataset, k: int = SCREEN_COUNT) -> NuisanceFit:
    if train_data.treatment is None:
        raise InputError("nuisance fitting needs a treatment column")
    idx_pi = screen_covariates(train_data, ScreenTarget.PROPENSITY, k)
    idx_mu = screen_covariates(train_data, ScreenTarget.OUTCOME, k)
    m = train_data.n
    bandwidth = (1.5 * m) ** (-1.0 / 5.0)
    pos = train_data.treatment > 0
    if not pos.any() or pos.all():
        raise NumericalError("training half contains a single treatment arm",
                             stage="nuisance")
    return NuisanceFit(
        screened_indices_pi=tuple(int(i) for i in idx_pi),
        screened_indices_mu=tuple(int(i) for i in idx_mu),
        bandwidth=float(bandwidth),
        train_x_pi=train_data.x[:, idx_pi].copy(),
        train_a_pos=(train_data.treatment > 0).astype(np.float64),
        train_x_mu_pos=train_data.x[np.flatnonzero(pos)][:, idx_mu].copy(),
        train_y_pos=train_data.y[pos].copy(),
        train_x_mu_neg=train_data.x[np.flatnonzero(~pos)][:, idx_mu].copy(),
        train_y_neg=train_data.y[~pos].copy(),
    )


@dataclass(frozen=True)
class PseudoOutcomes:
    """AIPW potential-outcome estimates and their sign-decomposed masses."""

    y_hat_pos: np.ndarray
    y_hat_neg: np.ndarray
    omega_pos: np.ndarray
    omega_neg: np.ndarray


def aipw_pseudo_outcomes(infer_data: Dataset, nuisance: NuisanceFit) -> PseudoOutcomes:
    if infer_data.treatment is None:
        raise InputError("pseudo-outcomes need a treatment column")
    p1 = nuisance.propensity(infer_data.x)
    a = infer_data.treatment
    y = infer_data.y
    out = {}
    for arm, pi_arm in ((1, p1), (-1, 1.0 - p1)):
        mu = nuisance.outcome(infer_data.x, arm)
        ind = (a == arm).astype(np.float64)
        out[arm] = ind / pi_arm * (y - mu) + mu
    omega_pos = np.maximum(out[1], 0.0) + np.maximum(-out[-1], 0.0)
    omega_neg = np.maximum(-out[1], 0.0) + np.maximum(out[-1], 0.0)
    return PseudoOutcomes(y_hat_pos=out[1], y_hat_neg=out[-1],
                          omega_pos=omega_pos, omega_neg=omega_neg)


def estimate_value(infer_data: Dataset, pseudo: PseudoOutcomes, beta) -> float:
    """Plug-in value of the rule sign(x'beta); sign(0) counts as +1."""
    beta = np.asarray(beta, dtype=np.float64)
    if beta.shape != (infer_data.p,):
        raise InputError(f"beta must have length {infer_data.p}")
    d_pos = infer_data.x @ beta >= 0
    return float(np.mean(np.where(d_pos, pseudo.y_hat_pos, pseudo.y_hat_neg)))


@dataclass(frozen=True)
class ItrResult:
    """Cross-fit averaged treatment-rule estimates for the target coordinates."""

    targets: tuple
    theta: np.ndarray
    se: np.ndarray
    ci: Mapping[float, tuple]
    p_values: np.ndarray
    theta_halves: tuple          # (half-1 vector, half-2 vector)
    var_halves: tuple
    lam_halves: tuple
    rule_beta: np.ndarray        # full-length rule vector used for recommendations
    recommendations: np.ndarray
    value_estimate: float


def _debias_half(dataset, train_idx, infer_idx, targets, seed, config, k):
    nuis = fit_nuisances(_take(dataset, train_idx), k=k)
    infer = _take(dataset, infer_idx)
    pseudo = aipw_pseudo_outcomes(infer, nuis)
    infer_plain = Dataset(x=infer.x, y=np.zeros(infer.n))  # response lives in the masses
    model = ModelSpec(family=Family.WEIGHTED_LOGISTIC,
                      weights_pos=pseudo.omega_pos, weights_neg=pseudo.omega_neg)
    cfg = config_with_seed(config, seed)
    lam = cv_select_lambda(model, infer_plain, config=cfg)
    init = fit_penalized(model, infer_plain, lam, config=cfg)
    per_coord = run_dpme_per_coordinate(model, infer_plain, targets, config=cfg,
                                        lam=lam, init_fit=init)
    theta = np.array([per_coord[j].theta_debiased[0] for j in targets])
    var = np.array([per_coord[j].cov[0, 0] for j in targets])
    return theta, var, float(lam), init.beta, pseudo


def fit_itr_dpme(dataset: Dataset, target_indices, seed: int = 0,
                 config: SolverConfig = DEFAULT_CONFIG,
                 alphas: Sequence[float] = DEFAULT_ALPHAS,
                 k: int = SCREEN_COUNT) -> ItrResult:
    """Split, screen, fit nuisances, debias per coordinate, cross-fit, average."""
    if dataset.treatment is None:
        raise InputError("treatment-rule estimation needs a treatment column")
    targets = tuple(int(i) for i in target_indices)
    part_a, part_b = split_sample(dataset.n, seed)
    sub_seeds = np.random.Generator(np.random.Philox(key=np.uint64(seed))).integers(
        0, 2**62, size=2)
    halves = []
    for half, (train_idx, infer_idx) in enumerate(((part_a, part_b), (part_b, part_a))):
        try:
            halves.append(_debias_half(dataset, train_idx, infer_idx, targets,
                                       int(sub_seeds[half]), config, k))
        except NumericalError as e:
            raise NumericalError(f"half {half + 1}: {e}", stage=e.stage) from e
    (t1, v1, lam1, beta1, pseudo1), (t2, v2, lam2, beta2, pseudo2) = halves

    theta = 0.5 * (t1 + t2)
    var = 0.25 * (v1 + v2)
    se = np.sqrt(var)
    ci = {}
    for alpha in alphas:
        z = ndtri(1.0 - alpha / 2.0)
        ci[round(1.0 - alpha, 6)] = (theta - z * se, theta + z * se)
    with np.errstate(divide="ignore", invalid="ignore"):
        zscore = np.where(se > 0, np.abs(theta) / np.where(se > 0, se, 1.0), np.inf)
    p_values = 2.0 * ndtr(-zscore)

    rule = 0.5 * (beta1 + beta2)
    rule[list(targets)] = theta
    recommendations = np.where(dataset.x @ rule >= 0, 1.0, -1.0)
    # each observation appears in exactly one inference half
    value = 0.5 * (estimate_value(_take(dataset, part_b), pseudo1, rule)
                   + estimate_value(_take(dataset, part_a), pseudo2, rule))
    return ItrResult(targets=targets, theta=theta, se=se, ci=ci, p_values=p_values,
                     theta_halves=(t1, t2), var_halves=(v1, v2),
                     lam_halves=(lam1, lam2), rule_beta=rule,
                     recommendations=recommendations, value_estimate=value)


def harmonic_mean_pvalue(p_values) -> float:
    """L / sum(1/p_l), clipped into (0, 1]."""
    ps = np.asarray(p_values, dtype=np.float64)
    if ps.ndim != 1 or len(ps) < 1:
        raise InputError("need at least one p-value")
    if (ps <= 0).any() or (ps > 1).any() or not np.isfinite(ps).all():
        raise InputError("p-values must lie in (0, 1]")
    return float(min(1.0, len(ps) / np.sum(1.0 / ps)))


def repeated_split_analysis(dataset: Dataset, target_indices, repeats: int = 5,
                            base_seed: int = 0,
                            config: SolverConfig = DEFAULT_CONFIG,
                            k: int = SCREEN_COUNT):
    """Median estimates/SEs and harmonic-mean p-values over repeated splits.

    Returns (summary, failures); summary maps target index to a dict with
    median_estimate, median_se, p_value, n_success.
    """
    if repeats < 1:
        raise InputError("repeats must be >= 1")
    targets = tuple(int(i) for i in target_indices)
    results, failures = [], []
    for r in range(repeats):
        try:
            results.append(fit_itr_dpme(dataset, targets, seed=base_seed + r,
                                        config=config, k=k))
        except (NumericalError, InputError) as e:
            failures.append((base_seed + r, str(e)))
    needed = (repeats + 1) // 2
    if len(results) < needed:
        raise NumericalError(
            f"only {len(results)} of {repeats} repeated splits succeeded "
            f"(need {needed}); failures: {failures}", stage="repeated_splits")
    summary = {}
    for pos, j in enumerate(targets):
        est = np.array([r.theta[pos] for r in results])
        ses = np.array([r.se[pos] for r in results])
        pvals = np.array([max(r.p_values[pos], np.finfo(float).tiny) for r in results])
        summary[j] = {
            "median_estimate": float(np.median(est)),
            "median_se": float(np.median(ses)),
            "p_value": harmonic_mean_pvalue(pvals),
            "n_success": len(results),
        }
    return summary, failures


def prune_correlated_columns(x, threshold: float = 0.8):
    """Greedy scan keeping columns whose |corr| with every kept column <= threshold."""
    if not 0 < threshold < 1:
        raise InputError("threshold must lie in (0, 1)")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise InputError("x must be a matrix")
    centered = x - x.mean(axis=0)
    norms = np.sqrt((centered ** 2).sum(axis=0))
    retained = []
    for j in range(x.shape[1]):
        ok = True
        for r in retained:
            if norms[j] == 0 or norms[r] == 0:
                continue  # constant column: correlation treated as 0
            corr = abs(centered[:, j] @ centered[:, r]) / (norms[j] * norms[r])
            if corr > threshold:
                ok = False
                break
        if ok:
            retained.append(j)
    return retained
