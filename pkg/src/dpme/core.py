"""Shared data model: datasets, objective families, fit results, coordinate pins.

Every estimation problem in this package is a maximization of an empirical
objective (1/n) sum_i m(Z_i, beta) over coefficient vectors beta, optionally
minus an l1 penalty on a subset of coordinates.  Three m-families ship:

* linear:            m = -(y - x'beta)^2 / 2
* logistic:          m = y * x'beta - log(1 + exp(x'beta))
* weighted logistic: m = w_pos * x'beta - (w_pos + w_neg) * log(1 + exp(x'beta)),
  the replica form of a weighted Bernoulli log-likelihood with per-row
  positive/negative mass (used for treatment-rule estimation).

All types are frozen after construction and safe to share across workers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np


class DpmeError(Exception):
    """Base class for errors raised by this package."""


class InputError(DpmeError):
    """Invalid user-supplied data or configuration."""


class NumericalError(DpmeError):
    """A numerical failure (singularity, non-convergence) in a named stage."""

    def __init__(self, message, stage: str = ""):
        super().__init__(f"[{stage}] {message}" if stage else message)
        self.stage = stage


class Family(Enum):
    LINEAR = "linear"
    LOGISTIC = "logistic"
    WEIGHTED_LOGISTIC = "weighted_logistic"


def _as_readonly(a, dtype=np.float64, ndim=1):
    out = np.ascontiguousarray(np.asarray(a, dtype=dtype))
    if out.ndim != ndim:
        raise InputError(f"expected {ndim}-d array, got shape {out.shape}")
    out.setflags(write=False)
    return out


def softplus(t):
    """log(1 + exp(t)), finite for all finite t."""
    return np.logaddexp(0.0, t)


def sigmoid(t):
    """Logistic link, computed without overflow."""
    out = np.empty_like(t, dtype=np.float64)
    pos = t >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-t[pos]))
    e = np.exp(t[~pos])
    out[~pos] = e / (1.0 + e)
    return out


@dataclass(frozen=True)
class Dataset:
    """An n x p covariate matrix with response and optional treatment/weights.

    treatment, when present, must take values in {-1, +1}; obs_weights, when
    present, must be nonnegative with a positive sum.
    """

    x: np.ndarray
    y: np.ndarray
    treatment: Optional[np.ndarray] = None
    obs_weights: Optional[np.ndarray] = None

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float64)
        if x.ndim != 2:
            raise InputError(f"x must be 2-d, got shape {x.shape}")
        x = np.asfortranarray(x)  # column access dominates in the solver
        x.setflags(write=False)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", _as_readonly(self.y))
        n = x.shape[0]
        if n < 2:
            raise InputError(f"need at least 2 observations, got {n}")
        if self.y.shape[0] != n:
            raise InputError(f"y has {self.y.shape[0]} rows, x has {n}")
        if not (np.isfinite(x).all() and np.isfinite(self.y).all()):
            raise InputError("x and y must be finite")
        if self.treatment is not None:
            a = _as_readonly(self.treatment)
            if a.shape[0] != n:
                raise InputError("treatment length mismatch")
            if not np.isin(a, (-1.0, 1.0)).all():
                raise InputError("treatment must contain only -1 and +1")
            object.__setattr__(self, "treatment", a)
        if self.obs_weights is not None:
            w = _as_readonly(self.obs_weights)
            if w.shape[0] != n:
                raise InputError("obs_weights length mismatch")
            if not np.isfinite(w).all() or (w < 0).any() or w.sum() <= 0:
                raise InputError("obs_weights must be nonnegative with positive sum")
            object.__setattr__(self, "obs_weights", w)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def p(self) -> int:
        return self.x.shape[1]


@dataclass(frozen=True)
class ModelSpec:
    """An m-function family, plus the per-row masses for the weighted family."""

    family: Family
    weights_pos: Optional[np.ndarray] = None
    weights_neg: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.family is Family.WEIGHTED_LOGISTIC:
            if self.weights_pos is None or self.weights_neg is None:
                raise InputError("weighted_logistic requires weights_pos and weights_neg")
            wp = _as_readonly(self.weights_pos)
            wn = _as_readonly(self.weights_neg)
            if (wp < 0).any() or (wn < 0).any():
                raise InputError("weights_pos/weights_neg must be nonnegative")
            object.__setattr__(self, "weights_pos", wp)
            object.__setattr__(self, "weights_neg", wn)
        elif self.weights_pos is not None or self.weights_neg is not None:
            raise InputError(f"{self.family.value} forbids weights_pos/weights_neg")


@dataclass(frozen=True)
class PinSet:
    """Coordinates held fixed during a constrained fit.

    indices are sorted, distinct, in [0, p); values match one-to-one.  Pinning
    all p coordinates is allowed (the "fit" is then the pinned point itself).
    """

    indices: tuple = ()
    values: tuple = ()

    def __post_init__(self):
        idx = tuple(int(i) for i in self.indices)
        vals = tuple(float(v) for v in self.values)
        if len(idx) != len(vals):
            raise InputError("indices and values must have equal length")
        if len(set(idx)) != len(idx):
            raise InputError("pin indices must be distinct")
        if any(i < 0 for i in idx):
            raise InputError("pin indices must be nonnegative")
        order = np.argsort(idx, kind="stable")
        object.__setattr__(self, "indices", tuple(idx[i] for i in order))
        object.__setattr__(self, "values", tuple(vals[i] for i in order))

    def __len__(self) -> int:
        return len(self.indices)

    def validate_for(self, p: int):
        if len(self) and self.indices[-1] >= p:
            raise InputError(f"pin index {self.indices[-1]} out of range for p={p}")

    def key(self) -> tuple:
        """Hashable identity keyed on exact float bytes."""
        return (self.indices, np.asarray(self.values, dtype=np.float64).tobytes())


@dataclass(frozen=True)
class FitResult:
    """Solution of one penalized fit.

    unpenalized_objective is the empirical mean of m at beta; when coordinates
    are pinned this is exactly the profile objective value at those pins.
    """

    beta: np.ndarray
    lam: float
    penalized_objective: float
    unpenalized_objective: float
    iterations: int
    converged: bool
    kkt: float = float("nan")

    def __post_init__(self):
        object.__setattr__(self, "beta", _as_readonly(self.beta))


def _row_masses(model: ModelSpec, dataset: Dataset):
    """Per-row (total mass, positive fraction) for the bernoulli-type families."""
    w = dataset.obs_weights if dataset.obs_weights is not None else 1.0
    if model.family is Family.LOGISTIC:
        total = np.broadcast_to(np.asarray(w, dtype=np.float64), (dataset.n,)).copy()
        frac = dataset.y
    else:
        total = np.asarray(w) * (model.weights_pos + model.weights_neg)
        with np.errstate(invalid="ignore", divide="ignore"):
            frac = np.where(total > 0, np.asarray(w) * model.weights_pos / np.where(total > 0, total, 1.0), 0.0)
    return total, frac


def m_values(model: ModelSpec, dataset: Dataset, beta) -> np.ndarray:
    """Vector of per-observation objective values m(Z_i, beta)."""
    beta = np.asarray(beta, dtype=np.float64)
    if beta.shape != (dataset.p,):
        raise InputError(f"beta must have length {dataset.p}, got {beta.shape}")
    eta = dataset.x @ beta
    w = dataset.obs_weights if dataset.obs_weights is not None else 1.0
    if model.family is Family.LINEAR:
        r = dataset.y - eta
        return -0.5 * w * r * r
    if model.family is Family.LOGISTIC:
        return w * (dataset.y * eta - softplus(eta))
    total = np.asarray(w) * (model.weights_pos + model.weights_neg)
    pos = np.asarray(w) * model.weights_pos
    return pos * eta - total * softplus(eta)


def m_value(model: ModelSpec, dataset: Dataset, beta, i: int) -> float:
    """m(Z_i, beta); the mean over i equals empirical_m."""
    if not 0 <= i < dataset.n:
        raise InputError(f"observation index {i} out of range")
    return float(m_values(model, dataset, beta)[i])


def empirical_m(model: ModelSpec, dataset: Dataset, beta) -> float:
    """Empirical objective (1/n) sum_i m(Z_i, beta)."""
    return float(np.mean(m_values(model, dataset, beta)))


def m_eta_gradient(model: ModelSpec, dataset: Dataset, eta: np.ndarray) -> np.ndarray:
    """d m_i / d eta_i at linear predictor eta, one entry per observation."""
    w = dataset.obs_weights if dataset.obs_weights is not None else 1.0
    if model.family is Family.LINEAR:
        return w * (dataset.y - eta)
    total, frac = _row_masses(model, dataset)
    return total * (frac - sigmoid(eta))
