"""Debiased profile M-estimation with l1-penalized initial fits.

Penalized fits (linear, logistic, weighted-logistic lasso), profiled
constrained refits, numerical differentiation of the profile objective, a
one-step debiasing update with sandwich confidence intervals, treatment-rule
estimation with cross-fitting, and a Monte Carlo harness.
"""

from ._backend import BACKEND
from .core import (
    Dataset,
    DpmeError,
    Family,
    FitResult,
    InputError,
    ModelSpec,
    NumericalError,
    PinSet,
    empirical_m,
    m_value,
    m_values,
)
from .debias import (
    DebiasResult,
    PerturbationPlan,
    ProfileEvaluator,
    default_step,
    numeric_gradient,
    numeric_hessian,
    one_step_update,
    profile_value,
    run_dpme,
    run_dpme_per_coordinate,
    sandwich_variance,
)
from .solvers import (
    SolverConfig,
    SolverError,
    cv_select_lambda,
    fit_penalized,
    kkt_residual,
    lambda_grid,
)

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "Dataset",
    "DebiasResult",
    "DpmeError",
    "Family",
    "FitResult",
    "InputError",
    "ModelSpec",
    "NumericalError",
    "PerturbationPlan",
    "PinSet",
    "ProfileEvaluator",
    "SolverConfig",
    "SolverError",
    "cv_select_lambda",
    "default_step",
    "empirical_m",
    "fit_penalized",
    "kkt_residual",
    "lambda_grid",
    "m_value",
    "m_values",
    "numeric_gradient",
    "numeric_hessian",
    "one_step_update",
    "profile_value",
    "run_dpme",
    "run_dpme_per_coordinate",
    "sandwich_variance",
]
