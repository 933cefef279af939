"""Data-generating processes and the Monte Carlo coverage harness.

Covariates for the linear/logistic scenarios come in blocks of four sharing a
uniform common factor (within-block correlation 0.5, entries in [0, 1]), plus
a trailing intercept column of ones appended by the outcome generators (the
covariate generator itself stays pure).  The treatment-rule scenario draws
independent standard normal covariates, heteroskedastic potential outcomes,
and a logistic treatment assignment.

Replicates run on a process pool with one Philox substream per (seed,
replicate) pair, so reports are bitwise identical for any worker count.  Wall
times are kept in memory and in the log only; emitted CSV/JSON are fully
deterministic.
"""

from __future__ import annotations

import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Optional

import numpy as np

from .core import Dataset, DpmeError, Family, InputError, ModelSpec, sigmoid
from .debias import run_dpme_per_coordinate
from .itr import fit_itr_dpme
from .solvers import DEFAULT_CONFIG, SolverConfig, config_with_seed, cv_select_lambda, fit_penalized

LINEAR_SUPPORT = 5
ITR_DELTA = (-1.0, -1.0, 1.0, 1.0)
ITR_SCALE = (-1.0, 1.0, -1.0, -1.0)
ITR_PROP = (0.0, 0.0, 1.0, -1.0)


class ScenarioKind(Enum):
    LINEAR = "linear"
    LOGISTIC = "logistic"
    ITR = "itr"


@dataclass(frozen=True)
class Scenario:
    kind: ScenarioKind
    n: int
    p: int
    reps: int
    seed: int
    targets: tuple = (0, 5)
    alpha_levels: tuple = (0.05, 0.10)

    def __post_init__(self):
        if self.reps < 1:
            raise InputError("reps must be >= 1")
        if self.n < 4 or self.p < 1:
            raise InputError("n and p are too small")
        if self.kind in (ScenarioKind.LINEAR, ScenarioKind.LOGISTIC) and self.p % 4:
            raise InputError("p must be divisible by 4 for the blocked covariates")
        object.__setattr__(self, "targets", tuple(int(t) for t in self.targets))
        object.__setattr__(self, "alpha_levels", tuple(float(a) for a in self.alpha_levels))


def rng_for_replicate(seed: int, rep: int) -> np.random.Generator:
    """Counter-based substream: one Philox key per (seed, replicate)."""
    return np.random.Generator(
        np.random.Philox(key=np.array([seed, rep], dtype=np.uint64)))


def _z_quantile(alpha: float) -> float:
    from scipy.special import ndtri

    return float(ndtri(1.0 - alpha / 2.0))


def gen_blocked_covariates(n: int, p: int, rng: np.random.Generator) -> np.ndarray:
    """Blocks of four: x = 0.5*(w + u) with w, u ~ U(0,1), shared u per block."""
    if p % 4:
        raise InputError("p must be divisible by 4")
    u = rng.uniform(size=(n, p // 4))
    w = rng.uniform(size=(n, p))
    return 0.5 * (w + np.repeat(u, 4, axis=1))


def linear_true_beta(p: int) -> np.ndarray:
    """True coefficients for the linear/logistic scenarios, intercept slot last."""
    beta = np.zeros(p + 1)
    beta[:LINEAR_SUPPORT] = 1.0
    return beta


def _design_with_intercept(n, p, rng):
    xb = gen_blocked_covariates(n, p, rng)
    return np.hstack([xb, np.ones((n, 1))])


def gen_linear(n: int, p: int, rng: np.random.Generator) -> Dataset:
    x = _design_with_intercept(n, p, rng)
    y = x @ linear_true_beta(p) + rng.normal(size=n)
    return Dataset(x=x, y=y)


def gen_logistic(n: int, p: int, rng: np.random.Generator) -> Dataset:
    x = _design_with_intercept(n, p, rng)
    prob = sigmoid(x @ linear_true_beta(p))
    y = (rng.uniform(size=n) < prob).astype(np.float64)
    return Dataset(x=x, y=y)


def _itr_coef(p: int, pattern) -> np.ndarray:
    beta = np.zeros(p)
    beta[: len(pattern)] = pattern
    return beta


def gen_itr_full(n: int, p: int, rng: np.random.Generator):
    """Treatment-rule sample plus both potential outcomes for audit records."""
    x = rng.normal(size=(n, p))
    delta = x @ _itr_coef(p, ITR_DELTA)
    scale = 0.4 * (x @ _itr_coef(p, ITR_SCALE))
    prob1 = sigmoid(0.4 * (x @ _itr_coef(p, ITR_PROP)))
    a = np.where(rng.uniform(size=n) < prob1, 1.0, -1.0)
    eps = rng.normal(size=n)
    y_pos = delta + scale * eps
    y_neg = -delta + scale * eps
    y = np.where(a > 0, y_pos, y_neg)
    return Dataset(x=x, y=y, treatment=a), y_pos, y_neg


def gen_itr(n: int, p: int, rng: np.random.Generator) -> Dataset:
    return gen_itr_full(n, p, rng)[0]


def _default_cache_dir() -> Path:
    env = os.environ.get("DPME_CACHE_DIR")
    if env:
        return Path(env)
    return Path.home() / ".cache" / "dpme"


def true_beta_itr(p: int, mc_size: int = 1_000_000, seed: int = 0,
                  cache_dir=None, chunk: int = 50_000):
    """Population minimizer of the weighted-logistic surrogate, beta_3 scaled to 1.

    Solved by chunked Newton iterations over a Philox-regenerated sample with
    the true nuisances plugged into the AIPW weights; the unscaled minimizer is
    also returned since the estimator targets it directly.  Cached on disk
    keyed by (p, mc_size, seed).
    """
    cache_dir = Path(cache_dir) if cache_dir is not None else _default_cache_dir()
    cache_file = cache_dir / f"itr_truth_p{p}_m{mc_size}_s{seed}.npz"
    if cache_file.exists():
        data = np.load(cache_file)
        return data["rescaled"], data["raw"]

    n_chunks = (mc_size + chunk - 1) // chunk

    def weight_chunks():
        for c in range(n_chunks):
            rows = min(chunk, mc_size - c * chunk)
            rng = np.random.Generator(
                np.random.Philox(key=np.array([seed, c], dtype=np.uint64)))
            ds, y_pos, y_neg = gen_itr_full(rows, p, rng)
            delta = ds.x @ _itr_coef(p, ITR_DELTA)
            prob1 = sigmoid(0.4 * (ds.x @ _itr_coef(p, ITR_PROP)))
            pseudo = {}
            for arm, pi_arm in ((1, prob1), (-1, 1.0 - prob1)):
                mu = arm * delta
                ind = (ds.treatment == arm).astype(np.float64)
                pseudo[arm] = ind / pi_arm * (ds.y - mu) + mu
            omega_pos = np.maximum(pseudo[1], 0.0) + np.maximum(-pseudo[-1], 0.0)
            omega_neg = np.maximum(-pseudo[1], 0.0) + np.maximum(pseudo[-1], 0.0)
            yield ds.x, omega_pos, omega_neg

    beta = np.zeros(p)
    for _ in range(40):
        hess = np.zeros((p, p))
        grad = np.zeros(p)
        for x, w_pos, w_neg in weight_chunks():
            eta = x @ beta
            sig = sigmoid(eta)
            total = w_pos + w_neg
            grad += x.T @ (w_pos - total * sig)
            hess_w = total * sig * (1.0 - sig)
            hess += x.T @ (x * hess_w[:, None])
        grad /= mc_size
        hess /= mc_size
        step = np.linalg.solve(hess + 1e-10 * np.eye(p), grad)
        beta += step
        if float(np.max(np.abs(step))) < 1e-8:
            break

    raw = beta.copy()
    b3 = raw[2]
    if abs(b3) < 1e-3:
        raise DpmeError("identification failure: third coefficient is near zero")
    rescaled = raw / b3
    cache_dir.mkdir(parents=True, exist_ok=True)
    np.savez(cache_file, rescaled=rescaled, raw=raw)
    return rescaled, raw


@dataclass(frozen=True)
class SimReport:
    scenario: Scenario
    truth: dict                  # target -> true value
    per_target: dict             # target -> aggregate metrics
    records: tuple               # replicate-level audit rows
    dropped: tuple               # (rep, stage, message) for failed replicates
    reps_used: int
    reliable: bool
    mean_seconds_per_replicate: float  # in-memory/log only, never serialized


def _replicate_linear_like(scenario: Scenario, rep: int, config: SolverConfig):
    rng = rng_for_replicate(scenario.seed, rep)
    if scenario.kind is ScenarioKind.LINEAR:
        data = gen_linear(scenario.n, scenario.p, rng)
        model = ModelSpec(family=Family.LINEAR)
    else:
        data = gen_logistic(scenario.n, scenario.p, rng)
        model = ModelSpec(family=Family.LOGISTIC)
    cfg = config_with_seed(config, int(rng.integers(0, 2**62)))
    lam = cv_select_lambda(model, data, config=cfg)
    init = fit_penalized(model, data, lam, config=cfg)
    per_coord = run_dpme_per_coordinate(model, data, scenario.targets, config=cfg,
                                        lam=lam, init_fit=init,
                                        alphas=scenario.alpha_levels)
    out = {}
    for j in scenario.targets:
        r = per_coord[j]
        out[j] = {
            "theta_init": float(r.theta_init[0]),
            "theta_debiased": float(r.theta_debiased[0]),
            "se": float(r.se[0]),
            "ci": {str(level): (float(lo[0]), float(hi[0]))
                   for level, (lo, hi) in r.ci.items()},
            "lam": float(r.lam),
        }
    return out


def _replicate_itr(scenario: Scenario, rep: int, config: SolverConfig):
    rng = rng_for_replicate(scenario.seed, rep)
    data, y_pos, y_neg = gen_itr_full(scenario.n, scenario.p, rng)
    split_seed = int(rng.integers(0, 2**62))
    res = fit_itr_dpme(data, scenario.targets, seed=split_seed, config=config,
                       alphas=scenario.alpha_levels)
    out = {}
    for pos, j in enumerate(scenario.targets):
        out[j] = {
            "theta_init": float("nan"),
            "theta_debiased": float(res.theta[pos]),
            "se": float(res.se[pos]),
            "ci": {str(level): (float(lo[pos]), float(hi[pos]))
                   for level, (lo, hi) in res.ci.items()},
            "lam": float(res.lam_halves[0]),
        }
    audit_extra = {
        "value_estimate": res.value_estimate,
        "mean_potential_gap": float(np.mean(y_pos - y_neg)),
    }
    return out, audit_extra


def _limit_worker_blas():
    # replicate-level parallelism only: stop BLAS from oversubscribing the cores
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, "1")


def _run_one(args):
    scenario, rep, config = args
    start = time.perf_counter()
    try:
        if scenario.kind is ScenarioKind.ITR:
            per_target, extra = _replicate_itr(scenario, rep, config)
        else:
            per_target = _replicate_linear_like(scenario, rep, config)
            extra = {}
        return ("ok", rep, per_target, extra, time.perf_counter() - start)
    except DpmeError as e:
        stage = getattr(e, "stage", "")
        return ("dropped", rep, stage, str(e), time.perf_counter() - start)


def default_threads() -> int:
    env = os.environ.get("DPME_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def scenario_truth(scenario: Scenario, cache_dir=None) -> dict:
    if scenario.kind is ScenarioKind.ITR:
        rescaled, _ = true_beta_itr(scenario.p, cache_dir=cache_dir)
        truth_vec = rescaled
    else:
        truth_vec = linear_true_beta(scenario.p)
    return {j: float(truth_vec[j]) for j in scenario.targets}


def run_scenario(scenario: Scenario, config: SolverConfig = DEFAULT_CONFIG,
                 threads: Optional[int] = None, cache_dir=None) -> SimReport:
    """Run every replicate, aggregate coverage metrics, keep audit records."""
    truth = scenario_truth(scenario, cache_dir=cache_dir)
    threads = default_threads() if threads is None else max(1, int(threads))
    jobs = [(scenario, rep, config) for rep in range(scenario.reps)]
    if threads == 1 or scenario.reps == 1:
        raw = [_run_one(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=min(threads, scenario.reps),
                                 initializer=_limit_worker_blas) as pool:
            raw = list(pool.map(_run_one, jobs, chunksize=1))
    raw.sort(key=lambda t: t[1])  # deterministic order by replicate index

    records, dropped, times = [], [], []
    for item in raw:
        times.append(item[4])
        if item[0] == "ok":
            records.append({"rep": item[1], "targets": item[2], **item[3]})
        else:
            dropped.append((item[1], item[2], item[3]))

    per_target = {}
    for j in scenario.targets:
        est = np.array([r["targets"][j]["theta_debiased"] for r in records])
        ses = np.array([r["targets"][j]["se"] for r in records])
        th0 = truth[j]
        metrics = {
            "median_bias": float(np.median(est - th0)) if len(est) else float("nan"),
            "sd": float(np.std(est, ddof=1)) if len(est) > 1 else None,
            "median_se": float(np.median(ses)) if len(ses) else float("nan"),
        }
        for level in sorted({round(1 - a, 6) for a in scenario.alpha_levels}):
            hits = [
                1.0 if r["targets"][j]["ci"][str(level)][0] <= th0
                <= r["targets"][j]["ci"][str(level)][1] else 0.0
                for r in records
            ]
            metrics[f"cp{int(round(level * 100))}"] = (
                float(np.mean(hits)) if hits else float("nan"))
        per_target[j] = metrics

    reps_used = len(records)
    reliable = (len(dropped) / scenario.reps) <= 0.05
    return SimReport(scenario=scenario, truth=truth, per_target=per_target,
                     records=tuple(records), dropped=tuple(dropped),
                     reps_used=reps_used, reliable=reliable,
                     mean_seconds_per_replicate=float(np.mean(times)) if times else 0.0)


CSV_HEADER = ("scenario,p,n,reps,reps_used,dropped,target,"
              "median_bias,sd,median_se,cp95,cp90,reliable")


def report_csv(report: SimReport) -> str:
    """Summary rows in the table column order (bias, SD, SE, CP95, CP90)."""
    lines = [CSV_HEADER]
    s = report.scenario
    for j in s.targets:
        m = report.per_target[j]
        sd = "" if m["sd"] is None else repr(m["sd"])
        lines.append(",".join([
            s.kind.value, str(s.p), str(s.n), str(s.reps), str(report.reps_used),
            str(len(report.dropped)), f"beta{j + 1}",
            repr(m["median_bias"]), sd, repr(m["median_se"]),
            repr(m.get("cp95", float("nan"))), repr(m.get("cp90", float("nan"))),
            str(report.reliable).lower(),
        ]))
    return "\n".join(lines) + "\n"


def report_json(report: SimReport) -> str:
    """Full audit payload; deterministic byte-for-byte for a given report."""
    s = report.scenario
    payload = {
        "scenario": {
            "kind": s.kind.value, "n": s.n, "p": s.p, "reps": s.reps,
            "seed": s.seed, "targets": list(s.targets),
            "alpha_levels": list(s.alpha_levels),
        },
        "truth": {f"beta{j + 1}": report.truth[j] for j in s.targets},
        "per_target": {f"beta{j + 1}": report.per_target[j] for j in s.targets},
        "reps_used": report.reps_used,
        "dropped": [list(d) for d in report.dropped],
        "reliable": report.reliable,
        "records": [
            {"rep": r["rep"],
             "targets": {f"beta{j + 1}": r["targets"][j] for j in s.targets},
             **{k: v for k, v in r.items() if k not in ("rep", "targets")}}
            for r in report.records
        ],
    }
    return json.dumps(payload, sort_keys=True, indent=1) + "\n"


def reaggregate_audit(audit: dict) -> dict:
    """Recompute the summary metrics from a parsed audit JSON payload."""
    targets = audit["scenario"]["targets"]
    out = {}
    for j in targets:
        key = f"beta{j + 1}"
        recs = [r["targets"][key] for r in audit["records"]]
        th0 = audit["truth"][key]
        est = np.array([r["theta_debiased"] for r in recs])
        ses = np.array([r["se"] for r in recs])
        metrics = {
            "median_bias": float(np.median(est - th0)) if len(est) else float("nan"),
            "sd": float(np.std(est, ddof=1)) if len(est) > 1 else None,
            "median_se": float(np.median(ses)) if len(ses) else float("nan"),
        }
        levels = sorted({round(1 - a, 6) for a in audit["scenario"]["alpha_levels"]})
        for level in levels:
            hits = [1.0 if r["ci"][str(level)][0] <= th0 <= r["ci"][str(level)][1]
                    else 0.0 for r in recs]
            metrics[f"cp{int(round(level * 100))}"] = (
                float(np.mean(hits)) if hits else float("nan"))
        out[key] = metrics
    return out
