"""Command-line front end: data ingestion, fitting, simulation, rule estimation.

Subcommands:
  fit       debias chosen coordinates of a penalized regression on a CSV file
  simulate  run a Monte Carlo scenario and emit the coverage summary + audit
  itr       estimate a treatment rule with repeated splits on a CSV file
  report    re-aggregate an audit JSON into the summary CSV

Every command is deterministic given (input bytes, configuration, seed).  A
single flat key=value config file can hold any long-form flag; explicit flags
override it.  Outputs are written to the requested path plus a sibling .log;
exit codes: 0 ok, 2 input error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from ._backend import BACKEND
from .core import Dataset, DpmeError, Family, InputError, ModelSpec, NumericalError
from .debias import default_step, run_dpme_per_coordinate
from .itr import prune_correlated_columns, repeated_split_analysis
from .simbench import (
    Scenario,
    ScenarioKind,
    default_threads,
    reaggregate_audit,
    report_csv,
    report_json,
    run_scenario,
)
from .solvers import SolverConfig, cv_select_lambda, fit_penalized

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERIC = 3

MISSING_TOKENS = {"", "na", "nan", "null", "none"}


def _float_repr(v: float) -> str:
    return repr(float(v))


def ingest_csv(path, response: str, treatment=None, covariates=None,
               standardize: bool = False):
    """Read a rectangular numeric CSV into a Dataset.

    Returns (dataset, covariate_names).  Rows with missing cells, non-numeric
    cells, ragged rows, duplicate headers, and unknown schema columns are all
    rejected with their locations.
    """
    path = Path(path)
    if not path.exists():
        raise InputError(f"input file not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise InputError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        if len(set(header)) != len(header):
            dupes = sorted({h for h in header if header.count(h) > 1})
            raise InputError(f"{path}: duplicate header columns {dupes}")
        for name, what in ((response, "response"), (treatment, "treatment")):
            if name is not None and name not in header:
                raise InputError(f"{path}: {what} column {name!r} not in header")
        if covariates is None:
            covariates = [h for h in header if h not in (response, treatment)]
        else:
            unknown = [c for c in covariates if c not in header]
            if unknown:
                raise InputError(f"{path}: unknown covariate columns {unknown}")
        col_of = {h: i for i, h in enumerate(header)}

        rows = []
        missing_rows = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise InputError(
                    f"{path}: row {lineno} has {len(row)} cells, expected {len(header)}")
            vals = []
            for h in header:
                cell = row[col_of[h]].strip()
                if cell.lower() in MISSING_TOKENS:
                    missing_rows.append(lineno)
                    vals = None
                    break
                try:
                    vals.append(float(cell))
                except ValueError:
                    raise InputError(
                        f"{path}: non-numeric cell {cell!r} at row {lineno}, "
                        f"column {h!r}") from None
            if vals is not None:
                rows.append(vals)
        if missing_rows:
            raise InputError(f"{path}: rows with missing cells rejected: {missing_rows}")
    if not rows:
        raise InputError(f"{path}: no data rows")
    table = np.asarray(rows, dtype=np.float64)

    x = table[:, [col_of[c] for c in covariates]]
    y = table[:, col_of[response]]
    a = table[:, col_of[treatment]] if treatment else None
    if standardize:
        mu = x.mean(axis=0)
        sd = x.std(axis=0)
        sd[sd == 0] = 1.0
        x = (x - mu) / sd
    return Dataset(x=x, y=y, treatment=a), list(covariates)


def emit_dataset_csv(dataset: Dataset, names, response: str, path,
                     treatment=None):
    """Round-trip-exact CSV emission (repr floats)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        header = list(names) + [response] + ([treatment] if treatment else [])
        writer.writerow(header)
        for i in range(dataset.n):
            row = [_float_repr(v) for v in dataset.x[i]]
            row.append(_float_repr(dataset.y[i]))
            if treatment:
                row.append(_float_repr(dataset.treatment[i]))
            writer.writerow(row)


def _setup_log(out_path: Path) -> logging.Logger:
    logger = logging.getLogger(f"dpme.cli.{out_path}")
    logger.setLevel(logging.INFO)
    logger.handlers.clear()
    handler = logging.FileHandler(str(out_path) + ".log", mode="w")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
    logger.addHandler(handler)
    logger.propagate = False
    return logger


def _solver_config(args) -> SolverConfig:
    kwargs = {}
    for name in ("max_iter", "tol", "kkt_tol", "cv_folds", "lambda_grid_size",
                 "lambda_min_ratio"):
        v = getattr(args, name, None)
        if v is not None:
            kwargs[name] = v
    kwargs["seed"] = args.seed
    return SolverConfig(**kwargs)


def cmd_fit(args) -> int:
    out = Path(args.out)
    logger = _setup_log(out)
    t0 = time.perf_counter()
    family = Family(args.family)
    if family is Family.WEIGHTED_LOGISTIC:
        raise InputError("fit supports linear and logistic families; "
                         "use the itr command for treatment rules")
    dataset, names = ingest_csv(args.input, response=args.response,
                                treatment=None, standardize=args.standardize)
    model = ModelSpec(family=family)
    targets = _resolve_targets(args.targets, names)
    config = _solver_config(args)
    lam = args.lam
    if lam is None:
        lam = cv_select_lambda(model, dataset, config=config)
    init = fit_penalized(model, dataset, lam, config=config)
    h1 = args.h1 if args.h1 is not None else default_step(dataset.n)
    h2 = args.h2 if args.h2 is not None else default_step(dataset.n)
    from .debias import PerturbationPlan, run_dpme

    results = {}
    for j in targets:
        plan = PerturbationPlan(h1=h1, h2=h2, target_indices=(j,))
        results[j] = run_dpme(model, dataset, (j,), config=config, plan=plan,
                              alphas=(args.alpha,), lam=lam, init_fit=init)

    level = round(1.0 - args.alpha, 6)
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["coordinate", "name", "theta_init", "theta_debiased",
                         "se", "ci_low", "ci_high", "p_value"])
        for j in targets:
            r = results[j]
            lo, hi = r.ci[level]
            writer.writerow([j, names[j], _float_repr(r.theta_init[0]),
                             _float_repr(r.theta_debiased[0]), _float_repr(r.se[0]),
                             _float_repr(lo[0]), _float_repr(hi[0]),
                             _float_repr(r.p_values[0])])
    sidecar = {
        "lambda": float(lam),
        "h1": h1,
        "h2": h2,
        "alpha": args.alpha,
        "n": dataset.n,
        "p": dataset.p,
        "backend": BACKEND,
        "targets": {str(j): {
            "solver_iterations": results[j].solver_iterations,
            "profile_fits": results[j].profile_fits,
            "cache_hits": results[j].cache_hits,
            "hessian_ridged": results[j].hessian_ridged,
        } for j in targets},
    }
    with open(str(out) + ".json", "w") as fh:
        json.dump(sidecar, fh, sort_keys=True, indent=1)
        fh.write("\n")
    logger.info("fit finished in %.2fs (lambda=%g)", time.perf_counter() - t0, lam)
    print(f"wrote {out} and {out}.json")
    return EXIT_OK


def _resolve_targets(spec: str, names) -> list:
    targets = []
    for tok in spec.split(","):
        tok = tok.strip()
        if not tok:
            continue
        if tok in names:
            targets.append(names.index(tok))
        else:
            try:
                j = int(tok)
            except ValueError:
                raise InputError(f"unknown target {tok!r}") from None
            if not 0 <= j < len(names):
                raise InputError(f"target index {j} out of range")
            targets.append(j)
    if not targets:
        raise InputError("no targets given")
    return targets


def cmd_simulate(args) -> int:
    out = Path(args.out)
    logger = _setup_log(out)
    scenario = Scenario(kind=ScenarioKind(args.scenario), n=args.n, p=args.p,
                        reps=args.reps, seed=args.seed,
                        targets=tuple(int(t) for t in args.targets.split(",")))
    config = _solver_config(args)
    threads = args.threads if args.threads is not None else default_threads()
    t0 = time.perf_counter()
    report = run_scenario(scenario, config=config, threads=threads,
                          cache_dir=args.cache_dir)
    elapsed = time.perf_counter() - t0
    with open(out, "w") as fh:
        fh.write(report_csv(report))
    with open(str(out) + ".json", "w") as fh:
        fh.write(report_json(report))
    logger.info("scenario %s n=%d p=%d reps=%d finished in %.1fs "
                "(%.2fs/replicate, %d dropped, threads=%d)",
                scenario.kind.value, scenario.n, scenario.p, scenario.reps,
                elapsed, report.mean_seconds_per_replicate, len(report.dropped),
                threads)
    if not report.reliable:
        logger.warning("more than 5%% of replicates dropped; report flagged unreliable")
    print(f"wrote {out} and {out}.json")
    return EXIT_OK


def cmd_itr(args) -> int:
    out = Path(args.out)
    logger = _setup_log(out)
    dataset, names = ingest_csv(args.input, response=args.response,
                                treatment=args.treatment,
                                standardize=args.standardize)
    retained = prune_correlated_columns(dataset.x, threshold=args.prune_threshold)
    if len(retained) < dataset.p:
        dropped = sorted(set(range(dataset.p)) - set(retained))
        logger.info("pruned %d correlated columns: %s", len(dropped),
                    [names[j] for j in dropped])
        dataset = Dataset(x=dataset.x[:, retained], y=dataset.y,
                          treatment=dataset.treatment)
        names = [names[j] for j in retained]
    targets = tuple(range(dataset.p))
    config = _solver_config(args)
    summary, failures = repeated_split_analysis(
        dataset, targets, repeats=args.repeats, base_seed=args.seed, config=config)
    for seed, msg in failures:
        logger.warning("split seed %d failed: %s", seed, msg)
    order = sorted(targets, key=lambda j: (summary[j]["p_value"], j))
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["coordinate", "name", "coefficient", "se", "p_value"])
        for j in order:
            s = summary[j]
            writer.writerow([j, names[j], _float_repr(s["median_estimate"]),
                             _float_repr(s["median_se"]), _float_repr(s["p_value"])])
    sidecar = {
        "repeats": args.repeats,
        "prune_threshold": args.prune_threshold,
        "retained_columns": names,
        "failures": [list(f) for f in failures],
        "backend": BACKEND,
    }
    with open(str(out) + ".json", "w") as fh:
        json.dump(sidecar, fh, sort_keys=True, indent=1)
        fh.write("\n")
    logger.info("itr analysis wrote %d rows", len(order))
    print(f"wrote {out} and {out}.json")
    return EXIT_OK


def cmd_report(args) -> int:
    out = Path(args.out)
    logger = _setup_log(out)
    with open(args.audit) as fh:
        audit = json.load(fh)
    metrics = reaggregate_audit(audit)
    s = audit["scenario"]
    lines = ["scenario,p,n,reps,reps_used,dropped,target,"
             "median_bias,sd,median_se,cp95,cp90,reliable"]
    reliable = audit["reliable"]
    for j in s["targets"]:
        key = f"beta{j + 1}"
        m = metrics[key]
        sd = "" if m["sd"] is None else repr(m["sd"])
        lines.append(",".join([
            s["kind"], str(s["p"]), str(s["n"]), str(s["reps"]),
            str(audit["reps_used"]), str(len(audit["dropped"])), key,
            repr(m["median_bias"]), sd, repr(m["median_se"]),
            repr(m.get("cp95", float("nan"))), repr(m.get("cp90", float("nan"))),
            str(reliable).lower(),
        ]))
    with open(out, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    logger.info("re-aggregated %d records", len(audit["records"]))
    print(f"wrote {out}")
    return EXIT_OK


def _read_config_file(path) -> dict:
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise InputError(f"{path}: line {lineno} is not key=value")
        key, _, value = line.partition("=")
        out[key.strip().replace("-", "_")] = value.strip()
    return out


_ARG_TYPES = {
    "n": int, "p": int, "reps": int, "seed": int, "threads": int,
    "repeats": int, "max_iter": int, "cv_folds": int, "lambda_grid_size": int,
    "alpha": float, "lam": float, "h1": float, "h2": float, "tol": float,
    "kkt_tol": float, "lambda_min_ratio": float, "prune_threshold": float,
    "standardize": lambda s: s.lower() in ("1", "true", "yes"),
}


def _apply_config_file(args):
    if not getattr(args, "config", None):
        return
    file_vals = _read_config_file(args.config)
    for key, raw in file_vals.items():
        if not hasattr(args, key):
            raise InputError(f"config file key {key!r} is not a recognized option")
        if getattr(args, key) is None or getattr(args, key) is False:
            caster = _ARG_TYPES.get(key, str)
            setattr(args, key, caster(raw))


def _add_common(parser):
    parser.add_argument("--config", help="flat key=value config file; flags override")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--out", default=None, help="output CSV path")
    parser.add_argument("--max-iter", dest="max_iter", type=int, default=None)
    parser.add_argument("--tol", type=float, default=None)
    parser.add_argument("--kkt-tol", dest="kkt_tol", type=float, default=None)
    parser.add_argument("--cv-folds", dest="cv_folds", type=int, default=None)
    parser.add_argument("--lambda-grid-size", dest="lambda_grid_size", type=int,
                        default=None)
    parser.add_argument("--lambda-min-ratio", dest="lambda_min_ratio", type=float,
                        default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dpme",
        description="Debiased profile M-estimation: penalized fits with "
                    "profile-based one-step bias correction and sandwich "
                    "confidence intervals.")
    parser.add_argument("--version", action="version", version=f"dpme {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p_fit = sub.add_parser("fit", help="debias coordinates of a penalized fit")
    p_fit.add_argument("--input", required=True)
    p_fit.add_argument("--response", required=True)
    p_fit.add_argument("--family", choices=["linear", "logistic"], default="linear")
    p_fit.add_argument("--targets", required=True,
                       help="comma-separated column names or indices")
    p_fit.add_argument("--alpha", type=float, default=None)
    p_fit.add_argument("--lam", type=float, default=None,
                       help="penalty level; cross-validated when omitted")
    p_fit.add_argument("--h1", type=float, default=None)
    p_fit.add_argument("--h2", type=float, default=None)
    p_fit.add_argument("--standardize", action="store_true", default=False)
    _add_common(p_fit)
    p_fit.set_defaults(func=cmd_fit)

    p_sim = sub.add_parser("simulate", help="run a Monte Carlo scenario")
    p_sim.add_argument("--scenario", choices=[k.value for k in ScenarioKind],
                       required=True)
    p_sim.add_argument("--n", type=int, default=None)
    p_sim.add_argument("--p", type=int, default=None)
    p_sim.add_argument("--reps", type=int, default=None)
    p_sim.add_argument("--targets", default="0,5")
    p_sim.add_argument("--threads", type=int, default=None)
    p_sim.add_argument("--cache-dir", dest="cache_dir", default=None)
    _add_common(p_sim)
    p_sim.set_defaults(func=cmd_simulate)

    p_itr = sub.add_parser("itr", help="treatment-rule analysis with repeated splits")
    p_itr.add_argument("--input", required=True)
    p_itr.add_argument("--response", required=True)
    p_itr.add_argument("--treatment", required=True)
    p_itr.add_argument("--repeats", type=int, default=None)
    p_itr.add_argument("--prune-threshold", dest="prune_threshold", type=float,
                       default=None)
    p_itr.add_argument("--standardize", action="store_true", default=False)
    _add_common(p_itr)
    p_itr.set_defaults(func=cmd_itr)

    p_rep = sub.add_parser("report", help="re-aggregate an audit JSON")
    p_rep.add_argument("--audit", required=True)
    _add_common(p_rep)
    p_rep.set_defaults(func=cmd_report)
    return parser


_DEFAULTS = {
    "seed": 0, "alpha": 0.05, "reps": None, "n": None, "p": None,
    "repeats": 5, "prune_threshold": 0.8,
}


def _finalize_args(args):
    _apply_config_file(args)
    for key, value in _DEFAULTS.items():
        if hasattr(args, key) and getattr(args, key) is None and value is not None:
            setattr(args, key, value)
    if getattr(args, "seed", None) is None:
        args.seed = 0
    if args.command == "simulate":
        for key in ("n", "p", "reps"):
            if getattr(args, key) is None:
                raise InputError(f"simulate requires --{key}")
    if getattr(args, "out", None) is None:
        raise InputError("an --out path is required")
    alpha = getattr(args, "alpha", None)
    if alpha is not None and not 0 < alpha < 0.5:
        raise InputError(f"alpha must lie in (0, 0.5), got {alpha}")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _finalize_args(args)
        return args.func(args)
    except InputError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except DpmeError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
