"""Benchmark the compiled coordinate-descent kernels against the pure-Python fallback.

Times the residual-mode and Gram-mode sweep kernels on a representative
penalized weighted least-squares instance (the inner problem of every fit),
then times a full cross-validated lasso selection through the public API in
both backends via subprocesses.

Run:  python benchmarks/bench_backends.py
"""

import os
import subprocess
import sys
import time

import numpy as np

from dpme import _cd_py

try:
    from dpme import _cd_fast
except ImportError:
    _cd_fast = None


def make_problem(n=1000, p=100, seed=0):
    rng = np.random.default_rng(seed)
    k = p // 4
    u = rng.uniform(size=(n, k))
    w = rng.uniform(size=(n, p))
    x = np.asfortranarray(0.5 * (w + np.repeat(u, 4, axis=1)))
    beta0 = np.zeros(p)
    beta0[:5] = 1.0
    y = x @ beta0 + rng.normal(size=n)
    return x, y


def bench_kernel(mod, mode, x, y, lam, repeats=5):
    n, p = x.shape
    w = np.ones(n)
    free = np.arange(p, dtype=np.int64)
    pen = np.ones(p, dtype=np.uint8)
    best = np.inf
    sweeps = 0
    for _ in range(repeats):
        beta = np.zeros(p)
        t0 = time.perf_counter()
        if mode == "residual":
            r = np.ascontiguousarray(y - x @ beta)
            sweeps, _conv = mod.cd_sweeps(x, w, r, beta, free, pen, lam, 1e-7, 100000)
        else:
            gram = np.ascontiguousarray(x.T @ x / n)
            grad = np.ascontiguousarray(x.T @ y / n - gram @ beta)
            sweeps, _conv = mod.cd_sweeps_gram(gram, grad, beta, free, pen,
                                               lam, 1e-7, 100000)
        best = min(best, time.perf_counter() - t0)
    return best, sweeps


def bench_cv_subprocess(backend):
    code = (
        "import time, numpy as np\n"
        "import dpme\n"
        "rng = np.random.default_rng(0)\n"
        "k = 25; u = rng.uniform(size=(1000, k)); w = rng.uniform(size=(1000, 100))\n"
        "x = 0.5*(w + np.repeat(u, 4, axis=1)); b = np.zeros(100); b[:5] = 1\n"
        "y = x @ b + rng.normal(size=1000)\n"
        "ds = dpme.Dataset(x=x, y=y)\n"
        "m = dpme.ModelSpec(family=dpme.Family.LINEAR)\n"
        "t0 = time.perf_counter()\n"
        "lam = dpme.cv_select_lambda(m, ds, config=dpme.SolverConfig(seed=1))\n"
        "print('%s %.3f %.6f' % (dpme.BACKEND, time.perf_counter()-t0, lam))\n"
    )
    env = dict(os.environ, DPME_BACKEND=backend)
    out = subprocess.run([sys.executable, "-c", code], env=env,
                         capture_output=True, text=True, check=True)
    name, secs, lam = out.stdout.split()
    return name, float(secs), float(lam)


def main():
    x, y = make_problem()
    lam_max = float(np.abs(x.T @ y).max() / x.shape[0])
    rows = []
    for lam_frac in (0.1, 0.01):
        lam = lam_max * lam_frac
        for mode in ("residual", "gram"):
            t_py, sw = bench_kernel(_cd_py, mode, x, y, lam)
            row = [f"lam={lam_frac}*max", mode, f"{sw} sweeps", f"python {t_py*1e3:9.2f} ms"]
            if _cd_fast is not None:
                t_c, _ = bench_kernel(_cd_fast, mode, x, y, lam)
                row.append(f"compiled {t_c*1e3:9.2f} ms")
                row.append(f"speedup {t_py/t_c:6.1f}x")
            rows.append("  ".join(row))
    print("kernel (n=1000, p=100, cold start):")
    for r in rows:
        print("  " + r)

    print("\nfull cross-validated lambda selection (subprocess per backend):")
    for backend in ("compiled", "python"):
        if backend == "compiled" and _cd_fast is None:
            print("  compiled backend not built")
            continue
        name, secs, lam = bench_cv_subprocess(backend)
        print(f"  {name:9s} {secs:8.2f} s   (lambda={lam:.6f})")


if __name__ == "__main__":
    main()
