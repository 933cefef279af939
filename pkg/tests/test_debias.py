import numpy as np
import pytest

from dpme import (
    Dataset,
    Family,
    InputError,
    ModelSpec,
    NumericalError,
    PerturbationPlan,
    PinSet,
    ProfileEvaluator,
    SolverConfig,
    SolverError,
    default_step,
    fit_penalized,
    numeric_gradient,
    numeric_hessian,
    one_step_update,
    profile_value,
    run_dpme,
    run_dpme_per_coordinate,
    sandwich_variance,
)

LINEAR = ModelSpec(family=Family.LINEAR)


def quadratic(m, b=None):
    m = np.atleast_2d(np.asarray(m, dtype=np.float64))
    b = np.zeros(m.shape[0]) if b is None else np.asarray(b, dtype=np.float64)

    def a(theta):
        theta = np.asarray(theta, dtype=np.float64)
        return float(b @ theta - 0.5 * theta @ m @ theta)

    return a


class TestNumericGradient:
    def test_scalar_quadratic_carries_half_step(self):
        a = lambda t: -0.5 * (t[0] - 1.0) ** 2
        g = numeric_gradient(a, np.array([1.0]), 0.1)
        assert g[0] == pytest.approx(0.05, abs=1e-12)

    def test_constant_function(self):
        g = numeric_gradient(lambda t: 3.5, np.array([0.3, -2.0]), 0.2)
        np.testing.assert_array_equal(g, np.zeros(2))

    def test_shift_formula_on_general_quadratic(self):
        m = np.array([[2.0, 1.0], [1.0, 3.0]])
        b = np.array([0.7, -0.4])
        theta = np.array([0.25, -1.5])
        h = 0.125
        g = numeric_gradient(quadratic(m, b), theta, h)
        analytic = b - m @ theta
        np.testing.assert_allclose(g, analytic + 0.5 * h * np.diag(m), atol=1e-9)

    def test_rejects_bad_step(self):
        with pytest.raises(InputError):
            numeric_gradient(lambda t: 0.0, np.array([0.0]), 0.0)


class TestNumericHessian:
    def test_matches_negative_quadratic_form(self):
        m = np.array([[2.0, 1.0], [1.0, 3.0]])
        h = numeric_hessian(quadratic(m), np.array([0.4, -0.2]), 0.01)
        np.testing.assert_allclose(h, -m, atol=1e-9)

    def test_scalar_curvature_exact(self):
        a = lambda t: -0.5 * (t[0] - 1.0) ** 2
        h = numeric_hessian(a, np.array([2.0]), 0.01)
        assert h[0, 0] == pytest.approx(-1.0, abs=1e-9)

    def test_bitwise_symmetry(self):
        rng = np.random.default_rng(3)
        m = rng.normal(size=(3, 3))
        m = m @ m.T + np.eye(3)
        h = numeric_hessian(quadratic(m), rng.normal(size=3), 0.05)
        assert np.array_equal(h, h.T)

    def test_quartic_first_order_error(self):
        a = lambda t: -(t[0] ** 4)
        theta = np.array([1.0])
        errs = []
        for h in (0.1, 0.05, 0.025):
            errs.append(abs(numeric_hessian(a, theta, h)[0, 0] - (-12.0)))
        # error O(h): halving h roughly halves the error
        assert errs[1] < 0.7 * errs[0] and errs[2] < 0.7 * errs[1]


class TestOneStep:
    def test_zero_gradient_fixed_point(self):
        theta = np.array([0.7, -0.3])
        out = one_step_update(theta, np.zeros(2), -np.eye(2))
        np.testing.assert_array_equal(out, theta)

    def test_scalar_arithmetic(self):
        out = one_step_update(np.array([0.5]), np.array([0.1]), np.array([[-2.0]]))
        assert out[0] == pytest.approx(0.55, abs=1e-15)

    def test_ill_conditioned_raises_with_estimate(self):
        hess = np.array([[1.0, 1.0], [1.0, 1.0 + 1e-15]])
        with pytest.raises(NumericalError, match="condition"):
            one_step_update(np.zeros(2), np.ones(2), hess)


class TestProfileValue:
    def test_inactive_constraint_at_optimum(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(30, 2))
        y = x @ np.array([1.0, -1.0]) + rng.normal(size=30)
        ds = Dataset(x=x, y=y)
        ols = np.linalg.lstsq(x, y, rcond=None)[0]
        free = fit_penalized(LINEAR, ds, 0.0)
        pinned = profile_value(LINEAR, ds, 0.0, PinSet(indices=(1,), values=(ols[1],)))
        assert pinned == pytest.approx(free.unpenalized_objective, abs=1e-9)

    def test_closed_form_projected_quadratic(self):
        rng = np.random.default_rng(6)
        n, p = 50, 3
        x = rng.normal(size=(n, p))
        y = x @ np.array([0.5, 1.0, -1.0]) + rng.normal(size=n)
        ds = Dataset(x=x, y=y)
        others = x[:, 1:]
        proj = others @ np.linalg.solve(others.T @ others, others.T)
        resid_op = np.eye(n) - proj
        cfg = SolverConfig(tol=1e-10)
        for theta in (-0.5, 0.0, 0.5, 1.3):
            a_val = profile_value(LINEAR, ds, 0.0,
                                  PinSet(indices=(0,), values=(theta,)), config=cfg)
            closed = -np.sum((resid_op @ (y - x[:, 0] * theta)) ** 2) / (2 * n)
            assert a_val == pytest.approx(closed, abs=1e-10)

    def test_nonconvergence_names_theta(self):
        ds = Dataset(x=np.random.default_rng(1).normal(size=(20, 4)),
                     y=np.random.default_rng(2).normal(size=20))
        cfg = SolverConfig(max_iter=1, kkt_tol=1e-14)
        with pytest.raises(SolverError, match="theta"):
            ProfileEvaluator(LINEAR, ds, 0.01, (0,), cfg).value(np.array([5.0]))


def sim1_instance(n=1000, p=100, seed=0):
    from dpme.simbench import gen_linear, rng_for_replicate

    return gen_linear(n, p, rng_for_replicate(3100, seed))


class TestProfileDerivativesOnSim1:
    def test_gradient_matches_profiled_quadratic(self):
        # lambda = 0 keeps the profile an exact quadratic with known derivative
        ds = sim1_instance(n=500, p=8, seed=1)
        n = ds.n
        x, y = ds.x, ds.y
        others = x[:, 1:]
        proj = others @ np.linalg.solve(others.T @ others, others.T)
        z = x[:, 0] - proj @ x[:, 0]
        theta0 = 0.8
        h1 = default_step(n)
        ev = ProfileEvaluator(LINEAR, ds, 0.0, (0,), SolverConfig(tol=1e-10))
        g = numeric_gradient(ev.value, np.array([theta0]), h1)
        analytic = float(z @ (y - x[:, 0] * theta0)) / n  # d/dtheta of profiled quadratic
        assert g[0] == pytest.approx(analytic, abs=2 * h1)

    @pytest.mark.slow
    def test_hessian_close_to_projection_curvature(self):
        ds = sim1_instance(n=1000, p=100, seed=2)
        cfg = SolverConfig(seed=4)
        from dpme import cv_select_lambda

        lam = cv_select_lambda(LINEAR, ds, config=cfg)
        init = fit_penalized(LINEAR, ds, lam, config=cfg)
        res = run_dpme(LINEAR, ds, (0,), config=cfg, lam=lam, init_fit=init)

        # gamma-hat from a lasso of x1 on the rest; unpenalized refit on its support
        d1 = Dataset(x=ds.x[:, 1:], y=ds.x[:, 0])
        lam_g = cv_select_lambda(LINEAR, d1, config=cfg)
        gfit = fit_penalized(LINEAR, d1, lam_g, config=cfg)
        supp = np.flatnonzero(gfit.beta != 0)
        gamma = np.zeros(ds.p - 1)
        gamma[supp] = np.linalg.lstsq(ds.x[:, 1:][:, supp], ds.x[:, 0], rcond=None)[0]
        zhat = ds.x[:, 0] - ds.x[:, 1:] @ gamma
        i0 = float(zhat @ zhat) / ds.n
        assert -res.hess[0, 0] == pytest.approx(i0, rel=0.15)


class TestRunDpme:
    def test_ols_fixed_point(self):
        rng = np.random.default_rng(7)
        n, p = 50, 3
        x = rng.normal(size=(n, p))
        y = x @ np.array([1.0, 0.0, -2.0]) + rng.normal(size=n)
        ds = Dataset(x=x, y=y)
        ols = np.linalg.lstsq(x, y, rcond=None)[0]
        res = run_dpme(LINEAR, ds, (0,), lam=0.0, config=SolverConfig(tol=1e-10))
        assert res.theta_debiased[0] == pytest.approx(ols[0], abs=1e-6)

    def test_intercept_only_variance(self):
        rng = np.random.default_rng(8)
        n = 80
        y = 1.5 + rng.normal(size=n)
        ds = Dataset(x=np.ones((n, 1)), y=y)
        res = run_dpme(LINEAR, ds, (0,), lam=0.0, config=SolverConfig(tol=1e-12))
        h1 = default_step(n)
        target = np.var(y) / n
        assert res.cov[0, 0] == pytest.approx(target, rel=2 * h1)
        assert res.theta_debiased[0] == pytest.approx(y.mean(), abs=1e-8)

    def test_degenerate_meat_constant_response(self):
        # y constant: every per-observation difference equals h1/2 exactly
        n = 40
        ds = Dataset(x=np.ones((n, 1)), y=np.full(n, 2.0))
        h1 = default_step(n)
        res = run_dpme(LINEAR, ds, (0,), lam=0.0, config=SolverConfig(tol=1e-12))
        assert res.cov[0, 0] == pytest.approx((h1 / 2) ** 2 / n, rel=1e-6)

    def test_bitwise_repeatability(self):
        ds = sim1_instance(n=200, p=8, seed=3)
        cfg = SolverConfig(seed=11)
        a = run_dpme(LINEAR, ds, (0, 5), config=cfg)
        b = run_dpme(LINEAR, ds, (0, 5), config=cfg)
        assert np.array_equal(a.theta_debiased, b.theta_debiased)
        assert np.array_equal(a.cov, b.cov)
        assert np.array_equal(a.grad, b.grad)
        assert a.lam == b.lam

    def test_cache_shares_grid_points(self):
        # h1 == h2 makes the gradient point coincide with a Hessian point
        ds = sim1_instance(n=200, p=8, seed=4)
        res = run_dpme(LINEAR, ds, (0,), config=SolverConfig(seed=2))
        # distinct points: theta-h, theta-2h, tilde, tilde-h, tilde-2h
        assert res.profile_fits == 5
        assert res.cache_hits >= 4

    def test_cis_nested_and_cov_psd(self):
        ds = sim1_instance(n=200, p=8, seed=5)
        res = run_dpme(LINEAR, ds, (0, 5), config=SolverConfig(seed=2))
        lo95, hi95 = res.ci[0.95]
        lo90, hi90 = res.ci[0.9]
        assert np.all(lo95 <= lo90) and np.all(hi90 <= hi95)
        assert np.all(np.linalg.eigvalsh(res.cov) >= -1e-12)
        assert np.all((res.p_values >= 0) & (res.p_values <= 1))

    def test_joint_two_dimensional_target(self):
        ds = sim1_instance(n=300, p=8, seed=6)
        res = run_dpme(LINEAR, ds, (0, 1), config=SolverConfig(seed=2))
        assert res.hess.shape == (2, 2)
        assert np.array_equal(res.hess, res.hess.T)
        assert np.isfinite(res.theta_debiased).all()
        assert np.isfinite(res.se).all()

    def test_per_coordinate_matches_separate_runs(self):
        ds = sim1_instance(n=200, p=8, seed=7)
        cfg = SolverConfig(seed=3)
        lam = 0.05
        init = fit_penalized(LINEAR, ds, lam, config=cfg)
        multi = run_dpme_per_coordinate(LINEAR, ds, (0, 5), config=cfg,
                                        lam=lam, init_fit=init)
        single = run_dpme(LINEAR, ds, (5,), config=cfg, lam=lam, init_fit=init)
        assert multi[5].theta_debiased[0] == single.theta_debiased[0]

    def test_duplicate_targets_rejected(self):
        ds = sim1_instance(n=200, p=8, seed=8)
        with pytest.raises(InputError):
            run_dpme(LINEAR, ds, (0, 0), lam=0.1)

    def test_initial_nonconvergence_names_stage(self):
        ds = sim1_instance(n=200, p=8, seed=9)
        cfg = SolverConfig(max_iter=1, kkt_tol=1e-14)
        with pytest.raises(SolverError, match="initial_fit"):
            run_dpme(LINEAR, ds, (0,), lam=0.01, config=cfg)


class TestSandwich:
    def test_public_entry_matches_pipeline(self):
        ds = sim1_instance(n=200, p=8, seed=10)
        cfg = SolverConfig(seed=5)
        lam = 0.05
        init = fit_penalized(LINEAR, ds, lam, config=cfg)
        res = run_dpme(LINEAR, ds, (0,), config=cfg, lam=lam, init_fit=init)
        plan = PerturbationPlan.for_sample(ds.n, (0,))
        # fresh evaluator (cold starts): same optimum up to solver tolerance
        cov = sandwich_variance(LINEAR, ds, lam, res.theta_debiased, plan, cfg)
        assert cov[0, 0] == pytest.approx(res.cov[0, 0], rel=1e-3)
        # matched warm starts reproduce the pipeline value tightly
        ev = ProfileEvaluator(LINEAR, ds, lam, (0,), cfg, warm_beta=init.beta)
        cov_warm = sandwich_variance(LINEAR, ds, lam, res.theta_debiased, plan, cfg,
                                     evaluator=ev)
        assert cov_warm[0, 0] == pytest.approx(res.cov[0, 0], rel=1e-9)

    def test_plan_validation(self):
        with pytest.raises(InputError):
            PerturbationPlan(h1=0.0, h2=0.1, target_indices=(0,))
        with pytest.raises(InputError):
            PerturbationPlan(h1=0.1, h2=0.1, target_indices=())
