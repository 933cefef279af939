import json

import numpy as np
import pytest

from dpme import InputError
from dpme.core import sigmoid
from dpme.simbench import (
    ITR_DELTA,
    Scenario,
    ScenarioKind,
    _itr_coef,
    gen_blocked_covariates,
    gen_itr,
    gen_itr_full,
    gen_linear,
    gen_logistic,
    linear_true_beta,
    reaggregate_audit,
    report_csv,
    report_json,
    rng_for_replicate,
    run_scenario,
    true_beta_itr,
)
from dpme.solvers import SolverConfig


class TestBlockedCovariates:
    def test_entries_in_unit_interval(self):
        x = gen_blocked_covariates(500, 12, rng_for_replicate(1, 0))
        assert x.min() >= 0.0 and x.max() <= 1.0

    def test_population_moments(self):
        x = gen_blocked_covariates(100_000, 8, rng_for_replicate(2, 0))
        np.testing.assert_allclose(x.var(axis=0), 1 / 24, atol=2e-3)
        corr = np.corrcoef(x, rowvar=False)
        within = [corr[i, j] for b in range(2) for i in range(4 * b, 4 * b + 4)
                  for j in range(4 * b, 4 * b + 4) if i < j]
        across = [corr[i, j] for i in range(4) for j in range(4, 8)]
        assert np.allclose(within, 0.5, atol=0.02)
        assert np.allclose(across, 0.0, atol=0.02)

    def test_block_size_divisibility(self):
        with pytest.raises(InputError):
            gen_blocked_covariates(10, 6, rng_for_replicate(3, 0))


class TestLinearDgp:
    def test_shapes_and_intercept_column(self):
        ds = gen_linear(50, 8, rng_for_replicate(4, 0))
        assert ds.x.shape == (50, 9)
        assert np.all(ds.x[:, -1] == 1.0)

    def test_noise_variance_and_mean(self):
        n = 100_000
        ds = gen_linear(n, 8, rng_for_replicate(5, 0))
        resid = ds.y - ds.x @ linear_true_beta(8)
        assert resid.var() == pytest.approx(1.0, abs=0.02)
        assert ds.y.mean() == pytest.approx(2.5, abs=0.02)

    def test_ols_recovers_truth_at_scale(self):
        # per-coefficient sd ~ 1/sqrt(n * 0.026); n = 4e5 puts 0.03 at ~3 sd
        n = 400_000
        ds = gen_linear(n, 8, rng_for_replicate(6, 0))
        ols = np.linalg.lstsq(ds.x, ds.y, rcond=None)[0]
        assert np.abs(ols - linear_true_beta(8)).max() < 0.03


class TestLogisticDgp:
    def test_binary_response(self):
        ds = gen_logistic(200, 8, rng_for_replicate(7, 0))
        assert set(np.unique(ds.y)) <= {0.0, 1.0}

    def test_mean_matches_nested_monte_carlo(self):
        n = 100_000
        ds = gen_logistic(n, 8, rng_for_replicate(8, 0))
        x2 = gen_logistic(n, 8, rng_for_replicate(8, 1)).x
        target = sigmoid(x2 @ linear_true_beta(8)).mean()
        assert ds.y.mean() == pytest.approx(target, abs=0.01)

    def test_probabilities_in_open_interval(self):
        ds = gen_logistic(500, 8, rng_for_replicate(9, 0))
        prob = sigmoid(ds.x @ linear_true_beta(8))
        assert prob.min() > 0.0 and prob.max() < 1.0


class TestItrDgp:
    def test_treatment_balance(self):
        ds = gen_itr(100_000, 8, rng_for_replicate(10, 0))
        assert abs(ds.treatment.mean()) < 0.01

    def test_potential_outcome_gap_is_twice_delta(self):
        ds, y_pos, y_neg = gen_itr_full(500, 8, rng_for_replicate(11, 0))
        delta = ds.x @ _itr_coef(8, ITR_DELTA)
        np.testing.assert_allclose(y_pos - y_neg, 2 * delta, atol=1e-12)

    def test_observed_arm_consistency(self):
        ds, y_pos, y_neg = gen_itr_full(500, 8, rng_for_replicate(12, 0))
        np.testing.assert_array_equal(ds.y, np.where(ds.treatment > 0, y_pos, y_neg))

    def test_half_normal_mean_of_delta(self):
        # delta ~ N(0, 4), so E|delta| = 2 sqrt(2/pi)
        ds = gen_itr(1_000_000, 8, rng_for_replicate(13, 0))
        delta = ds.x @ _itr_coef(8, ITR_DELTA)
        assert np.abs(delta).mean() == pytest.approx(2 * np.sqrt(2 / np.pi), abs=0.01)


class TestTrueBetaItr:
    def test_support_and_signs(self, tmp_path):
        rescaled, raw = true_beta_itr(12, mc_size=300_000, seed=5, cache_dir=tmp_path)
        assert np.abs(rescaled[4:]).max() < 0.02
        assert np.sign(rescaled[:4]).tolist() == [-1.0, -1.0, 1.0, 1.0]
        assert rescaled[2] == 1.0

    def test_seed_stability(self, tmp_path):
        a, _ = true_beta_itr(12, mc_size=400_000, seed=1, cache_dir=tmp_path)
        b, _ = true_beta_itr(12, mc_size=400_000, seed=2, cache_dir=tmp_path)
        assert np.abs(a - b).max() < 0.01

    def test_cache_roundtrip(self, tmp_path):
        a, araw = true_beta_itr(8, mc_size=100_000, seed=3, cache_dir=tmp_path)
        b, braw = true_beta_itr(8, mc_size=100_000, seed=3, cache_dir=tmp_path)
        np.testing.assert_array_equal(a, b)
        np.testing.assert_array_equal(araw, braw)


def tiny_scenario(reps=3, seed=11):
    return Scenario(kind=ScenarioKind.LINEAR, n=120, p=8, reps=reps, seed=seed,
                    targets=(0, 5))


class TestScenario:
    def test_validation(self):
        with pytest.raises(InputError):
            Scenario(kind=ScenarioKind.LINEAR, n=100, p=10, reps=5, seed=0)
        with pytest.raises(InputError):
            Scenario(kind=ScenarioKind.LINEAR, n=100, p=8, reps=0, seed=0)

    def test_single_replicate_degenerate_aggregation(self):
        report = run_scenario(tiny_scenario(reps=1), config=SolverConfig(), threads=1)
        m = report.per_target[0]
        assert m["sd"] is None
        assert m["cp95"] in (0.0, 1.0)

    def test_worker_count_invariance_bytes(self):
        sc = tiny_scenario(reps=4)
        r1 = run_scenario(sc, config=SolverConfig(), threads=1)
        r2 = run_scenario(sc, config=SolverConfig(), threads=2)
        assert report_csv(r1) == report_csv(r2)
        assert report_json(r1) == report_json(r2)

    def test_cp95_dominates_cp90(self):
        report = run_scenario(tiny_scenario(reps=6), config=SolverConfig(), threads=2)
        for j in report.scenario.targets:
            assert report.per_target[j]["cp95"] >= report.per_target[j]["cp90"]

    def test_audit_reaggregation_matches(self):
        report = run_scenario(tiny_scenario(reps=5, seed=21), config=SolverConfig(),
                              threads=2)
        audit = json.loads(report_json(report))
        again = reaggregate_audit(audit)
        for j in report.scenario.targets:
            key = f"beta{j + 1}"
            for metric, value in report.per_target[j].items():
                if value is None:
                    assert again[key][metric] is None
                else:
                    assert again[key][metric] == pytest.approx(value, abs=1e-12)

    def test_csv_header_stable(self):
        report = run_scenario(tiny_scenario(reps=1), config=SolverConfig(), threads=1)
        header = report_csv(report).splitlines()[0]
        assert header == ("scenario,p,n,reps,reps_used,dropped,target,"
                          "median_bias,sd,median_se,cp95,cp90,reliable")

    def test_records_have_audit_payload(self):
        report = run_scenario(tiny_scenario(reps=2), config=SolverConfig(), threads=1)
        rec = report.records[0]
        assert set(rec["targets"].keys()) == {0, 5}
        assert "theta_debiased" in rec["targets"][0]
        assert "0.95" in rec["targets"][0]["ci"]
