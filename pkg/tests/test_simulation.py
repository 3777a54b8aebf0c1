import math

import numpy as np
import pytest
from scipy import stats

from idmselect.data_model import LikelihoodCase, ObservationRecord
from idmselect.errors import DataError
from idmselect.likelihood import PhmRecord
from idmselect.simulation import (
    GROUP_TOEPLITZ,
    INDEPENDENT,
    LatentTimes,
    ScenarioConfig,
    build_visit_schedule,
    derive_observed,
    gen_covariates,
    load_truth,
    make_exact_dataset,
    observation_summary,
    prepare_phm_dataset,
    sample_transition_times,
    save_truth,
    simulate_scenario,
    true_beta_vectors,
    true_support,
)


class _StubRng:
    """Deterministic generator stub: no jitter, no dropout."""

    def random(self):
        return 0.999999

    def uniform(self, lo, hi):
        return lo


class TestCovariates:
    def test_independent_pairs_uncorrelated(self):
        rng = np.random.default_rng(0)
        cov = gen_covariates(100_000, 4, INDEPENDENT, rng)
        corr = np.corrcoef(cov.values, rowvar=False)
        off = corr[np.triu_indices(4, 1)]
        assert np.abs(off).max() < 0.02

    def test_toeplitz_adjacent_within_block(self):
        rng = np.random.default_rng(1)
        cov = gen_covariates(100_000, 20, GROUP_TOEPLITZ, rng)
        corr = np.corrcoef(cov.values, rowvar=False)
        assert corr[0, 1] == pytest.approx(0.5, abs=0.02)
        assert corr[3, 5] == pytest.approx(0.25, abs=0.02)

    def test_toeplitz_cross_block_uncorrelated(self):
        rng = np.random.default_rng(2)
        cov = gen_covariates(100_000, 20, GROUP_TOEPLITZ, rng)
        corr = np.corrcoef(cov.values, rowvar=False)
        assert abs(corr[5, 15]) < 0.02

    def test_block_divisibility_enforced(self):
        with pytest.raises(DataError):
            gen_covariates(10, 15, GROUP_TOEPLITZ, np.random.default_rng(0))


class TestLatentTimes:
    def exp_config(self, rate=0.1):
        return ScenarioConfig(
            name="A1", p=2,
            weibull_theta1=(1.0, 1.0, 1.0),
            weibull_theta2=(rate, rate, rate),
            beta_true={hl: np.zeros(2) for hl in ("01", "02", "12")},
        )

    def test_exponential_special_case_ks(self):
        cfg = self.exp_config(0.1)
        rng = np.random.default_rng(3)
        times = np.array(
            [sample_transition_times(cfg, np.zeros(2), rng).t01 for _ in range(100_000)]
        )
        res = stats.kstest(times, "expon", args=(0, 10.0))
        assert res.pvalue > 0.01

    def test_quantile_closed_form(self):
        class _FixedU:
            def __init__(self):
                self.calls = 0

            def random(self):
                self.calls += 1
                return 1.0 - math.exp(-1.0)  # makes -log(1-u) = 1

        cfg = ScenarioConfig(
            name="A1", p=1,
            weibull_theta1=(2.0, 2.0, 2.0),
            weibull_theta2=(0.015, 0.015, 0.015),
            beta_true={hl: np.zeros(1) for hl in ("01", "02", "12")},
        )
        latent = sample_transition_times(cfg, np.zeros(1), _FixedU())
        assert latent.t01 == pytest.approx(1.0 / 0.015, rel=1e-12)

    def test_covariate_shifts_median(self):
        # doubling exp(beta.z) scales the median time by 2^(-1/theta1)
        cfg = ScenarioConfig(
            name="A1", p=1,
            weibull_theta1=(2.0, 2.0, 2.0),
            weibull_theta2=(0.02, 0.02, 0.02),
            beta_true={"01": np.array([math.log(2.0)]), "02": np.zeros(1), "12": np.zeros(1)},
        )
        rng1 = np.random.default_rng(7)
        t_base = np.array(
            [sample_transition_times(cfg, np.zeros(1), rng1).t01 for _ in range(40_000)]
        )
        rng2 = np.random.default_rng(7)
        t_shift = np.array(
            [sample_transition_times(cfg, np.ones(1), rng2).t01 for _ in range(40_000)]
        )
        ratio = np.median(t_shift) / np.median(t_base)
        assert ratio == pytest.approx(2 ** (-1 / 2.0), rel=0.03)

    def test_post_illness_death_after_onset(self):
        cfg = ScenarioConfig.from_name("B1")
        rng = np.random.default_rng(11)
        for _ in range(200):
            z = rng.standard_normal(50)
            latent = sample_transition_times(cfg, z, rng)
            assert latent.t12 > latent.t01


class TestVisitSchedule:
    def test_frequent_grid_no_jitter(self):
        visits = build_visit_schedule(2.5, 18.0, _StubRng(), jitter_max=0.5, dropout=0.05)
        assert visits == tuple(2.5 * k for k in range(1, 8))
        assert len(visits) + 1 == 8  # incl. entry visit

    def test_sparse_grid_no_jitter(self):
        visits = build_visit_schedule(4.5, 18.0, _StubRng(), jitter_max=0.5, dropout=0.05)
        assert visits == (4.5, 9.0, 13.5, 18.0)
        assert len(visits) + 1 <= 5

    def test_jitter_clamped_at_admin_end(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            visits = build_visit_schedule(4.5, 18.0, rng)
            assert all(v <= 18.0 for v in visits)
            assert all(b > a for a, b in zip(visits, visits[1:]))

    def test_certain_dropout_leaves_entry_only(self):
        class _AlwaysDrop:
            def random(self):
                return 0.0

            def uniform(self, lo, hi):
                return lo

        assert build_visit_schedule(2.5, 18.0, _AlwaysDrop(), dropout=1.0) == ()


class TestDeriveObserved:
    def test_diagnosed_walkthrough(self):
        latent = LatentTimes(t01=3.0, t02=10.0, t12=20.0)
        visits = tuple(2.5 * k for k in range(1, 8))
        rec, truth = derive_observed(latent, visits, 18.0, "s1")
        assert truth.delta_i_star == 1
        assert rec.l == 2.5 and rec.r == 5.0 and rec.delta_i == 1
        assert rec.t == 18.0 and rec.delta_d == 0
        assert rec.case is LikelihoodCase.ILL_CENSORED

    def test_undiagnosed_death_before_visit(self):
        latent = LatentTimes(t01=3.0, t02=50.0, t12=4.0)
        visits = (4.5, 9.0, 13.5, 18.0)
        rec, truth = derive_observed(latent, visits, 18.0, "s2")
        assert truth.delta_i_star == 1
        assert rec.delta_i == 0 and rec.delta_d == 1
        assert rec.t == 4.0
        assert truth.death_blocked_diagnosis == 1
        assert rec.case is LikelihoodCase.HEALTHY_DIED

    def test_direct_death_path(self):
        latent = LatentTimes(t01=5.0, t02=2.0, t12=30.0)
        rec, truth = derive_observed(latent, (2.5, 5.0), 18.0, "s3")
        assert truth.delta_i_star == 0
        assert rec.delta_i == 0 and rec.delta_d == 1 and rec.t == 2.0
        assert truth.death_blocked_diagnosis == 0

    def test_truth_consistency_random(self):
        cfg = ScenarioConfig.from_name("C1", n_train=400, n_test=10)
        study = simulate_scenario(cfg, seed=3)
        for rec, truth in zip(study.train.data.records, study.train.truth):
            rec.validate()
            assert rec.delta_i <= truth.delta_i_star
            if rec.delta_i == 1:
                ti = min(truth.t01, truth.t02, 18.0)
                assert rec.l < ti <= rec.r
                assert rec.r < min(truth.t12, 18.0)


class TestPreparePhm:
    def test_midpoint_imputation(self):
        rec = ObservationRecord("a", 0.0, 4.0, 6.0, 1, 9.0, 1)
        data = _single_record_dataset(rec)
        phm = prepare_phm_dataset(data)
        assert phm.records[0] == PhmRecord("a", 5.0, 1, 0)

    def test_recent_death_kept_as_death(self):
        rec = ObservationRecord("b", 0.0, 7.0, None, 0, 8.5, 1)
        phm = prepare_phm_dataset(_single_record_dataset(rec))
        assert phm.records[0] == PhmRecord("b", 8.5, 0, 1)

    def test_late_death_censored_at_last_visit(self):
        rec = ObservationRecord("c", 0.0, 7.0, None, 0, 12.0, 1)
        phm = prepare_phm_dataset(_single_record_dataset(rec))
        assert phm.records[0] == PhmRecord("c", 7.0, 0, 0)

    def test_healthy_censored(self):
        rec = ObservationRecord("d", 0.0, 7.0, None, 0, 7.0, 0)
        phm = prepare_phm_dataset(_single_record_dataset(rec))
        assert phm.records[0] == PhmRecord("d", 7.0, 0, 0)


class TestSimulateScenario:
    def test_deterministic_per_seed(self, tmp_path):
        cfg = ScenarioConfig.from_name("B1", n_train=150, n_test=50)
        s1 = simulate_scenario(cfg, seed=42)
        s2 = simulate_scenario(cfg, seed=42)
        assert s1.train.data.records == s2.train.data.records
        np.testing.assert_array_equal(
            s1.train.data.covariates.values, s2.train.data.covariates.values
        )
        assert s1.train.truth == s2.train.truth

    def test_different_seeds_differ(self):
        cfg = ScenarioConfig.from_name("B1", n_train=50, n_test=10)
        s1 = simulate_scenario(cfg, seed=1)
        s2 = simulate_scenario(cfg, seed=2)
        assert s1.train.data.records != s2.train.data.records

    def test_truth_round_trip(self, tmp_path):
        cfg = ScenarioConfig.from_name("A1", n_train=40, n_test=10)
        study = simulate_scenario(cfg, seed=9)
        path = tmp_path / "truth.csv"
        save_truth(study.train.truth, path)
        assert load_truth(path) == study.train.truth

    def test_exact_dataset_consistency(self):
        cfg = ScenarioConfig.from_name("B1", n_train=300, n_test=10)
        study = simulate_scenario(cfg, seed=5)
        exact = make_exact_dataset(study.train)
        for erec, rec, truth in zip(exact.records, study.train.data.records, study.train.truth):
            assert erec.ill == truth.delta_i_star
            assert erec.t == rec.t and erec.delta_d == rec.delta_d
            if erec.ill:
                assert erec.onset == pytest.approx(min(truth.t01, rec.t))

    def test_calibration_light(self):
        # single-seed sanity check against the scenario's published margins;
        # the full multi-seed calibration runs in the acceptance suite
        study = simulate_scenario(ScenarioConfig.from_name("B1"), seed=0)
        s = observation_summary(study.train)
        assert s["observed_01"] == pytest.approx(0.28, abs=0.04)
        assert s["observed_02"] == pytest.approx(0.63, abs=0.05)


class TestTrueBeta:
    def test_support_counts(self):
        support = true_support(50)
        assert len(support["01"]) == 7
        assert len(support["02"]) == 9
        assert len(support["12"]) == 8

    def test_values_match_design(self):
        beta = true_beta_vectors(50)
        assert beta["01"][0] == 0.8 and beta["01"][10] == -0.8 and beta["01"][41] == -0.5
        assert beta["02"][20] == -0.8 and beta["02"][42] == 0.5
        assert beta["12"][22] == -0.8 and beta["12"][40] == -0.5

    def test_truncation_to_small_p(self):
        beta = true_beta_vectors(5)
        assert beta["01"].tolist() == [0.8, 0.8, 0.8, 0.0, 0.0]


def _single_record_dataset(rec):
    from idmselect.data_model import CovariateMatrix, Dataset

    return Dataset((rec,), CovariateMatrix(np.zeros((1, 1)), ("z1",)))
