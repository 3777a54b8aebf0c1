import math

import numpy as np
import pytest

from idmselect.baselines import MSPLINE, WEIBULL, BaselineSpec, ThetaBlock
from idmselect.data_model import CovariateMatrix, Dataset, ObservationRecord
from idmselect.errors import SupportError
from idmselect.inference import (
    MLEFit,
    intensity_ratios,
    predict_illness_probability,
    refit_mle,
    state_occupancy,
)
from idmselect.model import ModelSpec, ParameterSet
from idmselect.optimizer import ConvergenceConfig, PenaltyConfig, fit_inner

from util import constant_hazard_params, mspline_spec, random_cohort, random_params, weibull_spec


def constant_fit(a01, a02, horizon=250.0):
    spec = ModelSpec.full(BaselineSpec(MSPLINE, knots=(0.0, horizon), order=1), 1)
    theta = {
        hl: ThetaBlock(np.array([math.sqrt(rate * horizon)]), hl)
        for hl, rate in (("01", a01), ("02", a02), ("12", 0.1))
    }
    beta = {hl: np.zeros(1) for hl in spec.transitions}
    params = ParameterSet(theta, beta)
    return MLEFit(params=params, spec=spec, covariance=None, loglik=0.0, converged=True)


class TestPredictClosedForms:
    def test_zero_horizon(self):
        fit = constant_fit(0.1, 0.05)
        assert predict_illness_probability(fit, np.zeros((1, 1)), 0.0)[0] == 0.0

    def test_long_horizon_limit(self):
        fit = constant_fit(0.1, 0.1)
        p = predict_illness_probability(fit, np.zeros((1, 1)), 200.0)[0]
        assert p == pytest.approx(0.5, abs=1e-6)

    def test_finite_horizon_closed_form(self):
        fit = constant_fit(0.1, 0.05, horizon=20.0)
        p = predict_illness_probability(fit, np.zeros((1, 1)), 10.0)[0]
        expected = (0.1 / 0.15) * (1 - math.exp(-1.5))
        assert p == pytest.approx(expected, rel=1e-9)

    def test_monotone_and_bounded(self):
        spec = mspline_spec(2)
        params = random_params(spec, seed=3)
        z = np.array([[0.4, -1.2]])
        grid = np.linspace(0.0, 18.0, 40)
        values = np.array(
            [predict_illness_probability(params, z, t, spec=spec)[0] for t in grid]
        )
        assert np.all(np.diff(values) >= -1e-12)
        assert np.all((values >= 0) & (values <= 1))

    def test_horizon_outside_support(self):
        spec = mspline_spec(1)
        params = random_params(spec, seed=5)
        with pytest.raises(SupportError):
            predict_illness_probability(params, np.zeros((1, 1)), 19.0, spec=spec)


class TestNormalizationIdentity:
    @pytest.mark.parametrize("family", ["mspline", "weibull"])
    def test_occupancies_sum_to_one(self, family):
        spec = mspline_spec(2) if family == "mspline" else weibull_spec(2)
        rng = np.random.default_rng(11)
        for draw in range(10):
            params = random_params(spec, seed=100 + draw)
            z = rng.normal(size=(1, 2))
            grid = np.linspace(0.01, 18.0, 50)
            f01, f02, surv = state_occupancy(params, spec, np.repeat(z, 50, axis=0), grid)
            np.testing.assert_allclose(f01 + f02 + surv, 1.0, rtol=0, atol=1e-8)


class TestIntensityRatios:
    def make_fit(self, beta, se):
        spec = ModelSpec.full(BaselineSpec(WEIBULL), 1).with_masks(
            {"01": (0,), "02": (), "12": ()}
        )
        theta = {hl: ThetaBlock(np.array([1.0, 0.3]), hl) for hl in spec.transitions}
        params = ParameterSet(theta, {"01": np.array([beta]), "02": np.zeros(0), "12": np.zeros(0)})
        dim = 6 + 1
        cov = np.zeros((dim, dim))
        cov[6, 6] = se**2
        return MLEFit(params=params, spec=spec, covariance=cov, loglik=0.0, converged=True)

    def test_unit_ratio_interval(self):
        rows = intensity_ratios(self.make_fit(0.0, 0.1))
        assert len(rows) == 1
        row = rows[0]
        assert row.ratio == pytest.approx(1.0)
        assert row.ci_low == pytest.approx(math.exp(-0.196), rel=1e-12)
        assert row.ci_high == pytest.approx(math.exp(0.196), rel=1e-12)

    def test_zero_se_warns_degenerate(self):
        with pytest.warns(UserWarning, match="zero standard error"):
            rows = intensity_ratios(self.make_fit(math.log(2.0), 0.0))
        assert rows[0].ci_low == rows[0].ci_high == pytest.approx(2.0)

    def test_ci_excludes_one_iff_wald_significant(self):
        for beta, se in [(0.3, 0.1), (0.1, 0.2), (-0.5, 0.2), (-0.1, 0.3)]:
            row = intensity_ratios(self.make_fit(beta, se))[0]
            excludes = row.ci_low > 1.0 or row.ci_high < 1.0
            assert excludes == (abs(beta) / se > 1.96)


class TestRefitMle:
    def test_empty_active_set_reduces_to_null(self):
        data = random_cohort(150, 3, seed=21)
        spec = mspline_spec(3)
        fit = refit_mle(data, spec, {"01": (), "02": (), "12": ()})
        assert fit.converged
        assert all(fit.params.beta[hl].size == 0 for hl in spec.transitions)
        assert np.isfinite(fit.loglik)

    def test_refit_dominates_penalized_loglik(self):
        data = random_cohort(200, 4, seed=22)
        spec = mspline_spec(4)
        penalty = PenaltyConfig(1.0, {hl: 1.0 for hl in spec.transitions})
        pen_fit = fit_inner(data, spec, penalty)
        refit = refit_mle(data, spec, pen_fit.active_set)
        assert refit.loglik >= pen_fit.unpenalized_ll - 1e-6

    def test_matches_penalized_fit_at_vanishing_penalty(self):
        data = random_cohort(300, 3, seed=23)
        spec = mspline_spec(3)
        conv = ConvergenceConfig(e_a=1e-9, e_b=1e-9)
        tiny = PenaltyConfig(1.0, {hl: 1e-8 for hl in spec.transitions})
        pen_fit = fit_inner(data, spec, tiny, conv)
        full = {hl: tuple(range(3)) for hl in spec.transitions}
        refit = refit_mle(data, spec, full, conv)
        for hl in spec.transitions:
            np.testing.assert_allclose(
                pen_fit.params.beta[hl], refit.params.beta[hl], atol=1e-2
            )

    def test_exponential_rate_ratio_oracle(self):
        # competing exponential risks with a single binary covariate on the
        # death cause; the closed-form crude estimator is log((e1/T1)/(e0/T0))
        from idmselect.likelihood import PhmDataset, PhmRecord

        rng = np.random.default_rng(31)
        n = 2000
        z = (rng.random(n) < 0.5).astype(float)
        beta_true = 0.7
        rate0 = 0.08
        t_ill = rng.exponential(1.0 / 0.05, size=n)
        t_death = rng.exponential(1.0 / (rate0 * np.exp(beta_true * z)))
        tstar = np.minimum(np.minimum(t_ill, t_death), 18.0)
        d1 = ((t_ill < t_death) & (t_ill < 18.0)).astype(int)
        d2 = ((t_death <= t_ill) & (t_death < 18.0)).astype(int)
        records = tuple(
            PhmRecord(f"s{i}", float(tstar[i]), int(d1[i]), int(d2[i])) for i in range(n)
        )
        data = PhmDataset(records, CovariateMatrix(z[:, None], ("grp",)))
        spec = ModelSpec.full(BaselineSpec(WEIBULL), 1, mode="phm")
        fit = refit_mle(data, spec, {"01": (), "02": (0,)}, covariate_names=("grp",))
        e1, t1 = d2[z == 1].sum(), tstar[z == 1].sum()
        e0, t0 = d2[z == 0].sum(), tstar[z == 0].sum()
        crude = math.log((e1 / t1) / (e0 / t0))
        se = fit.beta_standard_errors()["02"][0]
        assert fit.params.beta["02"][0] == pytest.approx(crude, abs=2 * se + 0.02)
        assert 0.0 < se < 0.2

    def test_covariance_psd(self):
        data = random_cohort(200, 2, seed=41)
        spec = mspline_spec(2)
        fit = refit_mle(data, spec, {"01": (0,), "02": (1,), "12": ()})
        assert fit.covariance is not None
        eigs = np.linalg.eigvalsh(fit.covariance)
        assert eigs.min() >= -1e-8
