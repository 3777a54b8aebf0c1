import numpy as np
import pytest

from idmselect.baselines import (
    MSPLINE,
    WEIBULL,
    BaselineSpec,
    MSplineBasis,
    ThetaBlock,
    baseline_cumulative,
    baseline_intensity,
)
from idmselect.errors import DataError, SupportError


def theta(raw, hl="01"):
    return ThetaBlock(np.asarray(raw, dtype=float), hl)


def from_effective(values, hl="01"):
    return theta(np.sqrt(np.asarray(values, dtype=float)), hl)


class TestWeibull:
    spec = BaselineSpec(WEIBULL)

    def test_constant_hazard_special_case(self):
        th = from_effective([1.0, 0.5])
        assert baseline_intensity(self.spec, th, 3.0) == pytest.approx(0.5)

    def test_intensity_closed_form(self):
        th = from_effective([2.0, 0.015])
        assert baseline_intensity(self.spec, th, 10.0) == pytest.approx(2 * 0.015 * 0.15)

    def test_cumulative_closed_form(self):
        th = from_effective([2.0, 0.015])
        assert baseline_cumulative(self.spec, th, 10.0) == pytest.approx(0.15 ** 2)

    def test_cumulative_at_zero(self):
        th = from_effective([2.0, 0.015])
        assert baseline_cumulative(self.spec, th, 0.0) == 0.0


class TestMSplineBasis:
    def test_order1_is_normalized_indicator(self):
        spec = BaselineSpec(MSPLINE, knots=(0.0, 9.0, 18.0), order=1)
        th = from_effective([1.0, 0.0])
        assert baseline_intensity(spec, th, 4.0) == pytest.approx(1.0 / 9.0)
        assert baseline_intensity(spec, th, 12.0) == pytest.approx(0.0)

    def test_each_mspline_integrates_to_one(self):
        # trapezoid oracle on a dense grid, independent of the I-spline path
        basis = MSplineBasis((0.0, 9.0, 18.0), 4)
        x = np.linspace(0.0, 18.0, 100001)
        vals = basis.evaluate(x)
        integrals = np.trapezoid(vals, x, axis=0)
        np.testing.assert_allclose(integrals, np.ones(basis.n_basis), atol=1e-6)

    def test_isplines_monotone_zero_to_one(self):
        basis = MSplineBasis((0.0, 5.0, 9.0, 18.0), 4)
        x = np.linspace(0.0, 18.0, 2001)
        ivals = basis.integral(x)
        assert np.all(np.diff(ivals, axis=0) >= -1e-12)
        np.testing.assert_allclose(ivals[0], 0.0, atol=1e-14)
        np.testing.assert_allclose(ivals[-1], 1.0, atol=1e-12)

    def test_cumulative_all_ones_at_upper_knot(self):
        spec = BaselineSpec(MSPLINE, knots=(0.0, 9.0, 18.0), order=4)
        k = spec.n_params
        th = from_effective(np.ones(k))
        assert baseline_cumulative(spec, th, 18.0) == pytest.approx(k)

    def test_support_error(self):
        spec = BaselineSpec(MSPLINE, knots=(0.0, 9.0, 18.0))
        th = from_effective(np.ones(spec.n_params))
        with pytest.raises(SupportError):
            baseline_intensity(spec, th, 19.0)
        with pytest.raises(SupportError):
            baseline_cumulative(spec, th, -0.5)

    def test_n_params_counts_interior_knots_plus_order(self):
        assert BaselineSpec(MSPLINE, knots=(0.0, 9.0, 18.0), order=4).n_params == 5
        assert BaselineSpec(MSPLINE, knots=(0.0, 5.0, 9.0, 18.0), order=4).n_params == 6
        assert BaselineSpec(MSPLINE, knots=(0.0, 9.0, 18.0), order=1).n_params == 2


class TestSharedProperties:
    @pytest.mark.parametrize(
        "spec,raw",
        [
            (BaselineSpec(WEIBULL), [1.5, 0.2]),
            (BaselineSpec(MSPLINE, knots=(0.0, 9.0, 18.0), order=4), [0.4, 0.9, 0.2, 0.7, 0.3]),
        ],
    )
    def test_cumulative_nondecreasing_and_differentiates_to_intensity(self, spec, raw):
        th = theta(raw)
        tmax = 18.0
        ts = np.linspace(0.05, tmax - 0.05, 60)
        cum = baseline_cumulative(spec, th, ts)
        assert np.all(np.diff(cum) >= -1e-12)
        h = 1e-6
        fd = (baseline_cumulative(spec, th, ts + h) - baseline_cumulative(spec, th, ts - h)) / (2 * h)
        inten = baseline_intensity(spec, th, ts)
        mask = inten > 1e-8
        np.testing.assert_allclose(fd[mask], inten[mask], rtol=1e-5)

    @pytest.mark.parametrize(
        "spec,raw",
        [
            (BaselineSpec(WEIBULL), [1.3, -0.4]),
            (BaselineSpec(MSPLINE, knots=(0.0, 9.0, 18.0), order=4), [0.4, -0.9, 0.2, -0.7, 0.3]),
        ],
    )
    def test_sign_flip_invariance(self, spec, raw):
        raw = np.asarray(raw, dtype=float)
        ts = np.linspace(0.1, 17.9, 25)
        base = baseline_intensity(spec, theta(raw), ts)
        for j in range(raw.shape[0]):
            flipped = raw.copy()
            flipped[j] = -flipped[j]
            np.testing.assert_allclose(baseline_intensity(spec, theta(flipped), ts), base)


class TestSpecValidation:
    def test_knots_must_ascend(self):
        with pytest.raises(DataError, match="ascending"):
            BaselineSpec(MSPLINE, knots=(0.0, 9.0, 9.0))

    def test_weibull_rejects_knots(self):
        with pytest.raises(DataError):
            BaselineSpec(WEIBULL, knots=(0.0, 18.0))

    def test_unknown_family(self):
        with pytest.raises(DataError):
            BaselineSpec("cox")
