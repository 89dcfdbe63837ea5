"""Error injection, sigma model, inverse estimator, calibration."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from actcomp.errors import DimensionError, ParameterError
from actcomp.errorprop import (
    DEFAULT_MULTI_SHAPE,
    ConvLayerShape,
    GradientErrorModel,
    calibrate_a,
    diagnostics_from_errors,
    estimate_eb,
    inject_uniform_error,
    measure_gradient_error,
    parse_layer_shape,
    predict_sigma,
    run_error_trial,
)
from actcomp.tensor import Tensor, make_tensor


class TestInjectUniformError:
    def test_zeros_untouched(self):
        t = make_tensor([100], "constant", value=0.0)
        out = inject_uniform_error(t, 1e-3, preserve_zeros=True, seed=0)
        assert np.all(out.data == 0.0)

    def test_moment_oracle(self):
        # std of U[-eb, eb] is eb/sqrt(3); 10^6 samples pin it within 5%
        eb = 1e-3
        t = make_tensor([1000, 1000], "constant", value=1.0)
        out = inject_uniform_error(t, eb, seed=1)
        injected = out.data - 1.0
        expected = eb / math.sqrt(3.0)
        assert abs(injected.std() - expected) / expected < 0.05
        assert np.abs(injected).max() <= eb

    def test_deterministic(self):
        t = make_tensor([50], "uniform", seed=3)
        a = inject_uniform_error(t, 1e-2, seed=9)
        b = inject_uniform_error(t, 1e-2, seed=9)
        assert np.array_equal(a.data, b.data)

    def test_preserve_off_perturbs_zeros(self):
        t = make_tensor([1000], "constant", value=0.0)
        out = inject_uniform_error(t, 1e-3, preserve_zeros=False, seed=2)
        assert np.count_nonzero(out.data) > 900

    def test_bad_eb(self):
        with pytest.raises(ParameterError):
            inject_uniform_error(make_tensor([2], "uniform"), 0.0)


class TestPredictSigma:
    def test_zero_nonzero_ratio(self):
        assert predict_sigma(0.32, 1.0, 64, 0.0, 1e-3) == 0.0

    def test_paper_coefficient_arithmetic(self):
        assert predict_sigma(0.32, 1.0, 1, 1.0, 1e-3) == pytest.approx(3.2e-4)

    def test_doubling_batch_scales_sqrt2(self):
        s1 = predict_sigma(0.32, 2.0, 32, 0.5, 1e-3)
        s2 = predict_sigma(0.32, 2.0, 64, 0.5, 1e-3)
        assert s2 == pytest.approx(s1 * math.sqrt(2.0), rel=1e-15)

    def test_linear_in_eb_and_lbar(self):
        base = predict_sigma(0.4, 1.5, 16, 0.5, 1e-3)
        assert predict_sigma(0.4, 1.5, 16, 0.5, 2e-3) == pytest.approx(2 * base)
        assert predict_sigma(0.4, 3.0, 16, 0.5, 1e-3) == pytest.approx(2 * base)

    def test_sqrt_r_scaling(self):
        s1 = predict_sigma(0.32, 1.0, 64, 0.25, 1e-3)
        s2 = predict_sigma(0.32, 1.0, 64, 1.0, 1e-3)
        assert s2 == pytest.approx(2 * s1)

    def test_domain_errors(self):
        with pytest.raises(ParameterError):
            predict_sigma(0.0, 1.0, 1, 1.0, 1e-3)
        with pytest.raises(ParameterError):
            predict_sigma(0.3, 1.0, 0, 1.0, 1e-3)
        with pytest.raises(ParameterError):
            predict_sigma(0.3, 1.0, 1, 1.5, 1e-3)


class TestEstimateEb:
    def test_unit_parameters(self):
        assert estimate_eb(0.5, 1.0, 1.0, 1, 1.0) == pytest.approx(0.5)

    def test_degenerate_inputs_signal_skip(self):
        assert estimate_eb(0.5, 0.32, 0.0, 4, 0.5) is None
        assert estimate_eb(0.5, 0.32, 1.0, 4, 0.0) is None

    def test_precondition_errors(self):
        with pytest.raises(ParameterError):
            estimate_eb(0.0, 0.32, 1.0, 4, 0.5)

    @settings(max_examples=100, deadline=None)
    @given(
        st.floats(1e-6, 1e3),
        st.floats(0.01, 10.0),
        st.floats(1e-4, 1e2),
        st.integers(1, 4096),
        st.floats(0.01, 1.0),
    )
    def test_inverse_round_trip(self, sigma, a, L_bar, N, R):
        eb = estimate_eb(sigma, a, L_bar, N, R)
        assert eb is not None
        back = predict_sigma(a, L_bar, N, R, eb)
        assert abs(back - sigma) <= 1e-12 * sigma
        eb2 = estimate_eb(back, a, L_bar, N, R)
        assert abs(eb2 - eb) <= 1e-12 * eb


class TestGradientErrorModel:
    def test_consistent_construction(self):
        m = GradientErrorModel.from_params(a=0.32, L_bar=2.0, N=64, R=0.5, eb=1e-3)
        assert m.sigma == pytest.approx(0.32 * 2.0 * math.sqrt(32.0) * 1e-3)

    def test_inconsistent_sigma_rejected(self):
        with pytest.raises(ParameterError):
            GradientErrorModel(sigma=1.0, a=0.32, eb=1e-3, L_bar=1.0, N=1, R=1.0)


class TestMeasureGradientError:
    def test_identical_gradients(self):
        t = make_tensor([50], "uniform", seed=1)
        d = measure_gradient_error(t, t)
        assert d.empirical_sigma == 0.0
        assert d.fraction_within_1sigma == 1.0
        assert sum(d.histogram) == d.sample_count == 50

    def test_normal_sample_fraction(self):
        rng = np.random.default_rng(0)
        errors = rng.normal(0, 2.0, size=10**5)
        d = diagnostics_from_errors(errors)
        assert 0.67 <= d.fraction_within_1sigma <= 0.695
        assert sum(d.histogram) == 10**5
        assert not d.chi_square_exceeds_01

    def test_uniform_sample_fraction(self):
        # P(|X| <= sigma) for uniform is 1/sqrt(3) = 0.5774
        rng = np.random.default_rng(1)
        errors = rng.uniform(-1, 1, size=10**5)
        d = diagnostics_from_errors(errors)
        assert abs(d.fraction_within_1sigma - 1.0 / math.sqrt(3.0)) < 0.006
        assert d.chi_square_exceeds_01  # uniform is detectably non-normal

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            measure_gradient_error(
                make_tensor([3], "uniform"), make_tensor([4], "uniform")
            )

    def test_histogram_total_with_outliers_clipped(self):
        errors = np.concatenate([np.random.default_rng(2).normal(size=1000), [50.0]])
        d = diagnostics_from_errors(errors)
        assert sum(d.histogram) == d.sample_count == 1001


class TestLayerShapeGrammar:
    def test_parse_round_trip(self):
        s = parse_layer_shape("3x10x10,k3x3,s1,o4")
        assert s == ConvLayerShape(3, 10, 10, 3, 1, 4)
        assert parse_layer_shape(str(s)) == s

    def test_parse_errors(self):
        for bad in ("", "3x10,k3x3,s1,o4", "3x10x10,k3x2,s1,o4", "junk"):
            with pytest.raises(ParameterError):
                parse_layer_shape(bad)


class TestCalibration:
    def test_multi_regime_in_validated_band(self):
        res = calibrate_a(trials=30, seed=12, regime="multi")
        assert 0.25 <= res.a_hat <= 0.40
        assert res.half_width < 0.05

    def test_single_regime_matches_uniform_std(self):
        res = calibrate_a(trials=30, seed=12, regime="single")
        assert abs(res.a_hat - 1.0 / math.sqrt(3.0)) <= 0.02

    def test_eb_scale_free(self):
        lo = calibrate_a(trials=30, seed=4, eb=1e-3, regime="multi")
        hi = calibrate_a(trials=30, seed=4, eb=2e-3, regime="multi")
        assert abs(lo.a_hat - hi.a_hat) < 0.02

    def test_deterministic(self):
        a = calibrate_a(trials=30, seed=5)
        b = calibrate_a(trials=30, seed=5)
        assert a == b

    def test_too_few_trials(self):
        with pytest.raises(ParameterError):
            calibrate_a(trials=10)


class TestErrorTrial:
    def test_preserving_zeros_shrinks_sigma(self):
        # with R = 0.5, skipping zeros should shrink sigma by ~sqrt(R)
        kw = dict(shape=DEFAULT_MULTI_SHAPE, N=64, R=0.5, eb=1e-3, error_draws=3)
        on = run_error_trial(seed=77, preserve_zeros=True, **kw)
        off = run_error_trial(seed=77, preserve_zeros=False, **kw)
        assert off.sigma_emp > on.sigma_emp * 1.2

    def test_sigma_matches_prediction_with_calibrated_a(self):
        a_hat = calibrate_a(trials=30, seed=3, regime="multi").a_hat
        trial = run_error_trial(DEFAULT_MULTI_SHAPE, 64, 0.5, 1e-3, seed=123,
                                error_draws=3)
        pred = predict_sigma(a_hat, trial.L_bar, trial.N, trial.R, trial.eb)
        assert abs(trial.sigma_emp - pred) / pred < 0.25

    def test_r_recorded_exactly(self):
        trial = run_error_trial(DEFAULT_MULTI_SHAPE, 8, 0.3, 1e-3, seed=5)
        n = 8 * 3 * 10 * 10
        assert trial.R == pytest.approx(round(0.3 * n) / n)
