import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import between_block_pom, random_pom, strict_pom, within_block_pom
from splitplot.design import Assignment, CompletelyRandomizedSpec, SplitPlotSpec, randomize_cr, randomize_sp
from splitplot.estimator import (
    EstimationError,
    ObservedData,
    balanced_sp_variances,
    closed_form_special_cases,
    confidence_interval,
    estimate,
    estimate_variance_cr,
    estimate_variance_sp,
    estimator_bias,
    observe,
    point_estimates,
    read_observed_csv,
    sample_between_covariances,
    sampling_variance_cr,
    sampling_variance_sp,
)
from splitplot.normal import normal_quantile
from splitplot.oracle import exact_moments
from splitplot.pom import CONTRASTS, BlockLayout, PotentialOutcomeMatrix, factorial_effects, summarize_covariances
from splitplot.rng import make_stream

SPLIT_PLOT_PLAN = np.array([2, 1, 4, 3, 3, 4, 2, 1], dtype=np.int8)


def _data(treatment, y, W=None, M=None):
    layout = BlockLayout(W, M) if W else None
    return ObservedData(layout, Assignment(np.asarray(treatment, dtype=np.int8), layout), np.asarray(y, float))


class TestObserve:
    def test_constant_pom(self):
        pom = PotentialOutcomeMatrix(BlockLayout(4, 2), np.full((8, 4), 3.0))
        data = observe(pom, Assignment(SPLIT_PLOT_PLAN, pom.layout))
        np.testing.assert_array_equal(data.y_obs, 3.0)

    def test_column_index_pom(self):
        pom = PotentialOutcomeMatrix(BlockLayout(4, 2), np.tile([1.0, 2, 3, 4], (8, 1)))
        data = observe(pom, Assignment(SPLIT_PLOT_PLAN, pom.layout))
        np.testing.assert_array_equal(data.y_obs, SPLIT_PLOT_PLAN)

    def test_arm_one_recipients(self, rng):
        pom = random_pom(rng, 4, 2)
        data = observe(pom, Assignment(SPLIT_PLOT_PLAN, pom.layout))
        assert data.arm_means[0] == pytest.approx((pom.values[1, 0] + pom.values[7, 0]) / 2)

    def test_layout_mismatch(self, rng):
        pom = random_pom(rng, 2, 4)
        with pytest.raises(ValueError):
            observe(pom, Assignment(SPLIT_PLOT_PLAN, BlockLayout(4, 2)))


class TestPointEstimates:
    def test_constant_data(self):
        np.testing.assert_array_equal(point_estimates(_data(SPLIT_PLOT_PLAN, np.full(8, 7.0))), 0.0)

    def test_hand_computed(self):
        tau = point_estimates(_data(SPLIT_PLOT_PLAN, SPLIT_PLOT_PLAN.astype(float)))
        np.testing.assert_allclose(tau, [2, 1, 0])

    def test_empty_arm(self):
        with pytest.raises(EstimationError):
            point_estimates(_data([1, 1, 2, 3], np.zeros(4)))


class TestSamplingVariance:
    def test_constant_pom(self):
        pom = PotentialOutcomeMatrix(BlockLayout(4, 2), np.ones((8, 4)))
        np.testing.assert_array_equal(sampling_variance_cr(pom, CompletelyRandomizedSpec.balanced(8)), 0)
        np.testing.assert_allclose(sampling_variance_sp(pom, SplitPlotSpec.balanced(4, 2)), 0, atol=1e-16)

    def test_balanced_cr_form(self, rng):
        pom = random_pom(rng, 3, 4)
        cov, fx = summarize_covariances(pom), factorial_effects(pom)
        expected = np.trace(cov.S2) / pom.N - fx.S2_F / pom.N
        np.testing.assert_allclose(sampling_variance_cr(pom, CompletelyRandomizedSpec.balanced(12)), expected,
                                   rtol=1e-12)

    @pytest.mark.parametrize("W,M", [(2, 2), (4, 2)])
    def test_cr_matches_enumeration(self, rng, W, M):
        pom = random_pom(rng, W, M)
        spec = CompletelyRandomizedSpec.balanced(W * M)
        np.testing.assert_allclose(exact_moments(pom, spec).var_tau_hat, sampling_variance_cr(pom, spec), rtol=1e-9)

    def test_sp_matches_enumeration(self, rng):
        pom = random_pom(rng, 4, 2)
        spec = SplitPlotSpec.balanced(4, 2)
        np.testing.assert_allclose(exact_moments(pom, spec).var_tau_hat, sampling_variance_sp(pom, spec), rtol=1e-9)

    @pytest.mark.parametrize("W,M,Wp,Mp", [(6, 4, 2, 1), (5, 3, 3, 1), (8, 8, 4, 4)])
    def test_both_match_full_covariance_sandwich(self, rng, W, M, Wp, Mp):
        from scipy.linalg import block_diag
        from splitplot.design import theoretical_assignment_moments

        spec = SplitPlotSpec(BlockLayout(W, M), Wp, Mp)
        pom = random_pom(rng, W, M)
        Yt = block_diag(*[pom.values[:, [k]] for k in range(4)])
        for s, fn in ((spec, sampling_variance_sp), (spec.cr_counterpart(), sampling_variance_cr)):
            cov = theoretical_assignment_moments(s).full_cov()
            direct = np.array([g @ Yt.T @ cov @ Yt @ g / 4 for g in CONTRASTS])
            np.testing.assert_allclose(fn(pom, s), direct, rtol=1e-10)


class TestSpecialCases:
    def test_equal_discriminant_gives_equal_variances(self):
        for spec in (SplitPlotSpec.balanced(6, 4), SplitPlotSpec(BlockLayout(9, 5), 3, 1)):
            rep = closed_form_special_cases(spec, 0.5 / spec.M, 0.5)
            np.testing.assert_allclose(rep.differences, 0, atol=1e-15)
            assert rep.discriminant == pytest.approx(0, abs=1e-15)

    def test_pure_between_variance(self):
        rep = closed_form_special_cases(SplitPlotSpec.balanced(10, 4), 1.0, 0.0)
        np.testing.assert_allclose(rep.sp_variances, [0.4, 0, 0])

    def test_negative_inputs(self):
        with pytest.raises(ValueError):
            closed_form_special_cases(SplitPlotSpec.balanced(4, 2), -1.0, 1.0)

    @pytest.mark.parametrize("W,M,Wp,Mp", [(4, 2, 2, 1), (6, 5, 2, 3), (9, 4, 6, 1)])
    def test_strict_additive_closed_forms(self, rng, W, M, Wp, Mp):
        spec = SplitPlotSpec(BlockLayout(W, M), Wp, Mp)
        pom = strict_pom(rng, W, M)
        cov = summarize_covariances(pom)
        rep = closed_form_special_cases(spec, cov.S2_btw[0, 0], cov.S2_in[0, 0])
        np.testing.assert_allclose(rep.sp_variances, sampling_variance_sp(pom, spec), rtol=1e-12)
        np.testing.assert_allclose(rep.cr_variance, sampling_variance_cr(pom, spec.cr_counterpart()), rtol=1e-12)
        sp = sampling_variance_sp(pom, spec)
        assert sp[1] == sp[2]

    def test_balanced_decomposition(self, rng):
        pom = random_pom(rng, 6, 4)
        np.testing.assert_allclose(balanced_sp_variances(pom), sampling_variance_sp(pom, SplitPlotSpec.balanced(6, 4)),
                                   rtol=1e-12)

    def test_within_block_additive_reduction(self, rng):
        pom = within_block_pom(rng, 6, 4)
        fx = factorial_effects(pom)
        W, N = 6, 24
        var = sampling_variance_sp(pom, SplitPlotSpec.balanced(6, 4))
        expected = [4 * fx.S2_mu_btw / W, fx.S2_F_btw[2] / W + 4 * fx.S2_mu_in / N,
                    fx.S2_F_btw[1] / W + 4 * fx.S2_mu_in / N]
        np.testing.assert_allclose(var, expected, rtol=1e-12)

    def test_between_block_additive_reduction(self, rng):
        pom = between_block_pom(rng, 6, 4)
        fx = factorial_effects(pom)
        var = sampling_variance_sp(pom, SplitPlotSpec.balanced(6, 4))
        np.testing.assert_allclose(var[1:], (4 * fx.S2_mu_in + fx.S2_F_in[0]) / 24, rtol=1e-12)

    def test_balanced_designs_are_optimal(self):
        W = M = 12
        for S_btw, S_in in ((1.0, 0.3), (0.1, 2.0), (1.0, 1.0)):
            grid = {(wp, mp): closed_form_special_cases(SplitPlotSpec(BlockLayout(W, M), wp, mp), S_btw, S_in)
                    for wp in range(2, W - 1) for mp in range(1, M)}
            best = grid[(6, 6)].sp_variances
            for rep in grid.values():
                assert np.all(rep.sp_variances >= best - 1e-15)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(4, 20), st.integers(2, 10), st.floats(0, 10), st.floats(0, 10), st.data())
    def test_sign_of_design_comparison(self, W, M, S_btw, S_in, data):
        spec = SplitPlotSpec(BlockLayout(W, M), data.draw(st.integers(1, W - 1)), data.draw(st.integers(1, M - 1)))
        rep = closed_form_special_cases(spec, S_btw, S_in)
        diff = rep.differences
        scale = 1e-12 * max(1.0, S_btw, S_in)
        if abs(rep.discriminant) > 1e-9:
            assert np.sign(diff[0]) == rep.predicted_sign["A"]
            assert np.sign(diff[1]) == rep.predicted_sign["B"] == np.sign(diff[2])
        else:
            assert np.all(np.abs(diff) <= scale + 1e-9)
        assert rep.predicted_sign["B"] == -rep.predicted_sign["A"]

    @settings(max_examples=50, deadline=None)
    @given(st.integers(2, 20), st.integers(2, 10), st.floats(0.01, 10), st.floats(0.01, 10), st.data())
    def test_whole_plot_versus_sub_plot_precision(self, W, M, S_btw, S_in, data):
        spec = SplitPlotSpec(BlockLayout(W, M), data.draw(st.integers(1, W - 1)), data.draw(st.integers(1, M - 1)))
        rep = closed_form_special_cases(spec, S_btw, S_in)
        gap = rep.sp_variances[0] - rep.sp_variances[1]
        assert gap == pytest.approx(spec.gamma_A / W * (S_btw - S_in / M), rel=1e-9, abs=1e-12)


class TestVarianceEstimation:
    def test_plot_means_identical_across_plots(self):
        spec = SplitPlotSpec.balanced(4, 2)
        a = randomize_sp(spec, make_stream(0))
        data = ObservedData(spec.layout, a, a.treatment * 1.5)
        np.testing.assert_array_equal(estimate_variance_sp(data, spec), 0.0)

    def test_two_unit_arms(self):
        t = [1, 1, 2, 2, 3, 3, 4, 4]
        y = [0, 2, 0, 2, 0, 2, 0, 2]
        np.testing.assert_allclose(estimate_variance_cr(_data(t, y)), 1.0)

    def test_constant_data_cr(self):
        np.testing.assert_array_equal(estimate_variance_cr(_data(SPLIT_PLOT_PLAN, np.full(8, 2.0))), 0)

    def test_cr_matches_heteroskedasticity_robust_regression(self, rng):
        t = randomize_cr(CompletelyRandomizedSpec(20, (4, 5, 5, 6)), make_stream(5)).treatment
        y = rng.normal(size=20) + t
        X = np.eye(4)[t - 1]
        XtX_inv = np.linalg.inv(X.T @ X)
        beta = XtX_inv @ X.T @ y
        e = y - X @ beta
        h = np.sum(X @ XtX_inv * X, axis=1)
        cov = XtX_inv @ X.T @ np.diag(e**2 / (1 - h)) @ X @ XtX_inv
        hc2 = np.array([g @ cov @ g / 4 for g in CONTRASTS])
        np.testing.assert_allclose(estimate_variance_cr(_data(t, y)), hc2, rtol=1e-12)

    def test_needs_two_plots_per_level(self, rng):
        spec = SplitPlotSpec(BlockLayout(3, 2), 1, 1)
        data = observe(random_pom(rng, 3, 2), randomize_sp(spec, make_stream(1)))
        with pytest.raises(EstimationError):
            estimate_variance_sp(data, spec)

    def test_cr_needs_two_units_per_arm(self):
        with pytest.raises(EstimationError):
            estimate_variance_cr(_data([1, 2, 3, 4, 4], np.arange(5.0)))

    def test_sample_covariance_block_structure(self, rng):
        spec = SplitPlotSpec(BlockLayout(6, 3), 3, 1)
        data = observe(random_pom(rng, 6, 3), randomize_sp(spec, make_stream(3)))
        s2 = sample_between_covariances(data, spec)
        np.testing.assert_array_equal(s2[:2, 2:], 0)
        g = CONTRASTS
        direct = 0.25 * np.array([gf[:2] @ s2[:2, :2] @ gf[:2] / spec.W_minus + gf[2:] @ s2[2:, 2:] @ gf[2:] / spec.W_plus
                                  for gf in g])
        np.testing.assert_allclose(estimate_variance_sp(data, spec), direct, rtol=1e-12)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(4, 10), st.integers(2, 6), st.integers(0, 2**31 - 1), st.data())
    def test_non_negative(self, W, M, seed, data):
        spec = SplitPlotSpec(BlockLayout(W, M), data.draw(st.integers(2, W - 2)), data.draw(st.integers(1, M - 1)))
        r = np.random.default_rng(seed)
        pom = PotentialOutcomeMatrix(spec.layout, r.normal(size=(spec.N, 4)) * 10.0 ** r.integers(-8, 8))
        d = observe(pom, randomize_sp(spec, make_stream(seed)))
        assert np.all(estimate_variance_sp(d, spec) >= 0)
        assert np.all(estimate_variance_cr(d) >= 0)

    def test_bias_is_zero_under_between_block_additivity(self, rng):
        pom = between_block_pom(rng, 4, 3)
        spec = SplitPlotSpec(BlockLayout(4, 3), 2, 1)
        np.testing.assert_allclose(estimator_bias(pom, spec), 0, atol=1e-14)
        rep = exact_moments(pom, spec)
        np.testing.assert_allclose(rep.mean_V_hat, rep.var_tau_hat, atol=1e-12)

    def test_bias_equals_between_block_effect_variance_over_W(self, rng):
        pom = random_pom(rng, 4, 2)
        spec = SplitPlotSpec.balanced(4, 2)
        rep = exact_moments(pom, spec)
        S2_F_btw = factorial_effects(pom).S2_F_btw
        np.testing.assert_allclose(rep.mean_V_hat - rep.var_tau_hat, S2_F_btw / spec.W, atol=1e-12)
        np.testing.assert_allclose(estimator_bias(pom, spec), S2_F_btw / spec.W, rtol=1e-12)


class TestIntervals:
    def test_degenerate(self):
        ci = confidence_interval([1.0, 2.0, 3.0], [0.0, 0.0, 0.0])
        np.testing.assert_array_equal(ci[:, 0], ci[:, 1])

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=3), st.lists(st.floats(0, 1e3), min_size=3, max_size=3),
           st.floats(0.001, 0.5))
    def test_width(self, tau, V, alpha):
        ci = confidence_interval(tau, V, alpha)
        width = 2 * normal_quantile(1 - alpha / 2) * np.sqrt(V)
        np.testing.assert_allclose(ci[:, 1] - ci[:, 0], width, rtol=1e-9, atol=1e-9)
        np.testing.assert_allclose((ci[:, 0] + ci[:, 1]) / 2, tau, rtol=1e-9, atol=1e-9)

    @pytest.mark.parametrize("alpha", [0.0, 1.0, -0.5, 2.0])
    def test_invalid_alpha(self, alpha):
        with pytest.raises(ValueError):
            confidence_interval([0.0], [1.0], alpha)

    def test_negative_variance(self):
        with pytest.raises(ValueError):
            confidence_interval([0.0], [-1.0])


class TestEstimate:
    def test_methods_share_point_estimates(self, rng):
        spec = SplitPlotSpec.balanced(6, 4)
        data = observe(random_pom(rng, 6, 4), randomize_sp(spec, make_stream(8)))
        sp = estimate(data, "SP", spec)
        cr = estimate(data, "cr")
        np.testing.assert_array_equal(sp.tau_hat, cr.tau_hat)
        assert [r["effect"] for r in sp.rows()] == ["A", "B", "AB"]
        assert {r["method"] for r in cr.rows()} == {"CR"}

    def test_sp_needs_spec(self, rng):
        spec = SplitPlotSpec.balanced(4, 2)
        data = observe(random_pom(rng, 4, 2), randomize_sp(spec, make_stream(0)))
        with pytest.raises(ValueError):
            estimate(data, "SP")
        with pytest.raises(ValueError):
            estimate(data, "GLM", spec)

    def test_read_observed_csv(self):
        text = "whole_plot,sub_plot,treatment,y_obs\n2,1,3,1.5\n1,1,1,0.5\n1,2,2,2.5\n2,2,4,3.0\n"
        data = read_observed_csv(io.StringIO(text))
        np.testing.assert_array_equal(data.assignment.treatment, [1, 2, 3, 4])
        np.testing.assert_array_equal(data.y_obs, [0.5, 2.5, 1.5, 3.0])
