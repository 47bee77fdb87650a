import math

import numpy as np
import pytest

from conftest import finite_difference_jacobian, scenario_draw, two_point_spec
from msmm.core import (
    build_score_system,
    center_weights,
    controlled_effects,
    default_contrasts,
    identification_check,
    score,
    score_jacobian,
    solve,
    _stacked_jacobian,
    _stacked_score,
)
from msmm.data import (
    BasisTerm,
    Dataset,
    EffectSpec,
    WeightTerm,
    build_weight_matrix,
)
from msmm.exceptions import (
    ContrastOutsideSpan,
    NonBinaryTreatment,
    OverflowGuard,
)
from msmm.simulate import study_spec


class TestCenterWeights:
    def test_known_p_plain_z(self):
        data = Dataset(outcome=[1, 1], treatment=[1.0, 0.0],
                       mediator=[0.0, 0.0], covariates=np.zeros((2, 0)))
        spec = two_point_spec()
        A = build_weight_matrix(spec, data)
        centered = center_weights(A, data, method="known-p", spec=spec, p=0.5)
        assert centered[:, 0].tolist() == [0.5, -0.5]

    def test_empirical_interaction(self):
        a, b, c, d = 1.3, -0.4, 2.2, 0.9
        data = Dataset(outcome=[1, 1, 1, 1], treatment=[1.0, 1.0, 0.0, 0.0],
                       mediator=[0.0] * 4,
                       covariates=np.array([[a], [b], [c], [d]]))
        spec = EffectSpec(basis=(BasisTerm("Z"),),
                          weights=(WeightTerm("Z:x", covariate=0),))
        A = build_weight_matrix(spec, data)
        centered = center_weights(A, data, method="empirical", spec=spec)
        expected = [0.5 * a, 0.5 * b, -0.5 * c, -0.5 * d]
        np.testing.assert_allclose(centered[:, 0], expected, atol=1e-12)

    def test_ols_matches_empirical_when_independent(self):
        # Z independent of X: the per-column regression centering converges
        # to the treatment-mean centering at the root-n rate
        n = 100_000
        rng = np.random.default_rng(77)
        data = Dataset(
            outcome=np.zeros(n, dtype=int),
            treatment=(rng.random(n) < 0.5).astype(float),
            mediator=np.zeros(n),
            covariates=rng.standard_normal((n, 1)),
        )
        spec = EffectSpec(basis=(BasisTerm("Z"),), weights=(WeightTerm("Z"),))
        A = build_weight_matrix(spec, data)
        emp = center_weights(A, data, method="empirical", spec=spec)
        ols = center_weights(A, data, method="ols")
        rms = float(np.sqrt(np.mean((emp - ols) ** 2)))
        assert rms < 5.0 / math.sqrt(n)

    def test_ols_columns_have_zero_mean(self):
        _, data, _ = scenario_draw(rep=3, n=400)
        spec = study_spec()
        A = build_weight_matrix(spec, data)
        centered = center_weights(A, data, method="ols")
        assert np.max(np.abs(centered.mean(axis=0))) < 1e-8

    def test_empirical_plain_z_column_has_zero_mean(self):
        _, data, _ = scenario_draw(rep=4, n=400)
        spec = study_spec()
        A = build_weight_matrix(spec, data)
        centered = center_weights(A, data, method="empirical", spec=spec)
        # exact for the plain-Z column; interaction columns center only in
        # expectation
        assert abs(centered[:, 0].mean()) < 1e-12

    def test_requires_binary_treatment(self):
        data = Dataset(outcome=[1, 2, 3], treatment=[0.0, 1.0, 2.0],
                       mediator=[0.0] * 3, covariates=np.zeros((3, 0)),
                       binary_treatment=False)
        spec = two_point_spec()
        A = build_weight_matrix(spec, data)
        with pytest.raises(NonBinaryTreatment):
            center_weights(A, data, method="empirical", spec=spec)


class TestScore:
    def test_zero_for_constant_outcome_plain_z(self):
        data = Dataset(outcome=[7, 7, 7, 7], treatment=[1.0, 0.0, 1.0, 0.0],
                       mediator=[0.0] * 4, covariates=np.zeros((4, 0)))
        spec = two_point_spec()
        sys = build_score_system(spec, data, centering="empirical")
        value = score(np.zeros(1), sys)
        assert value[0] == pytest.approx(0.0, abs=1e-12)

    def test_two_point_closed_form(self, two_point):
        spec, data = two_point
        sys = build_score_system(spec, data, centering="empirical")
        for theta in (-0.5, 0.0, 0.3, math.log(2.0)):
            expected = -1.0 + 2.0 * math.exp(-theta)
            assert score(np.array([theta]), sys)[0] == pytest.approx(
                expected, abs=1e-12)

    def test_unbiased_at_truth_large_n(self):
        # single large confounded draw: each component / n within 3 MC
        # standard errors of zero
        scenario, data, _ = scenario_draw(rep=0, n=100_000, theta_u=-1.0)
        spec = study_spec()
        sys = build_score_system(spec, data, centering="empirical")
        theta_true = np.array([scenario.theta_z, scenario.theta_m])
        from msmm.core import score_contributions
        contributions = score_contributions(theta_true, sys)
        mean = contributions.mean(axis=0)
        mcse = contributions.std(axis=0, ddof=1) / math.sqrt(data.n)
        assert np.all(np.abs(mean) <= 3.0 * mcse)

    def test_unbiased_at_truth_across_draws(self):
        # moment-condition property over repeated draws of the confounded
        # design with mediator-outcome confounding present
        draws = 500
        n = 1000
        means = np.zeros((draws, 2))
        spec = study_spec()
        for rep in range(draws):
            scenario, data, _ = scenario_draw(rep=rep, n=n, theta_u=-1.0,
                                              base_seed=555)
            sys = build_score_system(spec, data, centering="empirical")
            theta_true = np.array([scenario.theta_z, scenario.theta_m])
            means[rep] = score(theta_true, sys) / n
        grand_mean = means.mean(axis=0)
        mcse = means.std(axis=0, ddof=1) / math.sqrt(draws)
        assert np.all(np.abs(grand_mean) <= 3.0 * mcse)

    def test_overflow_guard(self, two_point):
        spec, data = two_point
        sys = build_score_system(spec, data, centering="empirical")
        with pytest.raises(OverflowGuard):
            score(np.array([1e4]), sys)


class TestScoreJacobian:
    def test_two_point_entry(self, two_point):
        spec, data = two_point
        sys = build_score_system(spec, data, centering="empirical")
        J = score_jacobian(np.array([math.log(2.0)]), sys)
        assert J[0, 0] == pytest.approx(-1.0, abs=1e-12)

    def test_zero_outcome_gives_zero_matrix(self):
        data = Dataset(outcome=[0, 0, 0, 0], treatment=[1.0, 0.0, 1.0, 0.0],
                       mediator=[0.5, -0.5, 1.0, 0.0],
                       covariates=np.zeros((4, 0)))
        spec = EffectSpec(basis=(BasisTerm("M"),), weights=(WeightTerm("Z"),))
        sys = build_score_system(spec, data, centering="empirical")
        J = score_jacobian(np.zeros(1), sys)
        assert np.all(J == 0.0)

    @pytest.mark.parametrize("theta", [
        np.array([0.0, 0.0]),
        np.array([0.1, 0.5]),
        np.array([-0.4, 1.2]),
    ])
    def test_matches_finite_differences(self, theta):
        _, data, _ = scenario_draw(rep=1, n=400, theta_u=-1.0)
        spec = study_spec()
        sys = build_score_system(spec, data, centering="empirical")
        analytic = score_jacobian(theta, sys)
        fd = finite_difference_jacobian(lambda t: score(t, sys), theta,
                                        out_dim=sys.n_weights)
        np.testing.assert_allclose(analytic, fd, rtol=1e-5, atol=1e-7)

    def test_augmented_stacked_matches_finite_differences(self):
        _, data, _ = scenario_draw(rep=2, n=400, theta_u=-1.0)
        spec = study_spec(augmented=True)
        sys = build_score_system(spec, data, centering="empirical")
        params = np.array([0.1, 0.4, 0.2, 0.1])
        theta, beta = params[:2], params[2:]
        analytic = _stacked_jacobian(theta, sys, beta)
        fd = finite_difference_jacobian(
            lambda v: _stacked_score(v[:2], sys, v[2:]), params,
            out_dim=sys.n_weights + sys.n_aug)
        np.testing.assert_allclose(analytic, fd, rtol=1e-5, atol=1e-6)


class TestSolve:
    def test_two_point_closed_form(self, two_point):
        spec, data = two_point
        result = solve(spec, data)
        assert result.theta[0] == pytest.approx(math.log(2.0), abs=1e-10)
        assert result.converged
        assert result.gmm_objective_at_solution < 1e-10

    def test_null_effects_recovered(self):
        # theta = 0 everywhere, no confounding: estimates land near zero
        _, data, _ = scenario_draw(rep=0, n=10_000, theta_x=0.0, theta_z=0.0,
                                   theta_m=0.0, theta_u=0.0, base_seed=321)
        result = solve(study_spec(), data)
        assert np.all(np.abs(result.theta) < 0.05)

    def test_exact_identification_residual(self):
        _, data, _ = scenario_draw(rep=5, n=400, theta_u=-1.0)
        spec = study_spec()
        result = solve(spec, data)
        sys = build_score_system(spec, data, centering="empirical")
        assert np.max(np.abs(score(result.theta, sys))) / data.n < 1e-10

    def test_covariate_shift_equivariance(self):
        # adding a constant to a covariate used only in the weights moves
        # nothing after re-centering
        _, data, _ = scenario_draw(rep=6, n=400, theta_u=-1.0)
        spec = study_spec()
        base = solve(spec, data)
        shifted = Dataset(
            outcome=data.outcome,
            treatment=data.treatment,
            mediator=data.mediator,
            covariates=data.covariates + 7.5,
            covariate_names=data.covariate_names,
        )
        moved = solve(spec, shifted)
        np.testing.assert_allclose(moved.theta, base.theta, atol=1e-8)

    def test_overidentified_gmm(self):
        # three weight terms for two basis terms exercises the least
        # squares branch
        _, data, _ = scenario_draw(rep=7, n=2000, theta_u=-1.0)
        wide = Dataset(
            outcome=data.outcome,
            treatment=data.treatment,
            mediator=data.mediator,
            covariates=np.column_stack([data.covariates,
                                        data.covariates[:, 0] ** 2]),
            covariate_names=("x1", "x2"),
        )
        spec = EffectSpec(
            basis=(BasisTerm("Z"), BasisTerm("M")),
            weights=(WeightTerm("Z"), WeightTerm("Z:x", covariate=0),
                     WeightTerm("Z:x", covariate=1)),
        )
        result = solve(spec, wide)
        assert result.converged
        assert abs(result.theta[1] - 0.5) < 0.2

    def test_augmented_agrees_with_unaugmented(self):
        _, data, _ = scenario_draw(rep=8, n=10_000, theta_u=-1.0)
        plain = solve(study_spec(), data)
        augmented = solve(study_spec(augmented=True), data)
        for k in range(2):
            larger_se = max(plain.std_errors[k], augmented.std_errors[k])
            assert abs(plain.theta[k] - augmented.theta[k]) <= 2.0 * larger_se
        assert augmented.beta is not None
        assert augmented.beta.shape == (2,)

    def test_rejects_non_binary_treatment(self):
        data = Dataset(outcome=[1, 2, 3], treatment=[0.0, 1.0, 2.0],
                       mediator=[0.0] * 3, covariates=np.zeros((3, 0)),
                       binary_treatment=False)
        with pytest.raises(NonBinaryTreatment):
            solve(EffectSpec(basis=(BasisTerm("Z"),),
                             weights=(WeightTerm("Z"),)), data)


class TestIdentification:
    def test_study_design_not_flagged(self):
        _, data, _ = scenario_draw(rep=0, n=400, theta_u=-1.0)
        diagnostics = identification_check(study_spec(), data)
        assert not diagnostics.weakly_identified
        assert diagnostics.min_eigenvalue > 0.05
        assert diagnostics.min_relevance_f > 10.0

    def test_irrelevant_instrument_flagged(self):
        # mediator unrelated to treatment given covariates: no relevance
        _, data, _ = scenario_draw(rep=0, n=400, gamma_zx=0.0, gamma_z=0.0,
                                   theta_u=-1.0)
        diagnostics = identification_check(study_spec(), data)
        assert diagnostics.weakly_identified

    def test_treatment_only_model_trivially_identified(self, two_point):
        spec, _ = two_point
        data = Dataset(outcome=[2, 4, 1, 3], treatment=[0.0, 1.0, 0.0, 1.0],
                       mediator=[0.0] * 4, covariates=np.zeros((4, 0)))
        diagnostics = identification_check(spec, data)
        assert not diagnostics.weakly_identified
        assert math.isinf(diagnostics.min_relevance_f)


class TestControlledEffects:
    def _result_with(self, theta, cov=None):
        from dataclasses import replace

        spec = EffectSpec(basis=(BasisTerm("Z"), BasisTerm("M")),
                          weights=(WeightTerm("Z"), WeightTerm("Z:x", covariate=0)))
        data = Dataset(outcome=[1, 2, 3, 4], treatment=[0.0, 1.0, 0.0, 1.0],
                       mediator=[0.1, 0.2, 0.3, 0.4],
                       covariates=np.array([[0.5], [1.0], [-0.2], [0.3]]))
        result = solve(spec, data)
        changes = {"theta": np.asarray(theta, dtype=float)}
        if cov is not None:
            changes["covariance"] = np.asarray(cov, dtype=float)
        return replace(result, **changes)

    def test_reported_study_rate_ratios(self):
        # point estimates on the familiar applied scale: exp(-0.094) and
        # exp(0.457) round to 0.91 and 1.58
        result = self._result_with([-0.094, 0.457])
        effects = controlled_effects(result, default_contrasts(result.spec, 1))
        assert round(effects[0].rate_ratio, 2) == 0.91
        assert round(effects[1].rate_ratio, 2) == 1.58

    def test_null_estimates_give_unit_rate_ratios(self):
        result = self._result_with([0.0, 0.0])
        effects = controlled_effects(result, default_contrasts(result.spec, 1))
        assert all(e.rate_ratio == pytest.approx(1.0, abs=1e-12) for e in effects)

    def test_two_unit_mediator_contrast(self):
        result = self._result_with([0.0, 0.5])
        x0 = np.zeros(1)
        effects = controlled_effects(result, [
            ("m 2 vs 0", (0.0, 2.0, x0), (0.0, 0.0, x0)),
        ])
        assert effects[0].rate_ratio == pytest.approx(math.e**1.0, rel=1e-12)

    def test_mismatched_covariates_rejected(self):
        result = self._result_with([0.1, 0.2])
        with pytest.raises(ContrastOutsideSpan):
            controlled_effects(result, [
                ((1.0, 0.0, np.array([1.0])), (0.0, 0.0, np.array([2.0]))),
            ])

    def test_delta_method_interval(self):
        cov = np.array([[0.04, 0.0], [0.0, 0.09]])
        result = self._result_with([0.2, 0.5], cov=cov)
        x0 = np.zeros(1)
        effects = controlled_effects(result, [
            ("direct", (1.0, 0.0, x0), (0.0, 0.0, x0)),
        ], level=0.95)
        assert effects[0].std_error == pytest.approx(0.2, abs=1e-12)
        assert effects[0].ci_lower == pytest.approx(0.2 - 1.959963985 * 0.2,
                                                    abs=1e-6)


class TestAugmentedResidual:
    def test_score_subtracts_working_model(self):
        _, data, _ = scenario_draw(rep=20, n=200, theta_u=0.0)
        spec = study_spec(augmented=True)
        sys = build_score_system(spec, data, centering="empirical")
        theta = np.array([0.1, 0.3])
        beta = np.array([0.2, -0.1])
        manual = sys.A_centered.T @ (
            data.outcome * np.exp(-sys.H @ theta)
            - np.exp(sys.augmentation_design @ beta)
        )
        np.testing.assert_allclose(score(theta, sys, beta), manual, atol=1e-12)


class TestResultInvariants:
    def test_interval_brackets_estimate(self):
        _, data, _ = scenario_draw(rep=21, n=400, theta_u=-1.0)
        result = solve(study_spec(), data)
        estimates = np.concatenate([result.theta])
        assert np.all(result.ci_lower[:2] <= estimates)
        assert np.all(estimates <= result.ci_upper[:2])
        assert np.all(result.std_errors >= 0.0)

    def test_rank_deficient_ols_centering(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal(50)
        data = Dataset(
            outcome=rng.integers(0, 5, 50),
            treatment=(rng.random(50) < 0.5).astype(float),
            mediator=rng.standard_normal(50),
            covariates=np.column_stack([x, 2.0 * x]),
        )
        spec = EffectSpec(basis=(BasisTerm("Z"),), weights=(WeightTerm("Z"),))
        A = build_weight_matrix(spec, data)
        from msmm.exceptions import RankDeficientDesign

        with pytest.raises(RankDeficientDesign):
            center_weights(A, data, method="ols")
