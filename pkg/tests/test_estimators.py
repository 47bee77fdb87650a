import math

import numpy as np
import pytest
from sklearn.base import clone

from conftest import scenario_draw
from msmm.estimators import CountRegression, LinearRegression, MsmmEstimator
from msmm.exceptions import MsmmError


class TestMsmmEstimator:
    def test_fit_exposes_sklearn_attributes(self):
        _, data, _ = scenario_draw(rep=0, n=800, theta_u=-1.0)
        est = MsmmEstimator(basis="Z,M", weights="Z,Z:x1").fit(data)
        assert est.theta_.shape == (2,)
        assert est.std_errors_.shape == (2,)
        assert est.result_.converged
        assert est.n_features_in_ == 1

    def test_get_params_round_trip(self):
        est = MsmmEstimator(weights="Z,Z:x1", level=0.9, seed=7)
        params = est.get_params()
        assert params["weights"] == "Z,Z:x1"
        assert params["level"] == 0.9
        rebuilt = MsmmEstimator(**params)
        assert rebuilt.get_params() == params

    def test_clone_preserves_params(self):
        est = MsmmEstimator(augment="x1", centering="ols")
        copy = clone(est)
        assert copy.get_params() == est.get_params()

    def test_effects_default_contrasts(self):
        _, data, _ = scenario_draw(rep=1, n=800, theta_u=-1.0)
        est = MsmmEstimator().fit(data)
        effects = est.effects()
        assert [e.label for e in effects] == ["Direct Effect", "Mediator Effect"]
        assert effects[1].rate_ratio == pytest.approx(math.exp(est.theta_[1]),
                                                      rel=1e-12)

    def test_unfitted_raises(self):
        with pytest.raises(MsmmError):
            MsmmEstimator().effects()

    def test_augmented_fit(self):
        _, data, _ = scenario_draw(rep=2, n=800, theta_u=-1.0)
        est = MsmmEstimator(augment="x1").fit(data)
        assert est.result_.beta is not None
        assert len(est.param_names_) == 4

    def test_bootstrap_variant(self):
        _, data, _ = scenario_draw(rep=3, n=400, theta_u=0.0)
        est = MsmmEstimator(n_bootstrap=50, seed=5).fit(data)
        assert est.bootstrap_.replicate_estimates.shape == (50, 2)


class TestCountRegression:
    def test_poisson_fit_and_predict(self):
        rng = np.random.default_rng(41)
        X = rng.standard_normal((500, 2))
        y = rng.poisson(np.exp(0.3 + 0.5 * X[:, 0] - 0.2 * X[:, 1]))
        model = CountRegression(family="poisson").fit(X, y)
        np.testing.assert_allclose(model.coef_, [0.3, 0.5, -0.2], atol=0.15)
        predictions = model.predict(X)
        assert predictions.shape == (500,)
        assert np.all(predictions > 0)

    def test_quasipoisson_dispersion_attribute(self):
        rng = np.random.default_rng(42)
        X = rng.standard_normal((500, 1))
        y = rng.negative_binomial(2, 2.0 / (2.0 + np.exp(1.0 + 0.3 * X[:, 0])))
        model = CountRegression(family="quasipoisson").fit(X, y)
        assert model.dispersion_ > 1.5

    def test_negbin_size_attribute(self):
        rng = np.random.default_rng(43)
        X = rng.standard_normal((2000, 1))
        y = rng.negative_binomial(2, 2.0 / (2.0 + np.exp(1.0 + 0.3 * X[:, 0])))
        model = CountRegression(family="negbin").fit(X, y)
        assert model.nb_size_ == pytest.approx(2.0, abs=0.6)

    def test_unknown_family(self):
        with pytest.raises(MsmmError):
            CountRegression(family="gamma").fit(np.ones((10, 1)),
                                                np.ones(10, dtype=int))

    def test_clone(self):
        model = CountRegression(family="negbin", add_intercept=False)
        assert clone(model).get_params() == model.get_params()


class TestLinearRegression:
    def test_exact_line(self):
        X = np.array([[0.0], [1.0], [2.0]])
        model = LinearRegression().fit(X, [1.0, 3.0, 5.0])
        np.testing.assert_allclose(model.coef_, [1.0, 2.0], atol=1e-12)
        np.testing.assert_allclose(model.predict(X), [1.0, 3.0, 5.0],
                                   atol=1e-12)
