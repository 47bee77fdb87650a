"""Scikit-learn style wrappers around the fitting routines.

These classes follow the fit / predict / get_params conventions so the
estimators compose with pipelines, grid search and cloning. The underlying
functional API lives in :mod:`msmm.core` and :mod:`msmm.glm`.
"""

import numpy as np
from sklearn.base import BaseEstimator

from .core import controlled_effects, default_contrasts, solve
from .data import AugmentationSpec, EffectSpec, parse_basis, parse_weights
from .exceptions import MsmmError
from .glm import fit_negbin, fit_ols, fit_poisson_irls, fit_quasipoisson
from .inference import bootstrap
from .validation import as_float_matrix


class MsmmEstimator(BaseEstimator):
    """Structural mean model estimator with a fit(data) interface.

    Parameters
    ----------
    basis : str
        Comma-separated basis terms, e.g. ``"Z,M"`` or ``"Z,M,Z:x1"``.
    weights : str
        Comma-separated weight terms, e.g. ``"Z,Z:x1"``. Must provide at
        least as many terms as the basis.
    centering : str
        ``"empirical"`` (default), ``"ols"``, or ``"known-p"``.
    treatment_probability : float or None
        Randomization probability for ``"known-p"`` centering.
    augment : str or None
        Comma-separated covariate names for the efficiency working model
        (an intercept is always included).
    level : float
        Confidence level for the reported intervals.
    n_bootstrap : int or None
        When set, replaces sandwich standard errors with bootstrap ones.
    seed : int
        Base seed for the bootstrap streams.
    """

    def __init__(self, basis="Z,M", weights="Z,Z:x1", centering="empirical",
                 treatment_probability=None, augment=None, level=0.95,
                 n_bootstrap=None, seed=20240401):
        self.basis = basis
        self.weights = weights
        self.centering = centering
        self.treatment_probability = treatment_probability
        self.augment = augment
        self.level = level
        self.n_bootstrap = n_bootstrap
        self.seed = seed

    def _build_spec(self, data):
        basis = parse_basis(self.basis, data.covariate_names)
        weights = parse_weights(self.weights, data.covariate_names)
        augmentation = None
        if self.augment:
            indices = tuple(
                data.covariate_index(name.strip())
                for name in self.augment.split(",") if name.strip()
            )
            augmentation = AugmentationSpec(covariates=indices, intercept=True)
        return EffectSpec(basis=basis, weights=weights, augmentation=augmentation)

    def fit(self, data, y=None):
        """Estimate the effects; ``y`` is ignored (the Dataset carries it)."""
        spec = self._build_spec(data)
        result = solve(
            spec, data, centering=self.centering,
            p=self.treatment_probability, level=self.level,
        )
        self.result_ = result
        self.spec_ = spec
        self.theta_ = result.theta
        self.std_errors_ = result.std_errors[:result.n_basis]
        self.param_names_ = result.param_names
        self.n_features_in_ = data.p
        if self.n_bootstrap is not None:
            self.bootstrap_ = bootstrap(
                spec, data, B=self.n_bootstrap, seed=self.seed,
                level=self.level, centering=self.centering,
                p=self.treatment_probability,
            )
        return self

    def effects(self, contrasts=None):
        """Controlled effect table; defaults to the direct and per-unit
        mediator contrasts at covariates fixed to zero."""
        self._check_fitted()
        if contrasts is None:
            contrasts = default_contrasts(self.spec_, self.n_features_in_)
        return controlled_effects(self.result_, contrasts)

    def _check_fitted(self):
        if not hasattr(self, "result_"):
            raise MsmmError("estimator is not fitted; call fit(data) first")


class CountRegression(BaseEstimator):
    """GLM count regression with fit(X, y) / predict(X) semantics.

    ``family`` is one of ``"poisson"``, ``"quasipoisson"``, ``"negbin"``.
    An intercept column is prepended unless ``add_intercept`` is False.
    """

    def __init__(self, family="poisson", add_intercept=True):
        self.family = family
        self.add_intercept = add_intercept

    def _design(self, X):
        X = as_float_matrix(X, "X")
        if self.add_intercept:
            X = np.column_stack([np.ones(X.shape[0]), X])
        return X

    def fit(self, X, y):
        design = self._design(X)
        if self.family == "poisson":
            fit = fit_poisson_irls(design, y)
        elif self.family == "quasipoisson":
            fit = fit_quasipoisson(design, y)
        elif self.family == "negbin":
            fit = fit_negbin(design, y)
        else:
            raise MsmmError(f"unknown family {self.family!r}")
        self.fit_ = fit
        self.coef_ = fit.coefficients
        self.covariance_ = fit.covariance
        self.dispersion_ = fit.dispersion
        self.nb_size_ = fit.nb_size
        self.n_features_in_ = design.shape[1] - int(self.add_intercept)
        return self

    def predict(self, X):
        """Expected counts exp(design @ coef)."""
        if not hasattr(self, "coef_"):
            raise MsmmError("estimator is not fitted; call fit(X, y) first")
        return np.exp(self._design(X) @ self.coef_)


class LinearRegression(BaseEstimator):
    """Least squares helper with the same conventions."""

    def __init__(self, add_intercept=True):
        self.add_intercept = add_intercept

    def _design(self, X):
        X = as_float_matrix(X, "X")
        if self.add_intercept:
            X = np.column_stack([np.ones(X.shape[0]), X])
        return X

    def fit(self, X, y):
        fit = fit_ols(self._design(X), y)
        self.coef_ = fit.coefficients
        self.residual_variance_ = fit.residual_variance
        return self

    def predict(self, X):
        if not hasattr(self, "coef_"):
            raise MsmmError("estimator is not fitted; call fit(X, y) first")
        return self._design(X) @ self.coef_
