"""Count-regression baselines: Poisson, quasi-Poisson, negative binomial, OLS.

These are the traditional comparators fit by iteratively reweighted least
squares with a log link, plus the ordinary least squares helper used for
nuisance regressions. The negative binomial uses the mean/size
parameterization Var(Y) = mu + mu^2 / size.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import digamma, gammaln, polygamma

from .exceptions import NoConvergence, RankDeficientDesign, SeparationSuspected
from .validation import as_count_vector, as_float_matrix, as_float_vector, check_full_rank

_MAX_ITER = 100
_ETA_LIMIT = 700.0  # exp() overflow boundary for doubles
_SCORE_TOL = 1e-10
_DEVIANCE_RTOL = 1e-12


@dataclass(frozen=True)
class GlmFit:
    """Fitted generalized linear model on the log-rate-ratio scale.

    ``dispersion`` is exactly 1.0 for plain Poisson; ``nb_size`` is only
    set for the negative binomial family (math.inf marks collapse to the
    Poisson boundary).
    """

    coefficients: np.ndarray
    covariance: np.ndarray
    dispersion: float
    family: str
    converged: bool
    iterations: int
    nb_size: float = None
    deviance: float = None

    @property
    def std_errors(self):
        return np.sqrt(np.diag(self.covariance))


@dataclass(frozen=True)
class OlsFit:
    coefficients: np.ndarray
    residual_variance: float


def fit_ols(design, response):
    """Least squares via SVD with a rank check.

    Returns the coefficient vector and the residual variance RSS/(n - K).
    """
    design = check_full_rank(design, "design")
    response = as_float_vector(response, "response")
    if response.shape[0] != design.shape[0]:
        raise ValueError("design and response row counts differ")
    coef, _, rank, _ = np.linalg.lstsq(design, response, rcond=None)
    if rank < design.shape[1]:
        raise RankDeficientDesign(f"design has rank {rank} < {design.shape[1]}")
    resid = response - design @ coef
    df = design.shape[0] - design.shape[1]
    residual_variance = float(resid @ resid / df) if df > 0 else 0.0
    return OlsFit(coefficients=coef, residual_variance=residual_variance)


def _starting_coefficients(design, y):
    # zero start, except log(mean + 0.5) on any all-ones intercept column
    beta = np.zeros(design.shape[1])
    ones = np.all(design == 1.0, axis=0)
    if ones.any():
        beta[np.argmax(ones)] = math.log(y.mean() + 0.5)
    return beta


def _poisson_deviance(y, mu):
    with np.errstate(divide="ignore", invalid="ignore"):
        term = np.where(y > 0, y * np.log(y / mu), 0.0)
    return float(2.0 * np.sum(term - (y - mu)))


def _irls(design, y, variance, merit, start, max_iter=_MAX_ITER):
    """Log-link IRLS with step-halving whenever the merit rises.

    ``variance`` maps mu to Var(Y | x) and determines the quasi-score
    X' ((y - mu) mu / Var); ``merit`` maps (y, mu) to the quantity being
    minimized (Poisson deviance, or a negative log-likelihood).
    """
    beta = start.copy()
    eta = design @ beta
    if np.max(np.abs(eta)) > _ETA_LIMIT:
        raise SeparationSuspected("starting linear predictor overflows exp()")
    mu = np.exp(eta)
    deviance = merit(y, mu)

    def quasi_score(mu_now):
        return design.T @ ((y - mu_now) * mu_now / variance(mu_now))

    converged = False
    iterations = 0
    for iterations in range(1, max_iter + 1):
        var = variance(mu)
        w = mu * mu / var
        z = eta + (y - mu) / mu
        sw = np.sqrt(w)
        try:
            step_target, _, rank, _ = np.linalg.lstsq(
                design * sw[:, None], z * sw, rcond=None
            )
        except np.linalg.LinAlgError:
            raise RankDeficientDesign("weighted least squares step failed") from None
        if rank < design.shape[1]:
            raise RankDeficientDesign(
                f"weighted design has rank {rank} < {design.shape[1]}"
            )

        direction = step_target - beta
        # inside the convergence region the deviance improvement drops
        # below summation noise; take tiny steps without a merit test
        tiny_step = np.max(np.abs(direction)) <= 1e-8 * (1.0 + np.max(np.abs(beta)))
        alpha = 1.0
        accepted = False
        for _ in range(11):
            candidate = beta + alpha * direction
            eta_new = design @ candidate
            if np.max(np.abs(eta_new)) <= _ETA_LIMIT:
                mu_new = np.exp(eta_new)
                dev_new = merit(y, mu_new)
                if tiny_step or dev_new <= deviance + 1e-12:
                    accepted = True
                    break
            alpha *= 0.5
        if not accepted:
            if np.max(np.abs(design @ step_target)) > _ETA_LIMIT:
                raise SeparationSuspected(
                    "fitted rates overflow even after step-halving"
                )
            break

        dev_change = abs(deviance - dev_new)
        beta, eta, mu, deviance = candidate, eta_new, mu_new, dev_new
        score_now = np.max(np.abs(quasi_score(mu)))
        if score_now < _SCORE_TOL:
            converged = True
            break
        if (dev_change < _DEVIANCE_RTOL * (abs(deviance) + _DEVIANCE_RTOL)
                and score_now < 1e-8):
            converged = True
            break

    if not converged and np.max(np.abs(quasi_score(mu))) < 1e-8:
        converged = True
    if not converged:
        raise NoConvergence(
            f"IRLS did not converge in {max_iter} iterations "
            f"(max |score| = {np.max(np.abs(quasi_score(mu))):.3e})"
        )
    return beta, mu, deviance, iterations


def _prepare(design, outcome):
    design = check_full_rank(design, "design")
    y = as_count_vector(outcome).astype(np.float64)
    if y.shape[0] != design.shape[0]:
        raise ValueError("design and outcome row counts differ")
    if design.shape[0] <= design.shape[1]:
        raise RankDeficientDesign(
            f"need more observations ({design.shape[0]}) than columns "
            f"({design.shape[1]})"
        )
    return design, y


def fit_poisson_irls(design, outcome, max_iter=_MAX_ITER):
    """Maximum-likelihood Poisson regression with log link.

    Covariance is the inverse Fisher information at the solution.
    """
    design, y = _prepare(design, outcome)
    beta, mu, deviance, iterations = _irls(
        design, y, lambda m: m, _poisson_deviance,
        _starting_coefficients(design, y), max_iter,
    )
    info = design.T @ (design * mu[:, None])
    covariance = np.linalg.inv(info)
    return GlmFit(
        coefficients=beta,
        covariance=covariance,
        dispersion=1.0,
        family="poisson",
        converged=True,
        iterations=iterations,
        deviance=deviance,
    )


def fit_quasipoisson(design, outcome, max_iter=_MAX_ITER):
    """Poisson point estimates with Pearson-dispersion-scaled covariance."""
    base = fit_poisson_irls(design, outcome, max_iter)
    design = as_float_matrix(design)
    y = as_count_vector(outcome).astype(np.float64)
    mu = np.exp(design @ base.coefficients)
    pearson = float(np.sum((y - mu) ** 2 / mu))
    df = design.shape[0] - design.shape[1]
    dispersion = pearson / df
    return GlmFit(
        coefficients=base.coefficients,
        covariance=dispersion * base.covariance,
        dispersion=dispersion,
        family="quasipoisson",
        converged=base.converged,
        iterations=base.iterations,
        deviance=base.deviance,
    )


def negbin_loglik(y, mu, size):
    """Negative binomial log-likelihood with Var(Y) = mu + mu^2 / size."""
    y = np.asarray(y, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    if math.isinf(size):
        return float(np.sum(y * np.log(mu) - mu - gammaln(y + 1.0)))
    return float(np.sum(
        gammaln(y + size) - gammaln(size) - gammaln(y + 1.0)
        + size * np.log(size / (size + mu)) + y * np.log(mu / (size + mu))
    ))


def _size_score(y, mu, size):
    # d loglik / d size
    return float(np.sum(
        digamma(y + size) - digamma(size)
        + np.log(size / (size + mu)) + 1.0 - (y + size) / (size + mu)
    ))


def _size_curvature(y, mu, size):
    # d^2 loglik / d size^2
    return float(np.sum(
        polygamma(1, y + size) - polygamma(1, size)
        + 1.0 / size - 1.0 / (size + mu) + (y - mu) / (size + mu) ** 2
    ))


def _profile_size(y, mu, size):
    """Safeguarded Newton on log(size); returns (size, converged)."""
    phi = math.log(size)
    for _ in range(50):
        s = math.exp(phi)
        g = _size_score(y, mu, s)
        h = _size_curvature(y, mu, s)
        # chain rule to phi = log(size)
        g_phi = s * g
        h_phi = s * s * h + s * g
        if h_phi >= 0:  # not locally concave; fall back to a damped gradient step
            step = math.copysign(min(1.0, abs(g_phi)), g_phi)
        else:
            step = -g_phi / h_phi
        step = max(-5.0, min(5.0, step))
        ll_old = negbin_loglik(y, mu, s)
        alpha = 1.0
        for _ in range(20):
            candidate = phi + alpha * step
            if candidate > 30.0:  # size beyond 1e13: Poisson boundary
                return math.inf, True
            if negbin_loglik(y, mu, math.exp(candidate)) >= ll_old - 1e-12:
                break
            alpha *= 0.5
        new_phi = phi + alpha * step
        done = abs(new_phi - phi) < 1e-10
        phi = new_phi
        if done:
            return math.exp(phi), True
    return math.exp(phi), False


def fit_negbin(design, outcome, max_iter=_MAX_ITER):
    """Negative binomial regression by alternating maximization.

    Alternates (a) IRLS for the coefficients under the NB variance at the
    current size with (b) a Newton update of the profile likelihood in
    log(size), until the size is relatively stable to 1e-8. Underdispersed
    data collapse to the Poisson boundary, reported as ``nb_size = inf``
    with Poisson-equal coefficients rather than an error.
    """
    design, y = _prepare(design, outcome)
    poisson = fit_poisson_irls(design, outcome, max_iter)
    mu = np.exp(design @ poisson.coefficients)

    # boundary check: the score of 1/size at the Poisson fit is
    # sum((y - mu)^2 - y)/2; non-positive means no overdispersion signal
    if float(np.sum((y - mu) ** 2 - y)) <= 0.0:
        return GlmFit(
            coefficients=poisson.coefficients,
            covariance=poisson.covariance,
            dispersion=1.0,
            family="negbin",
            converged=True,
            iterations=poisson.iterations,
            nb_size=math.inf,
            deviance=poisson.deviance,
        )

    excess = float(np.sum((y - mu) ** 2 - mu) / np.sum(mu**2))
    size = 1.0 / excess if excess > 1e-8 else 1e8
    beta = poisson.coefficients.copy()

    converged = False
    total_iterations = poisson.iterations
    for _ in range(max_iter):
        beta, mu, _, inner_iter = _irls(
            design, y,
            lambda m, s=size: m + m * m / s,
            lambda yy, m, s=size: -negbin_loglik(yy, np.maximum(m, 1e-300), s),
            beta, max_iter,
        )
        total_iterations += inner_iter
        new_size, size_ok = _profile_size(y, mu, size)
        if math.isinf(new_size):
            return GlmFit(
                coefficients=poisson.coefficients,
                covariance=poisson.covariance,
                dispersion=1.0,
                family="negbin",
                converged=True,
                iterations=total_iterations,
                nb_size=math.inf,
                deviance=poisson.deviance,
            )
        rel_change = abs(new_size - size) / (abs(size) + 1e-12)
        size = new_size
        if size_ok and rel_change < 1e-8:
            converged = True
            break
    if not converged:
        raise NoConvergence(
            f"negative binomial alternation did not converge in {max_iter} rounds"
        )

    var = mu + mu * mu / size
    w = mu * mu / var
    info = design.T @ (design * w[:, None])
    covariance = np.linalg.inv(info)
    return GlmFit(
        coefficients=beta,
        covariance=covariance,
        dispersion=1.0,
        family="negbin",
        converged=True,
        iterations=total_iterations,
        nb_size=size,
        deviance=None,
    )
