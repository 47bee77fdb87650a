"""Variance estimation and estimator comparison.

Provides the robust sandwich variance for the moment estimator, a
nonparametric bootstrap with deterministic per-replicate random streams,
and the side-by-side report against a quasi-Poisson regression fit with
the same adjustment covariates.
"""

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .core import score_contributions, solve, _stacked_jacobian
from .data import Dataset
from .exceptions import MsmmError, SingularBread, TooManyRefitFailures
from .glm import fit_quasipoisson

_COND_LIMIT = 1e12


def normal_quantile(p):
    """Inverse standard normal CDF (Wichura's AS 241, PPND16).

    Accurate to well below 1e-10 over (0, 1); no table lookups.
    """
    if not 0.0 < p < 1.0:
        raise ValueError("p must be in (0, 1)")
    q = p - 0.5
    if abs(q) <= 0.425:
        r = 0.180625 - q * q
        num = (((((((2.5090809287301226727e3 * r + 3.3430575583588128105e4) * r
                    + 6.7265770927008700853e4) * r + 4.5921953931549871457e4) * r
                  + 1.3731693765509461125e4) * r + 1.9715909503065514427e3) * r
                + 1.3314166789178437745e2) * r + 3.3871328727963666080e0) * q
        den = (((((((5.2264952788528545610e3 * r + 2.8729085735721942674e4) * r
                    + 3.9307895800092710610e4) * r + 2.1213794301586595867e4) * r
                  + 5.3941960214247511077e3) * r + 6.8718700749205790830e2) * r
                + 4.2313330701600911252e1) * r + 1.0)
        return num / den
    r = p if q < 0 else 1.0 - p
    r = math.sqrt(-math.log(r))
    if r <= 5.0:
        r -= 1.6
        num = (((((((7.74545014278341407640e-4 * r + 2.27238449892691845833e-2) * r
                    + 2.41780725177450611770e-1) * r + 1.27045825245236838258e0) * r
                  + 3.64784832476320460504e0) * r + 5.76949722146069140550e0) * r
                + 4.63033784615654529590e0) * r + 1.42343711074968357734e0)
        den = (((((((1.05075007164441684324e-9 * r + 5.47593808499534494600e-4) * r
                    + 1.51986665636164571966e-2) * r + 1.48103976427480074590e-1) * r
                  + 6.89767334985100004550e-1) * r + 1.67638483018380384940e0) * r
                + 2.05319162663775882187e0) * r + 1.0)
    else:
        r -= 5.0
        num = (((((((2.01033439929228813265e-7 * r + 2.71155556874348757815e-5) * r
                    + 1.24266094738807843860e-3) * r + 2.65321895265761230930e-2) * r
                  + 2.96560571828504891230e-1) * r + 1.78482653991729133580e0) * r
                + 5.46378491116411436990e0) * r + 6.65790464350110377720e0)
        den = (((((((2.04426310338993978564e-15 * r + 1.42151175831644588870e-7) * r
                    + 1.84631831751005468180e-5) * r + 7.86869131145613259100e-4) * r
                  + 1.48753612908506148525e-2) * r + 1.36929880922735805310e-1) * r
                + 5.99832206555887937690e-1) * r + 1.0)
    value = num / den
    return -value if q < 0 else value


@dataclass(frozen=True)
class SandwichParts:
    """Bread, meat and the resulting parameter covariance.

    ``bread`` maps mean moments to parameters (the inverse mean score
    derivative, or its least squares analog when over-identified);
    ``meat`` is the empirical second moment of the per-observation scores;
    ``variance`` is bread @ meat @ bread' / n, the covariance of the
    parameter estimates themselves.
    """

    bread: np.ndarray
    meat: np.ndarray
    variance: np.ndarray


def sandwich_variance(sys, theta, beta=None):
    """Robust covariance of the moment estimates at the solution.

    Uses the empirical mean score derivative J and per-observation score
    outer products: variance = B (S S'/n) B' / n with B = J^{-1} for square
    systems and B = (J'J)^{-1} J' for over-identified ones.
    """
    n = sys.n
    contributions = score_contributions(theta, sys, beta)
    meat = contributions.T @ contributions / n
    J = _stacked_jacobian(theta, sys, beta) / n
    singular_values = np.linalg.svd(J, compute_uv=False)
    if singular_values[-1] <= 0 or not np.all(np.isfinite(singular_values)):
        raise SingularBread(math.inf)
    condition = float(singular_values[0] / singular_values[-1])
    if condition > _COND_LIMIT:
        raise SingularBread(condition)
    if J.shape[0] == J.shape[1]:
        bread = np.linalg.inv(J)
    else:
        bread = np.linalg.solve(J.T @ J, J.T)
    variance = bread @ meat @ bread.T / n
    variance = (variance + variance.T) / 2.0
    return SandwichParts(bread=bread, meat=meat, variance=variance)


def _worker_count(n_workers=None):
    if n_workers is not None:
        return max(1, int(n_workers))
    env = os.environ.get("MSMM_THREADS", "")
    try:
        return max(1, int(env)) if env else 1
    except ValueError:
        return 1


def _resample_indices(rng, data, stratified):
    n = data.n
    if not stratified:
        return rng.integers(0, n, size=n)
    indices = np.empty(n, dtype=np.int64)
    position = 0
    for arm in (0.0, 1.0):
        members = np.flatnonzero(data.treatment == arm)
        take = rng.integers(0, members.size, size=members.size)
        indices[position:position + members.size] = members[take]
        position += members.size
    return indices


def _subset(data, indices):
    return Dataset(
        outcome=data.outcome[indices],
        treatment=data.treatment[indices],
        mediator=data.mediator[indices],
        covariates=data.covariates[indices],
        covariate_names=data.covariate_names,
        binary_treatment=data.binary_treatment,
    )


@dataclass(frozen=True)
class BootstrapRun:
    """Replicate estimates and the intervals derived from them.

    Failed refits are recorded as NaN rows, counted, and excluded from the
    standard errors and quantiles.
    """

    B: int
    seed: int
    replicate_estimates: np.ndarray
    failures: int
    se: np.ndarray
    ci_percentile: np.ndarray
    ci_normal: np.ndarray
    level: float
    theta: np.ndarray


def bootstrap(spec, data, B=500, seed=20240401, level=0.95,
              centering="empirical", p=None, stratified=False, n_workers=None):
    """Nonparametric bootstrap of the moment estimator.

    Resamples rows jointly with replacement (optionally within treatment
    arm), re-estimates from scratch on every replicate (including weight
    re-centering), and returns both percentile and normal-approximation
    intervals. Replicate b draws from a stream seeded by (seed, b), so the
    result is identical however the replicates are scheduled.
    """
    if B < 50:
        raise MsmmError(f"need at least 50 bootstrap replicates, got {B}")
    point = solve(spec, data, centering=centering, p=p, level=level)
    K = point.theta.shape[0]

    def one_replicate(b):
        rng = np.random.default_rng([seed, b])
        indices = _resample_indices(rng, data, stratified)
        try:
            refit = solve(
                spec, _subset(data, indices), centering=centering, p=p,
                level=level,
            )
        except MsmmError:
            return np.full(K, np.nan)
        return refit.theta

    workers = _worker_count(n_workers)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            estimates = list(pool.map(one_replicate, range(B)))
    else:
        estimates = [one_replicate(b) for b in range(B)]
    estimates = np.vstack(estimates)

    ok = ~np.isnan(estimates[:, 0])
    failures = int(B - ok.sum())
    if failures > 0.1 * B:
        raise TooManyRefitFailures(failures, B)
    good = estimates[ok]
    se = good.std(axis=0, ddof=1)
    alpha = 1.0 - level
    ci_percentile = np.column_stack([
        np.quantile(good, alpha / 2.0, axis=0),
        np.quantile(good, 1.0 - alpha / 2.0, axis=0),
    ])
    z = normal_quantile(0.5 + level / 2.0)
    ci_normal = np.column_stack([point.theta - z * se, point.theta + z * se])
    return BootstrapRun(
        B=B,
        seed=seed,
        replicate_estimates=estimates,
        failures=failures,
        se=se,
        ci_percentile=ci_percentile,
        ci_normal=ci_normal,
        level=level,
        theta=point.theta,
    )


@dataclass(frozen=True)
class ComparisonRow:
    effect: str
    method: str
    rate_ratio: float
    ci_lower: float
    ci_upper: float


def compare_report(spec, data, level=0.95, centering="empirical", p=None,
                   proposed_ci="sandwich", B=500, seed=20240401):
    """Four-row comparison of the moment estimator against quasi-Poisson.

    Rows are direct effect (the Z basis coefficient) and mediator effect
    (the M basis coefficient) for the proposed estimator and for a
    quasi-Poisson regression of the outcome on (1, Z, M, X) with the same
    adjustment covariates. Proposed intervals come from the sandwich by
    default or from bootstrap percentiles when requested; both are
    reported as rate ratios.
    """
    labels = [t.kind for t in spec.basis]
    if "Z" not in labels or "M" not in labels:
        raise MsmmError(
            "the comparison table needs plain Z and M terms in the basis"
        )
    z_index = labels.index("Z")
    m_index = labels.index("M")

    result = solve(spec, data, centering=centering, p=p, level=level)
    if proposed_ci == "bootstrap":
        run = bootstrap(spec, data, B=B, seed=seed, level=level,
                        centering=centering, p=p)
        proposed = {
            "Direct Effect": (result.theta[z_index], run.ci_percentile[z_index]),
            "Mediator Effect": (result.theta[m_index], run.ci_percentile[m_index]),
        }
    else:
        proposed = {
            "Direct Effect": (
                result.theta[z_index],
                (result.ci_lower[z_index], result.ci_upper[z_index]),
            ),
            "Mediator Effect": (
                result.theta[m_index],
                (result.ci_lower[m_index], result.ci_upper[m_index]),
            ),
        }

    design = np.column_stack([
        np.ones(data.n), data.treatment, data.mediator, data.covariates,
    ])
    glm = fit_quasipoisson(design, data.outcome)
    z = normal_quantile(0.5 + level / 2.0)
    traditional = {}
    for effect, column in (("Direct Effect", 1), ("Mediator Effect", 2)):
        estimate = glm.coefficients[column]
        se = glm.std_errors[column]
        traditional[effect] = (estimate, (estimate - z * se, estimate + z * se))

    rows = []
    for effect in ("Direct Effect", "Mediator Effect"):
        for method, table in (("Proposed", proposed), ("Traditional", traditional)):
            estimate, (lo, hi) = table[effect]
            rows.append(ComparisonRow(
                effect=effect,
                method=method,
                rate_ratio=math.exp(estimate),
                ci_lower=math.exp(lo),
                ci_upper=math.exp(hi),
            ))
    return rows
