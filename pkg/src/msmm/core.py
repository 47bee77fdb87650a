"""Multiplicative structural mean model estimator for count outcomes.

The estimator solves moment conditions of the form

    sum_i  A~_i * Y_i * exp(-theta' H_i) = 0,

where H_i stacks the basis terms h_k(Z_i, M_i, X_i) and A~_i is a vector of
weight functions of (Z_i, X_i) centered at their conditional mean given
X_i. Centering makes the equations mean-zero at the true parameters under
treatment ignorability alone, so the fitted effects are robust to
unmeasured mediator-outcome confounding.

With as many weights as basis terms the system is solved exactly by a
damped Newton iteration; with more weights than basis terms the estimator
minimizes the squared norm of the moment vector (identity-weighted GMM)
via Levenberg-Marquardt. An optional working model exp(x' beta) for the
covariate effect can be stacked on for efficiency without affecting
consistency.
"""

import math
from dataclasses import dataclass

import numpy as np

from .data import (
    EffectSpec,
    build_basis_matrix,
    build_weight_matrix,
    weight_factor_matrix,
)
from .exceptions import (
    ContrastOutsideSpan,
    MsmmError,
    NoConvergence,
    NonBinaryTreatment,
    OverflowGuard,
    RankDeficientDesign,
)
from .validation import is_binary_treatment

_ETA_LIMIT = 700.0
_NEWTON_TOL = 1e-10   # on max |score| / n for exactly identified systems
_LM_GRAD_TOL = 1e-8   # on the gradient of the mean-score GMM objective
_MAX_ITER = 60

CENTERING_METHODS = ("known-p", "empirical", "ols")


def center_weights(A, data, method="empirical", spec=None, p=None):
    """Subtract an estimate of E(A | X) from each weight column.

    Methods
    -------
    ``"known-p"``
        Uses a known randomization probability ``p``: a column z * f(x)
        becomes (z - p) * f(x). Binary treatment only.
    ``"empirical"``
        Same, with ``p`` replaced by the sample mean of the treatment.
    ``"ols"``
        Subtracts the fitted values of a per-column least squares
        regression of A on (1, X); intended for observational designs.

    The multiplicative methods need the term definitions to recover f(x),
    so ``spec`` is required for them.
    """
    A = np.asarray(A, dtype=np.float64)
    if method in ("known-p", "empirical"):
        if not is_binary_treatment(data.treatment):
            raise NonBinaryTreatment(
                f"centering method {method!r} requires a two-arm 0/1 treatment"
            )
        if spec is None:
            raise MsmmError(f"centering method {method!r} requires the effect spec")
        if method == "known-p":
            if p is None or not 0.0 < p < 1.0:
                raise MsmmError("known-p centering requires p in (0, 1)")
            prob = float(p)
        else:
            prob = float(data.treatment.mean())
        # E(A | X) = p * f(X) for every column z * f(x) in the vocabulary
        factors = weight_factor_matrix(spec, data)
        return A - prob * factors
    if method == "ols":
        design = np.column_stack([np.ones(data.n), data.covariates])
        coef, _, rank, _ = np.linalg.lstsq(design, A, rcond=None)
        if rank < design.shape[1]:
            raise RankDeficientDesign(
                "covariate design for weight centering is rank deficient"
            )
        return A - design @ coef
    raise MsmmError(f"unknown centering method {method!r}; "
                    f"expected one of {CENTERING_METHODS}")


@dataclass(frozen=True)
class ScoreSystem:
    """Everything the moment conditions need, precomputed per dataset.

    ``A_centered`` already has the conditional-mean adjustment applied;
    ``augmentation_design`` is the working-model design (or None).
    """

    H: np.ndarray
    A_centered: np.ndarray
    outcome: np.ndarray
    augmentation_design: np.ndarray = None
    centering_method: str = "empirical"

    def __post_init__(self):
        if self.A_centered.shape[1] < self.H.shape[1]:
            raise MsmmError("fewer weight columns than basis columns")

    @property
    def n(self):
        return self.H.shape[0]

    @property
    def n_basis(self):
        return self.H.shape[1]

    @property
    def n_weights(self):
        return self.A_centered.shape[1]

    @property
    def n_aug(self):
        return 0 if self.augmentation_design is None else self.augmentation_design.shape[1]


def build_score_system(spec, data, centering="empirical", p=None):
    """Assemble the basis matrix, centered weights and augmentation design."""
    H = build_basis_matrix(spec, data)
    A = build_weight_matrix(spec, data)
    A_centered = center_weights(A, data, method=centering, spec=spec, p=p)
    aug = spec.augmentation.design(data) if spec.augmentation is not None else None
    return ScoreSystem(
        H=H,
        A_centered=A_centered,
        outcome=data.outcome.astype(np.float64),
        augmentation_design=aug,
        centering_method=centering,
    )


def _tilted_outcome(theta, sys):
    """Y_i * exp(-theta' H_i), guarding the exp() overflow boundary."""
    eta = sys.H @ np.asarray(theta, dtype=np.float64)
    if np.max(np.abs(eta)) > _ETA_LIMIT:
        raise OverflowGuard(
            f"|theta' H| reached {np.max(np.abs(eta)):.3g} (limit {_ETA_LIMIT:g})"
        )
    return sys.outcome * np.exp(-eta)


def _residual(theta, sys, beta=None):
    """Y_i exp(-theta' H_i), minus the working model when beta is given."""
    r = _tilted_outcome(theta, sys)
    if beta is not None:
        if sys.augmentation_design is None:
            raise MsmmError("beta given but the system has no augmentation design")
        xb = sys.augmentation_design @ np.asarray(beta, dtype=np.float64)
        if np.max(np.abs(xb)) > _ETA_LIMIT:
            raise OverflowGuard(
                f"|x' beta| reached {np.max(np.abs(xb)):.3g} (limit {_ETA_LIMIT:g})"
            )
        r = r - np.exp(xb)
    return r


def score(theta, sys, beta=None):
    """The weight-side moment vector: sum_i A~_i * residual_i  (length L)."""
    return sys.A_centered.T @ _residual(theta, sys, beta)


def score_contributions(theta, sys, beta=None):
    """Per-observation moment contributions, stacked (n, L [+ q]) for the
    sandwich meat. Augmented systems include the working-model rows."""
    r = _residual(theta, sys, beta)
    parts = [sys.A_centered * r[:, None]]
    if beta is not None:
        parts.append(sys.augmentation_design * r[:, None])
    return np.hstack(parts)


def score_jacobian(theta, sys, beta=None):
    """Analytic derivative of the weight-side moments with respect to theta.

    Entry (l, k) is -sum_i A~_il * Y_i exp(-theta' H_i) * H_ik; it matches
    central finite differences to 1e-5 relative error.
    """
    t = _tilted_outcome(theta, sys)
    return -sys.A_centered.T @ (sys.H * t[:, None])


def _stacked_score(theta, sys, beta=None):
    """Moment vector including the working-model equations (length L + q)."""
    r = _residual(theta, sys, beta)
    top = sys.A_centered.T @ r
    if beta is None:
        return top
    return np.concatenate([top, sys.augmentation_design.T @ r])


def _stacked_jacobian(theta, sys, beta=None):
    """Derivative of the stacked moments with respect to (theta [, beta])."""
    t = _tilted_outcome(theta, sys)
    d_theta_top = -sys.A_centered.T @ (sys.H * t[:, None])
    if beta is None:
        return d_theta_top
    G = sys.augmentation_design
    xb = G @ np.asarray(beta, dtype=np.float64)
    g = np.exp(xb)
    d_theta_bot = -G.T @ (sys.H * t[:, None])
    d_beta_top = -sys.A_centered.T @ (G * g[:, None])
    d_beta_bot = -G.T @ (G * g[:, None])
    return np.block([[d_theta_top, d_beta_top], [d_theta_bot, d_beta_bot]])


@dataclass(frozen=True)
class IdentificationDiagnostics:
    """Observable checks on whether the moment system pins down theta."""

    min_eigenvalue: float
    mean_diagonal: float
    condition_number: float
    min_relevance_f: float
    weakly_identified: bool

    def summary(self):
        flag = "WEAK" if self.weakly_identified else "ok"
        return (
            f"min eig E(Cov H|X)={self.min_eigenvalue:.6g}, "
            f"cond(dS)={self.condition_number:.6g}, "
            f"min first-stage F={self.min_relevance_f:.6g} [{flag}]"
        )


def identification_check(spec, data, centering="empirical", p=None):
    """Diagnose whether the basis effects are identified by the weights.

    Reports the smallest eigenvalue of the sample analog of E(Cov(H | X))
    (residual cross-products of each basis column after regressing on
    (1, X)), the condition number of the mean score derivative at theta=0,
    and the smallest first-stage relevance F statistic of the basis
    columns on the centered weights given (1, X). Weak identification is
    flagged when the eigenvalue nearly vanishes relative to the mean
    diagonal, the condition number explodes, or any relevance F falls
    below the conventional threshold of 10.
    """
    H = build_basis_matrix(spec, data)
    n, K = H.shape
    X1 = np.column_stack([np.ones(n), data.covariates])
    coef, _, _, _ = np.linalg.lstsq(X1, H, rcond=None)
    R = H - X1 @ coef
    C = R.T @ R / n
    eigenvalues = np.linalg.eigvalsh(C)
    min_eig = float(eigenvalues[0])
    mean_diag = float(np.mean(np.diag(C)))

    sys = build_score_system(spec, data, centering=centering, p=p)
    J0 = score_jacobian(np.zeros(K), sys) / n
    singular_values = np.linalg.svd(J0, compute_uv=False)
    if singular_values[-1] <= 0:
        condition_number = math.inf
    else:
        condition_number = float(singular_values[0] / singular_values[-1])

    # first-stage relevance: does each basis column respond to the
    # centered weights once (1, X) is partialled out?
    L = sys.n_weights
    full = np.column_stack([X1, sys.A_centered])
    df_resid = n - full.shape[1]
    min_f = math.inf
    for k in range(K):
        h = H[:, k]
        rss0 = float(np.sum((h - X1 @ np.linalg.lstsq(X1, h, rcond=None)[0]) ** 2))
        rss1 = float(np.sum((h - full @ np.linalg.lstsq(full, h, rcond=None)[0]) ** 2))
        if rss1 <= 1e-12 * max(rss0, 1.0):
            continue  # exact fit: infinitely strong
        if df_resid <= 0:
            min_f = 0.0
            break
        f_stat = max(rss0 - rss1, 0.0) / L / (rss1 / df_resid)
        min_f = min(min_f, f_stat)

    weak = (
        min_eig < 1e-4 * mean_diag
        or condition_number > 1e6
        or min_f < 10.0
    )
    return IdentificationDiagnostics(
        min_eigenvalue=min_eig,
        mean_diagonal=mean_diag,
        condition_number=condition_number,
        min_relevance_f=min_f,
        weakly_identified=bool(weak),
    )


@dataclass(frozen=True)
class EstimationResult:
    """Point estimates, uncertainty and diagnostics from one solve.

    ``theta`` is on the log-rate-ratio scale; ``covariance`` covers the
    stacked (theta [, beta]) vector. ``gmm_objective_at_solution`` is the
    squared norm of the mean moment vector.
    """

    theta: np.ndarray
    beta: np.ndarray
    covariance: np.ndarray
    std_errors: np.ndarray
    ci_lower: np.ndarray
    ci_upper: np.ndarray
    ci_level: float
    gmm_objective_at_solution: float
    identification: IdentificationDiagnostics
    iterations: int
    converged: bool
    variance_method: str
    param_names: tuple
    spec: EffectSpec
    n: int

    @property
    def n_basis(self):
        return self.theta.shape[0]

    def theta_covariance(self):
        K = self.n_basis
        return self.covariance[:K, :K]


def _newton_square(start, score_fn, jac_fn, n, max_iter=_MAX_ITER, trace=None):
    """Damped Newton for exactly identified systems.

    Converges when max |score| / n < 1e-10; steps that fail to shrink the
    score norm (or that overflow) are halved up to 12 times. ``trace``
    collects the visited iterates when provided.
    """
    x = np.asarray(start, dtype=np.float64).copy()
    try:
        s = score_fn(x)
    except OverflowGuard:
        return x, 0, False, math.inf
    for iteration in range(1, max_iter + 1):
        if trace is not None:
            trace.append(x.copy())
        if np.max(np.abs(s)) / n < _NEWTON_TOL:
            return x, iteration - 1, True, float(s @ s) / n**2
        J = jac_fn(x)
        try:
            delta = np.linalg.solve(J, -s)
        except np.linalg.LinAlgError:
            delta, _, _, _ = np.linalg.lstsq(J, -s, rcond=None)
        norm0 = float(np.linalg.norm(s))
        alpha = 1.0
        accepted = False
        for _ in range(12):
            try:
                s_new = score_fn(x + alpha * delta)
            except OverflowGuard:
                alpha *= 0.5
                continue
            if float(np.linalg.norm(s_new)) <= norm0 * (1.0 - 1e-4 * alpha):
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            break
        x = x + alpha * delta
        s = s_new
    converged = np.max(np.abs(s)) / n < _NEWTON_TOL
    return x, max_iter, converged, float(s @ s) / n**2


def _levenberg_marquardt(start, score_fn, jac_fn, n, max_iter=200, trace=None):
    """Least squares on the mean moment vector for over-identified systems.

    Minimizes ||score/n||^2 with identity moment weighting; converges when
    the objective gradient norm drops below 1e-8. ``trace`` collects the
    visited iterates when provided.
    """
    x = np.asarray(start, dtype=np.float64).copy()
    try:
        m = score_fn(x) / n
    except OverflowGuard:
        return x, 0, False, math.inf
    f = float(m @ m)
    lam = 1e-3
    for iteration in range(1, max_iter + 1):
        if trace is not None:
            trace.append(x.copy())
        J = jac_fn(x) / n
        gradient = 2.0 * J.T @ m
        if float(np.linalg.norm(gradient)) < _LM_GRAD_TOL:
            return x, iteration - 1, True, f
        JtJ = J.T @ J
        improved = False
        for _ in range(25):
            damped = JtJ + lam * np.diag(np.diag(JtJ)) + 1e-14 * np.eye(JtJ.shape[0])
            try:
                delta = np.linalg.solve(damped, -J.T @ m)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            try:
                m_new = score_fn(x + delta) / n
            except OverflowGuard:
                lam *= 10.0
                continue
            f_new = float(m_new @ m_new)
            if f_new < f:
                x = x + delta
                m, f = m_new, f_new
                lam = max(lam / 3.0, 1e-12)
                improved = True
                break
            lam *= 10.0
        if not improved:
            gradient = 2.0 * (jac_fn(x) / n).T @ m
            return x, iteration, float(np.linalg.norm(gradient)) < _LM_GRAD_TOL, f
    gradient = 2.0 * (jac_fn(x) / n).T @ m
    return x, max_iter, float(np.linalg.norm(gradient)) < _LM_GRAD_TOL, f


def _poisson_warm_start(spec, data, sys):
    """Poisson regression of Y on (1, H, X), restricted to the basis block."""
    from .glm import fit_poisson_irls

    K = sys.n_basis
    design = np.column_stack([np.ones(data.n), sys.H, data.covariates])
    try:
        fit = fit_poisson_irls(design, data.outcome)
    except MsmmError:
        return None
    theta = fit.coefficients[1:1 + K]
    if sys.augmentation_design is None:
        return theta
    # working-model start: regress log residual scale on the augmentation design
    try:
        r = _tilted_outcome(theta, sys)
    except OverflowGuard:
        return None
    target = np.log(np.maximum(r, 0.0) + 0.5)
    beta, _, _, _ = np.linalg.lstsq(sys.augmentation_design, target, rcond=None)
    return np.concatenate([theta, beta])


def _zero_start(sys, outcome):
    K = sys.n_basis
    if sys.augmentation_design is None:
        return np.zeros(K)
    beta = np.zeros(sys.n_aug)
    ones = np.all(sys.augmentation_design == 1.0, axis=0)
    if ones.any():
        beta[np.argmax(ones)] = math.log(float(np.mean(outcome)) + 0.5)
    return np.concatenate([np.zeros(K), beta])


def solve(spec, data, centering="empirical", p=None, level=0.95,
          max_iter=_MAX_ITER, trace=None):
    """Estimate the basis effects (and optional working model) on a dataset.

    Runs the identification diagnostics, solves the moment system from two
    starts (the zero vector and a Poisson-regression warm start, keeping
    the better objective), then attaches sandwich standard errors and Wald
    confidence intervals at ``level``. Weak identification does not stop
    the solve; it is carried in ``result.identification``. ``trace``
    collects every iterate the solvers visit.
    """
    if not is_binary_treatment(data.treatment):
        raise NonBinaryTreatment("the solver requires a two-arm 0/1 treatment")
    diagnostics = identification_check(spec, data, centering=centering, p=p)
    sys = build_score_system(spec, data, centering=centering, p=p)
    K = sys.n_basis
    q = sys.n_aug
    augmented = q > 0

    def score_fn(params):
        if augmented:
            return _stacked_score(params[:K], sys, params[K:])
        return _stacked_score(params, sys)

    def jac_fn(params):
        if augmented:
            return _stacked_jacobian(params[:K], sys, params[K:])
        return _stacked_jacobian(params, sys)

    starts = [_zero_start(sys, data.outcome)]
    warm = _poisson_warm_start(spec, data, sys)
    if warm is not None:
        starts.append(warm)

    square = sys.n_weights == K  # stacked system stays square with augmentation
    best = None
    for start in starts:
        if square:
            x, iterations, converged, objective = _newton_square(
                start, score_fn, jac_fn, sys.n, max_iter, trace=trace
            )
        else:
            x, iterations, converged, objective = _levenberg_marquardt(
                start, score_fn, jac_fn, sys.n, trace=trace
            )
        candidate = (converged, -objective, x, iterations)
        if best is None or candidate[:2] > best[:2]:
            best = candidate
    converged, neg_objective, solution, iterations = (
        best[0], best[1], best[2], best[3]
    )
    if not converged:
        raise NoConvergence(
            "moment solver failed from both starts "
            f"(best objective {-neg_objective:.3e})"
        )

    theta = solution[:K]
    beta = solution[K:] if augmented else None

    from .inference import normal_quantile, sandwich_variance

    parts = sandwich_variance(sys, theta, beta)
    covariance = parts.variance
    std_errors = np.sqrt(np.clip(np.diag(covariance), 0.0, None))
    z = normal_quantile(0.5 + level / 2.0)
    estimates = solution
    ci_lower = estimates - z * std_errors
    ci_upper = estimates + z * std_errors

    names = list(spec.basis_labels())
    if augmented:
        aug_names = []
        if spec.augmentation.intercept:
            aug_names.append("beta:intercept")
        aug_names.extend(
            f"beta:{data.covariate_names[j]}" for j in spec.augmentation.covariates
        )
        names.extend(aug_names)

    return EstimationResult(
        theta=theta,
        beta=beta,
        covariance=covariance,
        std_errors=std_errors,
        ci_lower=ci_lower,
        ci_upper=ci_upper,
        ci_level=level,
        gmm_objective_at_solution=-neg_objective,
        identification=diagnostics,
        iterations=iterations,
        converged=converged,
        variance_method="sandwich",
        param_names=tuple(names),
        spec=spec,
        n=data.n,
    )


def _basis_point(term, z, m, x):
    if term.kind == "Z":
        return z
    if term.kind == "M":
        return m
    if term.kind == "Z:M":
        return z * m
    if x is None:
        raise ContrastOutsideSpan(
            f"term {term.label!r} needs covariate values in the contrast"
        )
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    if term.covariate >= x.shape[0]:
        raise ContrastOutsideSpan(
            f"term {term.label!r} references covariate {term.covariate}, "
            f"contrast provides {x.shape[0]}"
        )
    base = z if term.kind == "Z:x" else m
    return base * x[term.covariate]


@dataclass(frozen=True)
class EffectEstimate:
    """One controlled effect on the log-rate and rate-ratio scales."""

    label: str
    log_effect: float
    rate_ratio: float
    std_error: float
    ci_lower: float
    ci_upper: float
    rr_ci_lower: float
    rr_ci_upper: float


def controlled_effects(result, contrasts, level=None):
    """Rate-ratio effects for (z, m, x) point pairs sharing the same x.

    Each contrast is ``((z1, m1, x1), (z0, m0, x0))`` with ``x1 == x0``
    (the model only identifies effects of moving z and m at fixed
    covariates) or ``(label, point, reference)``. Confidence intervals are
    delta-method on the log scale, exponentiated.
    """
    from .inference import normal_quantile

    if level is None:
        level = result.ci_level
    z_quant = normal_quantile(0.5 + level / 2.0)
    cov = result.theta_covariance()
    rows = []
    for index, contrast in enumerate(contrasts):
        if len(contrast) == 3 and isinstance(contrast[0], str):
            label, point, reference = contrast
        else:
            point, reference = contrast
            label = f"contrast {index + 1}"
        z1, m1, x1 = point
        z0, m0, x0 = reference
        x1_arr = None if x1 is None else np.atleast_1d(np.asarray(x1, dtype=float))
        x0_arr = None if x0 is None else np.atleast_1d(np.asarray(x0, dtype=float))
        if (x1_arr is None) != (x0_arr is None) or (
            x1_arr is not None and (
                x1_arr.shape != x0_arr.shape or not np.array_equal(x1_arr, x0_arr)
            )
        ):
            raise ContrastOutsideSpan(
                "contrast points must share the same covariate values"
            )
        gradient = np.array([
            _basis_point(t, z1, m1, x1_arr) - _basis_point(t, z0, m0, x0_arr)
            for t in result.spec.basis
        ])
        log_effect = float(result.theta @ gradient)
        variance = float(gradient @ cov @ gradient)
        se = math.sqrt(max(variance, 0.0))
        lo = log_effect - z_quant * se
        hi = log_effect + z_quant * se
        rows.append(EffectEstimate(
            label=label,
            log_effect=log_effect,
            rate_ratio=math.exp(log_effect),
            std_error=se,
            ci_lower=lo,
            ci_upper=hi,
            rr_ci_lower=math.exp(lo),
            rr_ci_upper=math.exp(hi),
        ))
    return rows


def default_contrasts(spec, n_covariates=0):
    """Direct (z: 1 vs 0) and per-unit mediator (m: 1 vs 0) contrasts at x = 0."""
    x0 = np.zeros(n_covariates) if n_covariates else None
    return [
        ("Direct Effect", (1.0, 0.0, x0), (0.0, 0.0, x0)),
        ("Mediator Effect", (0.0, 1.0, x0), (0.0, 0.0, x0)),
    ]
