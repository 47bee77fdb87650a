"""Monte Carlo engine for the bias / coverage comparison study.

Generates two-arm trials with a continuous mediator driven by a
treatment-by-covariate interaction and an unmeasured confounder, produces
count outcomes from Poisson, over-dispersed Poisson or negative binomial
families, fits a configurable set of estimators on every replication, and
aggregates bias, spread, standard-error calibration and interval coverage.

Replication ``r`` draws all randomness from a stream seeded by
``(base_seed, r)``, so results are identical under any scheduling and any
degree of parallelism.
"""

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .core import solve
from .data import BasisTerm, Dataset, EffectSpec, WeightTerm
from .exceptions import MsmmError, ScenarioError
from .glm import fit_negbin, fit_poisson_irls, fit_quasipoisson
from .inference import normal_quantile

OUTCOME_FAMILIES = ("poisson", "odpoisson", "negbin")
ESTIMATORS = ("proposed", "proposed-augmented", "poisson", "quasipoisson", "negbin")
PARAMETERS = ("theta_z", "theta_m")


@dataclass(frozen=True)
class SimScenario:
    """Generative specification for one study.

    The mediator follows
        M = gamma_z Z + gamma_x X + gamma_zx Z X + gamma_u U + eps,
    with X, U independent standard normal and eps mean-zero normal with
    variance ``mediator_residual_variance``. The outcome rate is
    exp(theta_z Z + theta_m M + theta_u U + theta_x X), plus theta_v V for
    the over-dispersed Poisson family. theta_u != 0 breaks mediator
    ignorability while leaving the moment estimator unbiased.
    """

    n: int = 400
    reps: int = 1000
    outcome_family: str = "poisson"
    nb_size: float = 2.0
    theta_x: float = 0.2
    theta_z: float = 0.1
    theta_m: float = 0.5
    theta_u: float = 0.0
    theta_v: float = 0.5
    gamma_z: float = 0.0
    gamma_x: float = 0.0
    gamma_zx: float = 1.0
    gamma_u: float = 0.5
    mediator_residual_variance: float = 0.1
    treatment_probability: float = 0.5
    base_seed: int = 20240401

    def __post_init__(self):
        if self.n < 10:
            raise ScenarioError(f"n must be at least 10, got {self.n}")
        if self.reps < 1:
            raise ScenarioError(f"reps must be at least 1, got {self.reps}")
        if self.outcome_family not in OUTCOME_FAMILIES:
            raise ScenarioError(
                f"unknown outcome family {self.outcome_family!r}; "
                f"expected one of {OUTCOME_FAMILIES}"
            )
        if self.mediator_residual_variance <= 0:
            raise ScenarioError("mediator residual variance must be positive")
        if self.outcome_family == "negbin" and self.nb_size <= 0:
            raise ScenarioError("nb_size must be positive")
        if not 0.0 < self.treatment_probability < 1.0:
            raise ScenarioError("treatment probability must be inside (0, 1)")


@dataclass(frozen=True)
class SimLatents:
    """Unobserved draws kept aside for oracle checks, never for fitting."""

    u: np.ndarray
    v: np.ndarray
    rate: np.ndarray


def generate(scenario, rep_index):
    """One simulated dataset plus its latent record, deterministic in
    (base_seed, rep_index)."""
    rng = np.random.default_rng([scenario.base_seed, rep_index])
    n = scenario.n
    x = rng.standard_normal(n)
    u = rng.standard_normal(n)
    z = (rng.random(n) < scenario.treatment_probability).astype(np.float64)
    eps = rng.normal(0.0, math.sqrt(scenario.mediator_residual_variance), n)
    m = (scenario.gamma_z * z + scenario.gamma_x * x
         + scenario.gamma_zx * z * x + scenario.gamma_u * u + eps)
    log_rate = (scenario.theta_z * z + scenario.theta_m * m
                + scenario.theta_u * u + scenario.theta_x * x)
    v = np.zeros(n)
    if scenario.outcome_family == "odpoisson":
        v = rng.standard_normal(n)
        log_rate = log_rate + scenario.theta_v * v
    rate = np.exp(log_rate)
    if scenario.outcome_family == "negbin":
        size = scenario.nb_size
        y = rng.negative_binomial(size, size / (size + rate))
    else:
        y = rng.poisson(rate)
    data = Dataset(
        outcome=y.astype(np.int64),
        treatment=z,
        mediator=m,
        covariates=x.reshape(-1, 1),
        covariate_names=("x1",),
    )
    return data, SimLatents(u=u, v=v, rate=rate)


def study_spec(augmented=False):
    """The estimating spec used throughout the study: basis {Z, M},
    weights {Z, Z*x1}, treatment-mean centering."""
    from .data import AugmentationSpec

    return EffectSpec(
        basis=(BasisTerm("Z"), BasisTerm("M")),
        weights=(WeightTerm("Z"), WeightTerm("Z:x", covariate=0, label="Z:x1")),
        augmentation=AugmentationSpec(covariates=(0,), intercept=True) if augmented
        else None,
    )


@dataclass(frozen=True)
class ReplicateRecord:
    rep: int
    estimator: str
    parameter: str
    estimate: float
    se: float
    covered: int
    converged: int


@dataclass(frozen=True)
class SummaryRow:
    estimator: str
    parameter: str
    truth: float
    reps_used: int
    failures: int
    mean_estimate: float
    bias: float
    sd: float
    mean_se: float
    rmse: float
    coverage: float


@dataclass(frozen=True)
class SimSummary:
    scenario: SimScenario
    rows: tuple
    replicates: tuple

    def row(self, estimator, parameter):
        for row in self.rows:
            if row.estimator == estimator and row.parameter == parameter:
                return row
        raise KeyError(f"no summary row for ({estimator}, {parameter})")


def _fit_proposed(data, level, augmented):
    result = solve(study_spec(augmented), data, centering="empirical", level=level)
    return (
        (result.theta[0], result.std_errors[0],
         result.ci_lower[0], result.ci_upper[0]),
        (result.theta[1], result.std_errors[1],
         result.ci_lower[1], result.ci_upper[1]),
    )


def _fit_glm(data, level, family):
    design = np.column_stack([
        np.ones(data.n), data.treatment, data.mediator, data.covariates,
    ])
    if family == "poisson":
        fit = fit_poisson_irls(design, data.outcome)
    elif family == "quasipoisson":
        fit = fit_quasipoisson(design, data.outcome)
    else:
        fit = fit_negbin(design, data.outcome)
    z = normal_quantile(0.5 + level / 2.0)
    out = []
    for column in (1, 2):
        estimate = fit.coefficients[column]
        se = fit.std_errors[column]
        out.append((estimate, se, estimate - z * se, estimate + z * se))
    return tuple(out)


def _run_replicate(scenario, rep, estimators, level):
    data, _ = generate(scenario, rep)
    truths = {"theta_z": scenario.theta_z, "theta_m": scenario.theta_m}
    records = []
    for estimator in estimators:
        try:
            if estimator == "proposed":
                fits = _fit_proposed(data, level, augmented=False)
            elif estimator == "proposed-augmented":
                fits = _fit_proposed(data, level, augmented=True)
            else:
                fits = _fit_glm(data, level, estimator)
        except MsmmError:
            for parameter in PARAMETERS:
                records.append(ReplicateRecord(
                    rep=rep, estimator=estimator, parameter=parameter,
                    estimate=math.nan, se=math.nan, covered=0, converged=0,
                ))
            continue
        for parameter, (estimate, se, lo, hi) in zip(PARAMETERS, fits):
            truth = truths[parameter]
            records.append(ReplicateRecord(
                rep=rep, estimator=estimator, parameter=parameter,
                estimate=float(estimate), se=float(se),
                covered=int(lo <= truth <= hi), converged=1,
            ))
    return records


def run_study(scenario, estimators=("proposed", "poisson", "quasipoisson", "negbin"),
              level=0.95, n_workers=None):
    """Fit every estimator on every replication and aggregate the results.

    Spread uses the population standard deviation over converged
    replications so that rmse^2 = bias^2 + sd^2 holds exactly; with a
    single replication the spread-based fields are NaN markers.
    """
    for name in estimators:
        if name not in ESTIMATORS:
            raise ScenarioError(
                f"unknown estimator {name!r}; expected one of {ESTIMATORS}"
            )
    if n_workers is None:
        env = os.environ.get("MSMM_THREADS", "")
        n_workers = int(env) if env.isdigit() and int(env) > 0 else 1

    reps = range(scenario.reps)
    if n_workers > 1:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            batches = list(pool.map(
                lambda r: _run_replicate(scenario, r, estimators, level), reps
            ))
    else:
        batches = [_run_replicate(scenario, r, estimators, level) for r in reps]
    replicates = tuple(record for batch in batches for record in batch)

    truths = {"theta_z": scenario.theta_z, "theta_m": scenario.theta_m}
    rows = []
    for estimator in estimators:
        for parameter in PARAMETERS:
            sub = [r for r in replicates
                   if r.estimator == estimator and r.parameter == parameter]
            ok = [r for r in sub if r.converged]
            failures = len(sub) - len(ok)
            truth = truths[parameter]
            if not ok:
                rows.append(SummaryRow(
                    estimator=estimator, parameter=parameter, truth=truth,
                    reps_used=0, failures=failures,
                    mean_estimate=math.nan, bias=math.nan, sd=math.nan,
                    mean_se=math.nan, rmse=math.nan, coverage=math.nan,
                ))
                continue
            estimates = np.array([r.estimate for r in ok])
            ses = np.array([r.se for r in ok])
            covered = np.array([r.covered for r in ok])
            mean_estimate = float(estimates.mean())
            bias = mean_estimate - truth
            if len(ok) > 1:
                sd = float(estimates.std(ddof=0))
                rmse = float(np.sqrt(np.mean((estimates - truth) ** 2)))
            else:
                sd = math.nan
                rmse = math.nan
            rows.append(SummaryRow(
                estimator=estimator, parameter=parameter, truth=truth,
                reps_used=len(ok), failures=failures,
                mean_estimate=mean_estimate, bias=float(bias), sd=sd,
                mean_se=float(ses.mean()), rmse=rmse,
                coverage=float(covered.mean()),
            ))
    return SimSummary(scenario=scenario, rows=tuple(rows), replicates=replicates)


_SUMMARY_HEADER = ("estimator", "parameter", "truth", "reps_used", "failures",
                   "mean_estimate", "bias", "sd", "mean_se", "rmse", "coverage")
_REPLICATE_HEADER = ("rep", "estimator", "parameter", "estimate", "se",
                     "covered", "converged")


def write_summary_csv(summary, path):
    with open(path, "w", encoding="utf-8") as handle:
        handle.write(",".join(_SUMMARY_HEADER) + "\n")
        for row in summary.rows:
            handle.write(",".join([
                row.estimator, row.parameter, repr(row.truth),
                str(row.reps_used), str(row.failures),
                repr(row.mean_estimate), repr(row.bias), repr(row.sd),
                repr(row.mean_se), repr(row.rmse), repr(row.coverage),
            ]) + "\n")


def write_replicates_csv(summary, path):
    with open(path, "w", encoding="utf-8") as handle:
        handle.write(",".join(_REPLICATE_HEADER) + "\n")
        for record in summary.replicates:
            handle.write(",".join([
                str(record.rep), record.estimator, record.parameter,
                repr(record.estimate), repr(record.se),
                str(record.covered), str(record.converged),
            ]) + "\n")


_SCENARIO_KEYS = {
    "n": ("n", int),
    "reps": ("reps", int),
    "family": ("outcome_family", str),
    "nb_size": ("nb_size", float),
    "theta_x": ("theta_x", float),
    "theta_z": ("theta_z", float),
    "theta_m": ("theta_m", float),
    "theta_u": ("theta_u", float),
    "theta_v": ("theta_v", float),
    "gamma_z": ("gamma_z", float),
    "gamma_x": ("gamma_x", float),
    "gamma_zx": ("gamma_zx", float),
    "gamma_u": ("gamma_u", float),
    "mediator_residual_variance": ("mediator_residual_variance", float),
    "treatment_probability": ("treatment_probability", float),
    "seed": ("base_seed", int),
}


def parse_scenario_file(path):
    """Read a flat key=value scenario file; unknown keys are errors."""
    overrides = {}
    with open(path, encoding="utf-8") as handle:
        for line_number, raw in enumerate(handle, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ScenarioError(
                    f"{path}:{line_number}: expected key=value, got {line!r}"
                )
            key, _, value = line.partition("=")
            key = key.strip()
            if key not in _SCENARIO_KEYS:
                raise ScenarioError(f"{path}:{line_number}: unknown key {key!r}")
            attr, cast = _SCENARIO_KEYS[key]
            try:
                overrides[attr] = cast(value.strip())
            except ValueError:
                raise ScenarioError(
                    f"{path}:{line_number}: cannot parse value for {key!r}: "
                    f"{value.strip()!r}"
                ) from None
    return SimScenario(**overrides)
