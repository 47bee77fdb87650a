"""Command line interface.

Commands
--------
estimate   fit the moment estimator on a CSV file and report effects
check-id   identification diagnostics only
bootstrap  resampled standard errors and intervals
compare    proposed vs quasi-Poisson side by side
simulate   run a Monte Carlo scenario file, writing summary/replicates CSVs

Exit codes: 0 success, 1 any error (one line on stderr naming the failing
stage), 2 weak identification without ``--force``. All randomness derives
from ``--seed`` (default 20240401), printed in every report header.
"""

import argparse
import json
import math
import os
import sys

import numpy as np

from . import __version__
from .core import controlled_effects, default_contrasts, identification_check, solve
from .data import AugmentationSpec, ColumnSchema, EffectSpec, load_csv, parse_basis, parse_weights
from .exceptions import MsmmError
from .inference import bootstrap as run_bootstrap
from .inference import compare_report
from .simulate import parse_scenario_file, run_study, write_replicates_csv, write_summary_csv

DEFAULT_SEED = 20240401


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _fmt6(value):
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return "."
    return f"{value:.6g}"


def _full(value):
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return ""
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def _render_table(headers, rows, out):
    widths = [len(h) for h in headers]
    text_rows = []
    for row in rows:
        text = [cell if isinstance(cell, str) else _fmt6(cell) for cell in row]
        widths = [max(w, len(c)) for w, c in zip(widths, text)]
        text_rows.append(text)
    line = "  ".join(h.ljust(w) for h, w in zip(headers, widths))
    out.write(line.rstrip() + "\n")
    for text in text_rows:
        out.write("  ".join(c.ljust(w) for c, w in zip(text, widths)).rstrip() + "\n")


def _render_csv(headers, rows, out):
    out.write(",".join(headers) + "\n")
    for row in rows:
        cells = [cell if isinstance(cell, str) else _full(cell) for cell in row]
        out.write(",".join(cells) + "\n")


def _render_json(document, out):
    def convert(value):
        if isinstance(value, (np.floating, np.integer)):
            return value.item()
        if isinstance(value, float) and math.isnan(value):
            return None
        return value

    out.write(json.dumps(document, default=convert, indent=2) + "\n")


def _emit(args, title, headers, rows, extra=None, out=None):
    """Write one report in the requested format; the numeric content is the
    same across formats (6 significant digits in tables, full precision in
    csv/json)."""
    stream = out or sys.stdout
    close = False
    if args.out and args.command != "simulate":
        stream = open(args.out, "w", encoding="utf-8")
        close = True
    try:
        if args.format == "json":
            document = {
                "command": args.command,
                "seed": args.seed,
                "title": title,
                "header": list(headers),
                "rows": [
                    [cell if isinstance(cell, str) else
                     (None if isinstance(cell, float) and math.isnan(cell)
                      else float(cell)) for cell in row]
                    for row in rows
                ],
            }
            if extra:
                document.update(extra)
            _render_json(document, stream)
        elif args.format == "csv":
            _render_csv(headers, rows, stream)
        else:
            stream.write(f"msmm {args.command} | seed={args.seed} | {title}\n")
            if extra:
                for key, value in extra.items():
                    stream.write(f"{key}: {value}\n")
            _render_table(headers, rows, stream)
    finally:
        if close:
            stream.close()


def _schema(args):
    covariates = None
    if args.covariates is not None:
        covariates = tuple(c.strip() for c in args.covariates.split(",") if c.strip())
    return ColumnSchema(
        outcome=args.outcome, treatment=args.treatment,
        mediator=args.mediator, covariates=covariates,
    )


def _centering(args):
    text = args.centering
    if text.startswith("known:"):
        return "known-p", float(text.split(":", 1)[1])
    if text in ("empirical", "ols"):
        return text, None
    raise UsageError(
        f"unknown centering {text!r}; expected empirical, ols, or known:<p>"
    )


def _effect_spec(args, data):
    basis = parse_basis(args.basis, data.covariate_names)
    weights_text = args.weights
    if weights_text is None:
        parts = ["Z"] + [f"Z:{name}" for name in data.covariate_names]
        weights_text = ",".join(parts[:max(len(basis), 1 + data.p)])
    weights = parse_weights(weights_text, data.covariate_names)
    augmentation = None
    if args.augment:
        indices = tuple(
            data.covariate_index(name.strip())
            for name in args.augment.split(",") if name.strip()
        )
        augmentation = AugmentationSpec(covariates=indices, intercept=True)
    return EffectSpec(basis=basis, weights=weights, augmentation=augmentation)


def _load_stage(args):
    if not args.data:
        raise UsageError("--data is required for this command")
    return load_csv(args.data, _schema(args), drop_incomplete=args.drop_incomplete)


def cmd_estimate(args):
    stage = "load"
    try:
        data = _load_stage(args)
        stage = "spec"
        spec = _effect_spec(args, data)
        centering, p = _centering(args)
        stage = "identification"
        diagnostics = identification_check(spec, data, centering=centering, p=p)
        if diagnostics.weakly_identified and not args.force:
            sys.stderr.write(
                f"weak identification: {diagnostics.summary()} "
                "(pass --force to estimate anyway)\n"
            )
            return 2
        stage = "solve"
        result = solve(spec, data, centering=centering, p=p, level=args.level)
        stage = "variance"
        boot = None
        if args.bootstrap is not None:
            boot = run_bootstrap(
                spec, data, B=args.bootstrap, seed=args.seed, level=args.level,
                centering=centering, p=p,
            )
        stage = "effects"
        effects = controlled_effects(result, default_contrasts(spec, data.p))
    except MsmmError as error:
        error.stage = stage
        raise

    headers = ("kind", "label", "estimate", "se", "rr", "ci_low", "ci_high")
    rows = []
    K = result.n_basis
    for index, name in enumerate(result.param_names):
        if boot is not None and index < K:
            se = boot.se[index]
            lo, hi = boot.ci_percentile[index]
        else:
            se = result.std_errors[index]
            lo, hi = result.ci_lower[index], result.ci_upper[index]
        estimate = result.theta[index] if index < K else result.beta[index - K]
        rows.append((
            "parameter", name, estimate, se,
            math.exp(estimate) if index < K else math.nan,
            lo, hi,
        ))
    for effect in effects:
        rows.append((
            "effect", effect.label, effect.log_effect, effect.std_error,
            effect.rate_ratio, effect.rr_ci_lower, effect.rr_ci_upper,
        ))
    variance_method = "bootstrap" if boot is not None else "sandwich"
    extra = {
        "n": data.n,
        "dropped": data.n_dropped,
        "centering": centering,
        "identification": diagnostics.summary(),
        "variance": variance_method,
        "converged": result.converged,
        "iterations": result.iterations,
        "gmm_objective": _fmt6(result.gmm_objective_at_solution),
    }
    title = f"n={data.n} | level={args.level:g}"
    _emit(args, title, headers, rows, extra)
    return 0


def cmd_check_id(args):
    stage = "load"
    try:
        data = _load_stage(args)
        stage = "spec"
        spec = _effect_spec(args, data)
        centering, p = _centering(args)
        stage = "identification"
        diagnostics = identification_check(spec, data, centering=centering, p=p)
    except MsmmError as error:
        error.stage = stage
        raise
    headers = ("quantity", "value")
    rows = [
        ("min_eigenvalue", diagnostics.min_eigenvalue),
        ("mean_diagonal", diagnostics.mean_diagonal),
        ("condition_number", diagnostics.condition_number),
        ("min_relevance_f", diagnostics.min_relevance_f),
        ("weakly_identified", str(diagnostics.weakly_identified)),
    ]
    _emit(args, f"n={data.n}", headers, rows)
    return 2 if diagnostics.weakly_identified and not args.force else 0


def cmd_bootstrap(args):
    stage = "load"
    try:
        data = _load_stage(args)
        stage = "spec"
        spec = _effect_spec(args, data)
        centering, p = _centering(args)
        stage = "identification"
        diagnostics = identification_check(spec, data, centering=centering, p=p)
        if diagnostics.weakly_identified and not args.force:
            sys.stderr.write(
                f"weak identification: {diagnostics.summary()} "
                "(pass --force to estimate anyway)\n"
            )
            return 2
        stage = "bootstrap"
        B = args.bootstrap if args.bootstrap is not None else 500
        run = run_bootstrap(
            spec, data, B=B, seed=args.seed, level=args.level,
            centering=centering, p=p,
        )
    except MsmmError as error:
        error.stage = stage
        raise
    headers = ("label", "estimate", "boot_se", "pct_low", "pct_high",
               "normal_low", "normal_high")
    labels = [t.label for t in spec.basis]
    rows = [
        (labels[k], run.theta[k], run.se[k],
         run.ci_percentile[k, 0], run.ci_percentile[k, 1],
         run.ci_normal[k, 0], run.ci_normal[k, 1])
        for k in range(len(labels))
    ]
    extra = {"n": data.n, "B": run.B, "failures": run.failures}
    _emit(args, f"n={data.n} | B={run.B} | level={args.level:g}", headers, rows, extra)
    return 0


def cmd_compare(args):
    stage = "load"
    try:
        data = _load_stage(args)
        stage = "spec"
        spec = _effect_spec(args, data)
        centering, p = _centering(args)
        stage = "identification"
        diagnostics = identification_check(spec, data, centering=centering, p=p)
        if diagnostics.weakly_identified and not args.force:
            sys.stderr.write(
                f"weak identification: {diagnostics.summary()} "
                "(pass --force to estimate anyway)\n"
            )
            return 2
        stage = "compare"
        B = args.bootstrap if args.bootstrap is not None else 500
        rows_data = compare_report(
            spec, data, level=args.level, centering=centering, p=p,
            proposed_ci="bootstrap", B=B, seed=args.seed,
        )
    except MsmmError as error:
        error.stage = stage
        raise
    headers = ("effect", "method", "rr", "ci_low", "ci_high")
    rows = [
        (row.effect, row.method, row.rate_ratio, row.ci_lower, row.ci_upper)
        for row in rows_data
    ]
    _emit(args, f"n={data.n} | B={B} | level={args.level:g}", headers, rows)
    return 0


def cmd_simulate(args):
    if not args.scenario:
        raise UsageError("--scenario is required for simulate")
    stage = "scenario"
    try:
        scenario = parse_scenario_file(args.scenario)
        if args.seed_given:
            from dataclasses import replace
            scenario = replace(scenario, base_seed=args.seed)
        else:
            args.seed = scenario.base_seed
        stage = "study"
        summary = run_study(scenario, level=args.level)
    except MsmmError as error:
        error.stage = stage
        raise
    out_dir = args.out or "."
    os.makedirs(out_dir, exist_ok=True)
    write_summary_csv(summary, os.path.join(out_dir, "summary.csv"))
    write_replicates_csv(summary, os.path.join(out_dir, "replicates.csv"))
    headers = ("estimator", "parameter", "truth", "reps_used", "failures",
               "mean_estimate", "bias", "sd", "mean_se", "rmse", "coverage")
    rows = [
        (r.estimator, r.parameter, r.truth, r.reps_used, r.failures,
         r.mean_estimate, r.bias, r.sd, r.mean_se, r.rmse, r.coverage)
        for r in summary.rows
    ]
    title = (f"family={scenario.outcome_family} | n={scenario.n} "
             f"| reps={scenario.reps} | theta_u={scenario.theta_u:g}")
    _emit(args, title, headers, rows, out=sys.stdout)
    return 0


def build_parser():
    parser = _Parser(prog="msmm", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=f"msmm {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--data", help="CSV file with header row")
        p.add_argument("--scenario", help="scenario key=value file (simulate)")
        p.add_argument("--outcome", default="y", help="outcome column name")
        p.add_argument("--treatment", default="z", help="treatment column name")
        p.add_argument("--mediator", default="m", help="mediator column name")
        p.add_argument("--covariates", default=None,
                       help="comma list of covariate columns (default: all others)")
        p.add_argument("--basis", default="Z,M",
                       help="comma list of basis terms, e.g. Z,M,Z:x1")
        p.add_argument("--weights", default=None,
                       help="comma list of weight terms, e.g. Z,Z:x1")
        p.add_argument("--augment", default=None,
                       help="comma list of covariates for the working model")
        p.add_argument("--centering", default="empirical",
                       help="empirical | ols | known:<p>")
        p.add_argument("--bootstrap", type=int, default=None, metavar="B",
                       help="bootstrap replicate count")
        p.add_argument("--seed", type=int, default=DEFAULT_SEED)
        p.add_argument("--level", type=float, default=0.95)
        p.add_argument("--format", choices=("table", "csv", "json"),
                       default="table")
        p.add_argument("--out", default=None,
                       help="output file (directory for simulate)")
        p.add_argument("--force", action="store_true",
                       help="estimate despite weak identification")
        p.add_argument("--drop-incomplete", action="store_true",
                       help="listwise-delete rows with missing cells")

    for name, handler in (("estimate", cmd_estimate), ("check-id", cmd_check_id),
                          ("bootstrap", cmd_bootstrap), ("compare", cmd_compare),
                          ("simulate", cmd_simulate)):
        p = sub.add_parser(name)
        common(p)
        p.set_defaults(handler=handler)
    return parser


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        args.seed_given = any(
            token == "--seed" or token.startswith("--seed=") for token in argv
        )
        if args.bootstrap is not None and args.bootstrap < 50:
            raise UsageError(
                f"--bootstrap must be at least 50, got {args.bootstrap}"
            )
        if not 0.0 < args.level < 1.0:
            raise UsageError(f"--level must be inside (0, 1), got {args.level}")
        return args.handler(args)
    except UsageError as error:
        sys.stderr.write(f"error [usage]: {error}\n")
        return 1
    except FileNotFoundError as error:
        sys.stderr.write(f"error [load]: {error}\n")
        return 1
    except MsmmError as error:
        stage = getattr(error, "stage", error.__class__.__name__)
        sys.stderr.write(f"error [{stage}]: {error}\n")
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
