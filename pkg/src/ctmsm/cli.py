"""Command-line interface: ``ctmsm simulate | fit | nelson-aalen | validate``."""

from __future__ import annotations

import argparse
import json
import os
import sys

from .core import ContractError, EventLogError, Measure, format_time, read_event_log, write_event_log
from .estimate import (EMPTY_GROUP_POLICIES, GROUPS, TieError, aalen_fit, bootstrap_band,
                       nelson_aalen, write_fit_csv)
from .filters import DegenerateProjectionError, NumericalError, projection_curves
from .scenario import ConfigError, load_scenario
from .simulate import SimulationRequest, simulate_cohort, simulation_metadata, write_metadata
from .validate import (change_of_measure_check, independent_censoring_check,
                       run_bias_experiment, weight_martingale_check)
from .weights import CohortWeights, DegenerateWeightError, weight_diagnostics

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_DEGENERATE = 4
EXIT_TIES = 5
EXIT_VALIDATION = 6

EXIT_CODES_HELP = """exit codes:
  0  success
  2  invalid configuration, flags or scenario-hash mismatch
  3  file could not be read, parsed or written
  4  degenerate weights (zero ratio or projection) or numerical failure
  5  tied death times in the cohort
  6  a validation check failed
"""


MEASURES = {"obs": Measure.Observational, "rct": Measure.RandomizedTrial}


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


def latent_path(out: str) -> str:
    return out + ".latent"


def meta_path(out: str) -> str:
    return out + ".meta.json"


def report_path(out: str) -> str:
    return out + ".report.json"


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_config(path):
    try:
        return load_scenario(path)
    except OSError as err:
        raise CliError(f"cannot read config {path}: {err}", EXIT_IO) from err


# commands


def cmd_simulate(args) -> int:
    spec = _load_config(args.config)
    if args.n < 1:
        raise CliError("--n must be at least 1", EXIT_CONFIG)
    request = SimulationRequest(spec, args.n, args.seed, MEASURES[args.measure],
                                args.keep_latent, args.grid_step)
    cohort = simulate_cohort(request)
    write_event_log(cohort, args.out)
    if args.keep_latent:
        write_event_log(cohort, latent_path(args.out), latent=True)
    write_metadata(meta_path(args.out), simulation_metadata(request))
    return EXIT_OK


def _read_cohort(path):
    try:
        return read_event_log(path)
    except OSError as err:
        raise CliError(f"cannot read cohort {path}: {err}", EXIT_IO) from err


def cmd_fit(args) -> int:
    spec = _load_config(args.config)
    cohort = _read_cohort(args.cohort)
    digest = spec.digest()
    if cohort.scenario_tag and cohort.scenario_tag != digest:
        raise CliError(f"cohort was simulated from scenario {cohort.scenario_tag}, "
                       f"but --config has hash {digest}", EXIT_CONFIG)
    if cohort.horizon != spec.horizon:
        raise CliError("cohort horizon differs from the scenario horizon", EXIT_CONFIG)
    report = {"scenario_hash": digest, "cohort": os.path.basename(args.cohort),
              "n_subjects": len(cohort), "weights": args.weights,
              "empty_group": args.empty_group}
    weights = None
    if args.weights == "stabilized":
        curves = projection_curves(spec, args.grid_step)
        weights = CohortWeights(cohort, spec, curves, args.truncate_q)
        report["weight_diagnostics"] = weight_diagnostics(weights).to_dict()
    fit = aalen_fit(cohort, weights, args.empty_group)
    report["n_deaths_used"] = len(fit.event_times_used)
    report["skipped_events"] = [{"time": t, "subject": s} for t, s in fit.skipped_events]
    se = None
    if args.boot:
        band = bootstrap_band(cohort, weights, args.boot, args.boot_seed,
                              grid=fit.bhat.times, empty_group=args.empty_group)
        se = band.se
        report["bootstrap"] = {"n_boot": args.boot, "seed": args.boot_seed}
    with open(args.out, "w", newline="") as fh:
        write_fit_csv(fh, fit, se)
    _write_json(report_path(args.out), report)
    return EXIT_OK


def cmd_nelson_aalen(args) -> int:
    cohort = _read_cohort(args.cohort)
    est, var = nelson_aalen(cohort, args.group, return_variance=True)
    with open(args.out, "w") as fh:
        fh.write("time,cumhaz,variance\n0.0,0,0\n")
        for t, h, v in zip(est.times, est.values, var.values):
            fh.write(f"{format_time(t)},{float(h)!r},{float(v)!r}\n")
    return EXIT_OK


def cmd_validate(args) -> int:
    spec = _load_config(args.config)
    checks = ("martingale", "bias", "censoring", "com") if args.check == "all" else (args.check,)
    results = {}
    for name in checks:
        if name == "bias":
            rep = run_bias_experiment(spec, args.m, args.seed, args.grid_step, args.boot)
        elif name == "censoring":
            rep = independent_censoring_check(spec, args.m, args.seed, step=args.grid_step)
        elif name == "com":
            rep = change_of_measure_check(spec, args.m, args.seed, step=args.grid_step)
        else:
            rep = weight_martingale_check(spec, args.m, args.seed, args.grid_step)
        results[name] = rep
        print(f"{name}: {'PASS' if rep.passed else 'FAIL'}")
    passed = all(r.passed for r in results.values())
    if args.out:
        _write_json(args.out, {"scenario_hash": spec.digest(), "passed": passed,
                               "checks": {k: r.to_dict() for k, r in results.items()}})
    return EXIT_OK if passed else EXIT_VALIDATION


# parser


def _positive_float(text):
    x = float(text)
    if not x > 0:
        raise argparse.ArgumentTypeError("must be positive")
    return x


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.RawDescriptionHelpFormatter
    parser = argparse.ArgumentParser(
        prog="ctmsm", formatter_class=fmt, epilog=EXIT_CODES_HELP,
        description="Simulate cohorts, fit weighted additive hazard models and "
                    "run validation experiments.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate a cohort event log",
                       formatter_class=fmt, epilog=EXIT_CODES_HELP)
    p.add_argument("--config", required=True, help="scenario file")
    p.add_argument("--n", type=int, required=True, help="number of subjects")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--measure", choices=sorted(MEASURES), default="obs")
    p.add_argument("--out", required=True, help="event-log path (metadata goes to OUT.meta.json)")
    p.add_argument("--keep-latent", action="store_true",
                   help="also write the post-censoring continuation to OUT.latent")
    p.add_argument("--grid-step", type=_positive_float, default=None,
                   help="projection grid step (trial measure only)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="fit the additive hazard model",
                       formatter_class=fmt, epilog=EXIT_CODES_HELP)
    p.add_argument("--cohort", required=True, help="event log")
    p.add_argument("--config", required=True, help="scenario file")
    p.add_argument("--weights", choices=("stabilized", "unit"), default="stabilized")
    p.add_argument("--grid-step", type=_positive_float, default=None)
    p.add_argument("--out", required=True, help="CSV of time,b0,b1 (report goes to OUT.report.json)")
    p.add_argument("--truncate-q", type=float, default=None,
                   help="cap final weights at this quantile and its mirror")
    p.add_argument("--boot", type=int, default=0, help="bootstrap replicates for SE columns")
    p.add_argument("--boot-seed", type=int, default=0)
    p.add_argument("--empty-group", choices=EMPTY_GROUP_POLICIES, default="skip",
                   help="handling of deaths while the treated risk set is empty")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("nelson-aalen", help="Nelson-Aalen cumulative hazard",
                       formatter_class=fmt, epilog=EXIT_CODES_HELP)
    p.add_argument("--cohort", required=True)
    p.add_argument("--group", choices=GROUPS, default="all")
    p.add_argument("--out", required=True, help="CSV of time,cumhaz,variance")
    p.set_defaults(func=cmd_nelson_aalen)

    p = sub.add_parser("validate", help="run validation experiments",
                       formatter_class=fmt, epilog=EXIT_CODES_HELP)
    p.add_argument("--config", required=True)
    p.add_argument("--m", type=int, required=True, help="subjects per simulated cohort")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--check", choices=("bias", "censoring", "com", "martingale", "all"),
                   default="all")
    p.add_argument("--boot", type=int, default=100, help="bootstrap replicates (bias check)")
    p.add_argument("--grid-step", type=_positive_float, default=None)
    p.add_argument("--out", default=None, help="JSON report path")
    p.set_defaults(func=cmd_validate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if getattr(args, "boot", 0) and args.boot < 2:
            raise CliError("--boot needs at least 2 replicates", EXIT_CONFIG)
        return args.func(args)
    except CliError as err:
        print(f"error: {err}", file=sys.stderr)
        return err.code
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (DegenerateWeightError, DegenerateProjectionError, NumericalError) as err:
        where = ""
        if getattr(err, "subject_id", None) is not None:
            where = f" (subject {err.subject_id}, t={err.time})"
        print(f"degenerate: {err}{where}", file=sys.stderr)
        return EXIT_DEGENERATE
    except TieError as err:
        print(f"ties: {err}", file=sys.stderr)
        return EXIT_TIES
    except (EventLogError, OSError) as err:
        print(f"i/o error: {err}", file=sys.stderr)
        return EXIT_IO
    except ContractError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
