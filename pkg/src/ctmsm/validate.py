"""End-to-end Monte Carlo experiments.

Every check simulates its own cohorts from seeds derived from the caller's
seed, so reports are deterministic and checks share no state. A difference
passes when it lies within ``Z_THRESHOLD`` standard errors at every point of
a 21-point grid on ``[0, T]``.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np
from scipy import stats

from .core import (EVENT_CODES, Cohort, ContractError, EventKind, Measure,
                   history_table)
from .estimate import aalen_fit, bootstrap_band, nelson_aalen
from .filters import NotExactError, oracle_marginal_hazards, projection_curves
from .scenario import (LocalIndependenceGraph, ScenarioSpec, check_positivity,
                       expected_naive_bias)
from .simulate import SimulationRequest, simulate_cohort
from .weights import CohortWeights, weight_diagnostics

Z_THRESHOLD = 4.0
GRID_POINTS = 21

# sub-seed tags
_OBS, _RCT, _BOOT, _ALT = 0, 1, 2, 3


def derive_seed(seed: int, tag: int) -> int:
    """Deterministic, well-separated child seed."""
    ss = np.random.SeedSequence([seed & (2**64 - 1), tag])
    return int(ss.generate_state(1, np.uint64)[0] >> np.uint64(1))


def default_grid(horizon: float) -> np.ndarray:
    return np.linspace(0.0, horizon, GRID_POINTS)


def _z(diff, se):
    diff, se = np.asarray(diff, float), np.asarray(se, float)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = diff / se
    return np.where(se > 0, z, np.where(np.abs(diff) <= 1e-12, 0.0, np.inf))


def _jsonable(x):
    if isinstance(x, np.ndarray):
        return np.where(np.isfinite(x), x, np.nan).tolist() if x.dtype.kind == "f" else x.tolist()
    if isinstance(x, (np.floating, np.integer, np.bool_)):
        return x.item()
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    return x


def write_report(report, path: str | os.PathLike) -> None:
    with open(path, "w") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True, allow_nan=True)
        fh.write("\n")


@dataclass
class Comparison:
    """Pointwise comparison of an estimate with a reference on a grid."""

    name: str
    grid: np.ndarray
    diff: np.ndarray
    se: np.ndarray
    enforced: bool = True

    @property
    def z(self) -> np.ndarray:
        return _z(self.diff, self.se)

    @property
    def max_abs_z(self) -> float:
        return float(np.max(np.abs(self.z)))

    @property
    def sup_distance(self) -> np.ndarray:
        return np.max(np.abs(self.diff), axis=0)

    @property
    def within_noise(self) -> bool:
        return bool(np.all(np.abs(self.diff) <= Z_THRESHOLD * self.se + 1e-12))

    def to_dict(self) -> dict:
        return _jsonable({
            "name": self.name, "grid": self.grid, "diff": self.diff, "se": self.se,
            "z": self.z, "max_abs_z": self.max_abs_z,
            "sup_distance": self.sup_distance, "within_noise": self.within_noise,
            "enforced": self.enforced,
        })


# bias experiment

@dataclass
class BiasReport:
    spec_digest: str
    m: int
    seed: int
    grid: np.ndarray
    estimates: dict
    standard_errors: dict
    comparisons: list
    oracle_exact: bool
    naive_direction: int | None
    naive_shift: float
    naive_z: float
    naive_ok: bool | None
    skipped_events: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        checks = [c.within_noise for c in self.comparisons if c.enforced]
        if self.naive_ok is not None:
            checks.append(self.naive_ok)
        return all(checks)

    def comparison(self, name) -> Comparison:
        return next(c for c in self.comparisons if c.name == name)

    def to_dict(self) -> dict:
        return _jsonable({
            "check": "bias", "passed": self.passed, "scenario_hash": self.spec_digest,
            "m": self.m, "seed": self.seed, "grid": self.grid,
            "estimates": self.estimates, "standard_errors": self.standard_errors,
            "comparisons": [c.to_dict() for c in self.comparisons],
            "oracle_exact": self.oracle_exact,
            "naive_direction_expected": self.naive_direction,
            "naive_shift_b1_at_horizon": self.naive_shift,
            "naive_z_b1_at_horizon": self.naive_z, "naive_ok": self.naive_ok,
            "skipped_events": self.skipped_events,
        })

    def to_csv(self, path: str | os.PathLike) -> None:
        """Estimates on the grid, one column per estimator and component."""
        names = list(self.estimates)
        cols = ["time"] + [f"{n}_b{k}" for n in names for k in (0, 1)]
        with open(path, "w") as fh:
            fh.write(",".join(cols) + "\n")
            for g, t in enumerate(self.grid):
                vals = [repr(float(self.estimates[n][g, k])) for n in names for k in (0, 1)]
                fh.write(",".join([repr(float(t))] + vals) + "\n")


def run_bias_experiment(spec: ScenarioSpec, m: int, seed: int, step: float | None = None,
                        n_boot: int = 100, naive_direction: int | None = None,
                        grid=None) -> BiasReport:
    """Naive, weighted and trial-cohort Aalen fits against the oracle.

    ``naive_direction`` overrides the direction registered with the
    scenario (+1: naive treatment coefficient biased upward, 0: unbiased).
    """
    report = check_positivity(spec)
    if not report.passed:
        raise ContractError(f"positivity check failed: {report.to_dict()}")
    grid = default_grid(spec.horizon) if grid is None else np.asarray(grid, float)
    curves = projection_curves(spec, step)
    obs = simulate_cohort(SimulationRequest(spec, m, derive_seed(seed, _OBS)))
    rct = simulate_cohort(SimulationRequest(spec, m, derive_seed(seed, _RCT),
                                            Measure.RandomizedTrial), curves)
    weights = CohortWeights(obs, spec, curves)
    fits = {"naive": aalen_fit(obs), "weighted": aalen_fit(obs, weights),
            "rct": aalen_fit(rct)}
    boot_seed = derive_seed(seed, _BOOT)
    se = {
        "naive": bootstrap_band(obs, None, n_boot, boot_seed, grid).se,
        "weighted": bootstrap_band(obs, weights, n_boot, boot_seed, grid).se,
        "rct": bootstrap_band(rct, None, n_boot, boot_seed, grid).se,
    }
    est = {k: f(grid) for k, f in fits.items()}
    try:
        oracle = oracle_marginal_hazards(spec, step)
        est["oracle"] = oracle(grid)
        se["oracle"] = np.zeros_like(est["oracle"])
        exact = True
    except NotExactError:
        exact = False

    comps = [Comparison("weighted_vs_rct", grid, est["weighted"] - est["rct"],
                        np.hypot(se["weighted"], se["rct"]), enforced=not exact)]
    if exact:
        comps += [
            Comparison("weighted_vs_oracle", grid, est["weighted"] - est["oracle"],
                       se["weighted"]),
            Comparison("rct_vs_oracle", grid, est["rct"] - est["oracle"], se["rct"]),
        ]
        ref, ref_se = est["oracle"], se["oracle"]
    else:
        ref, ref_se = est["rct"], se["rct"]
    direction = expected_naive_bias(spec) if naive_direction is None else naive_direction
    naive_cmp = Comparison("naive_vs_reference", grid, est["naive"] - ref,
                           np.hypot(se["naive"], ref_se), enforced=False)
    comps.append(naive_cmp)
    shift = float(naive_cmp.diff[-1, 1])
    z_end = float(naive_cmp.z[-1, 1])
    if direction is None:
        naive_ok = None
    elif direction == 0:
        naive_ok = naive_cmp.within_noise
    else:
        naive_ok = bool(abs(z_end) > Z_THRESHOLD and np.sign(shift) == direction)
    return BiasReport(
        spec_digest=spec.digest(), m=m, seed=seed, grid=grid, estimates=est,
        standard_errors=se, comparisons=comps, oracle_exact=exact,
        naive_direction=direction, naive_shift=shift, naive_z=z_end, naive_ok=naive_ok,
        skipped_events={k: len(f.skipped_events) for k, f in fits.items()},
    )


# independent censoring

@dataclass
class CensoringReport:
    spec_digest: str
    measure: Measure
    m: int
    seed: int
    comparisons: list

    @property
    def passed(self) -> bool:
        return all(c.within_noise for c in self.comparisons)

    def to_dict(self) -> dict:
        return _jsonable({
            "check": "censoring", "passed": self.passed, "scenario_hash": self.spec_digest,
            "measure": self.measure.value, "m": self.m, "seed": self.seed,
            "comparisons": [c.to_dict() for c in self.comparisons],
        })


def independent_censoring_check(spec: ScenarioSpec, m: int, seed: int,
                                measure: Measure = Measure.RandomizedTrial,
                                step: float | None = None, grid=None) -> CensoringReport:
    """Compare arm-specific death hazards with and without censoring.

    Two cohorts are drawn under ``measure``: one from ``spec`` and one with
    every censoring rate set to zero. Censoring is independent when the
    Nelson-Aalen curves of the untreated and treated arms agree.
    """
    grid = default_grid(spec.horizon) if grid is None else np.asarray(grid, float)
    uncensored = spec.replace(censor_rate=np.zeros(spec.n_states))
    cohorts = []
    for s, tag in ((spec, _OBS), (uncensored, _ALT)):
        curves = projection_curves(s, step) if measure is Measure.RandomizedTrial else None
        cohorts.append(simulate_cohort(SimulationRequest(s, m, derive_seed(seed, tag),
                                                         measure), curves))
    comps = []
    for group in ("untreated", "treated"):
        (h1, v1), (h2, v2) = (nelson_aalen(c, group, return_variance=True) for c in cohorts)
        diff = (h1(grid) - h2(grid))[:, None]
        se = np.sqrt(v1(grid) + v2(grid))[:, None]
        comps.append(Comparison(f"{group}_censored_vs_uncensored", grid, diff, se))
    return CensoringReport(spec.digest(), measure, m, seed, comps)


# change of measure

class Functional(NamedTuple):
    """Bounded functional of an observed history, vectorised over a cohort."""

    name: str
    fn: Callable


def functional_library(horizon: float) -> list[Functional]:
    """Indicators of observed survival, treatment and censoring on a grid."""
    out = [Functional("one", lambda a: np.ones(len(a.exit)))]
    for frac in (0.25, 0.5, 0.75, 1.0):
        t = frac * horizon
        out += [
            Functional(f"survival[{t:g}]", lambda a, t=t: (a.death > t).astype(float)),
            Functional(f"treated_by[{t:g}]", lambda a, t=t: (a.treatment <= t).astype(float)),
            Functional(f"censored_by[{t:g}]", lambda a, t=t: (a.censor <= t).astype(float)),
        ]
    half = 0.5 * horizon
    out += [
        Functional(f"treated_before[{half:g}]",
                   lambda a: (a.treatment < half).astype(float)),
        Functional(f"treated_and_alive[{horizon:g}]",
                   lambda a: ((a.treatment <= horizon) & (a.death > horizon)).astype(float)),
    ]
    return out


@dataclass
class ChangeOfMeasureReport:
    spec_digest: str
    m: int
    seed: int
    names: list
    weighted_mean: np.ndarray
    weighted_se: np.ndarray
    trial_mean: np.ndarray
    trial_se: np.ndarray

    @property
    def z(self) -> np.ndarray:
        return _z(self.weighted_mean - self.trial_mean,
                  np.hypot(self.weighted_se, self.trial_se))

    @property
    def passed(self) -> bool:
        return bool(np.all(np.abs(self.z) <= Z_THRESHOLD))

    def to_dict(self) -> dict:
        return _jsonable({
            "check": "com", "passed": self.passed, "scenario_hash": self.spec_digest,
            "m": self.m, "seed": self.seed,
            "functionals": {
                n: {"weighted_mean": self.weighted_mean[k], "weighted_se": self.weighted_se[k],
                    "trial_mean": self.trial_mean[k], "trial_se": self.trial_se[k],
                    "z": self.z[k]}
                for k, n in enumerate(self.names)},
        })


def change_of_measure_check(spec: ScenarioSpec, m: int, seed: int,
                            functionals: Sequence[Functional] | Sequence[str] | None = None,
                            step: float | None = None) -> ChangeOfMeasureReport:
    """Compare ``mean(R_T H)`` on observational data with ``mean(H)`` on trial data."""
    library = functional_library(spec.horizon)
    if functionals is None:
        functionals = library
    else:
        by_name = {f.name: f for f in library}
        try:
            functionals = [by_name[f] if isinstance(f, str) else f for f in functionals]
        except KeyError as err:
            raise ContractError(f"unknown functional {err.args[0]!r}; "
                                f"choose from {sorted(by_name)}") from None
    curves = projection_curves(spec, step)
    obs = simulate_cohort(SimulationRequest(spec, m, derive_seed(seed, _OBS)))
    rct = simulate_cohort(SimulationRequest(spec, m, derive_seed(seed, _RCT),
                                            Measure.RandomizedTrial), curves)
    r_final = CohortWeights(obs, spec, curves).final()
    wm, ws, tm, ts = [], [], [], []
    for f in functionals:
        x = r_final * f.fn(obs.arrays)
        y = f.fn(rct.arrays)
        wm.append(x.mean())
        ws.append(x.std(ddof=1) / math.sqrt(len(x)))
        tm.append(y.mean())
        ts.append(y.std(ddof=1) / math.sqrt(len(y)))
    return ChangeOfMeasureReport(spec.digest(), m, seed, [f.name for f in functionals],
                                 *(np.array(v) for v in (wm, ws, tm, ts)))


# weights

@dataclass
class MartingaleReport:
    spec_digest: str
    m: int
    seed: int
    diagnostics: object

    @property
    def passed(self) -> bool:
        return self.diagnostics.martingale_ok(Z_THRESHOLD)

    def to_dict(self) -> dict:
        return _jsonable({"check": "martingale", "passed": self.passed,
                          "scenario_hash": self.spec_digest, "m": self.m,
                          "seed": self.seed, **self.diagnostics.to_dict(),
                          "z": self.diagnostics.z})


def weight_martingale_check(spec: ScenarioSpec, m: int, seed: int,
                            step: float | None = None) -> MartingaleReport:
    """Mean-one check of ``R_t`` on an observational cohort."""
    obs = simulate_cohort(SimulationRequest(spec, m, derive_seed(seed, _OBS)))
    weights = CohortWeights(obs, spec, projection_curves(spec, step))
    diag = weight_diagnostics(weights, default_grid(spec.horizon))
    return MartingaleReport(spec.digest(), m, seed, diag)


# local independence

_SOURCES = {"L": ("A", "C", "D"), "A": ("C", "D", "L")}


def local_independence_test(cohort: Cohort, source: str, target: str,
                            bins: int = 10) -> tuple[float, int, float]:
    """Score test that ``target``'s intensity does not depend on ``source``.

    Occurrences and exposure times are tabulated by time bin, health state
    and treatment status. Under the null the rate is shared across levels of
    ``source`` within each (time bin, other covariate) cell; the Pearson
    statistic is referred to a chi-square law. Returns
    ``(statistic, df, p_value)``.
    """
    if target not in _SOURCES.get(source, ()):
        raise ContractError(f"cannot test {source}->{target}")
    tab = history_table(cohort)
    edges = np.linspace(0.0, cohort.horizon, bins + 1)
    n_states = int(max(tab.seg_health.max(), tab.ev_health.max(initial=0))) + 1
    exposure = np.zeros((bins, n_states, 2))
    occur = np.zeros_like(exposure)
    keep = tab.seg_treated == 0 if target == "A" else np.ones(len(tab.seg_row), bool)
    for b in range(bins):
        overlap = np.clip(np.minimum(tab.seg_end, edges[b + 1])
                          - np.maximum(tab.seg_start, edges[b]), 0.0, None)
        np.add.at(exposure[b], (tab.seg_health[keep], tab.seg_treated[keep]), overlap[keep])
    code = EVENT_CODES.index(EventKind(target))
    hit = tab.ev_kind == code
    b_idx = np.clip(np.searchsorted(edges, tab.ev_time[hit], side="right") - 1, 0, bins - 1)
    np.add.at(occur, (b_idx, tab.ev_health[hit], tab.ev_treated[hit]), 1.0)
    axis = 1 if source == "L" else 2
    rate = occur.sum(axis=axis, keepdims=True) / np.maximum(
        exposure.sum(axis=axis, keepdims=True), 1e-300)
    expected = exposure * rate
    ok = expected > 0
    stat = float(np.sum((occur[ok] - expected[ok]) ** 2 / expected[ok]))
    levels = (exposure > 0).sum(axis=axis)
    df = int(np.sum(np.maximum(levels - 1, 0)[occur.sum(axis=axis) > 0]))
    p = float(stats.chi2.sf(stat, df)) if df > 0 else 1.0
    return stat, df, p


def empirical_graph(cohort: Cohort, alpha: float = 1e-3, bins: int = 10) -> LocalIndependenceGraph:
    """Edges whose local-independence null is rejected at level ``alpha``."""
    edges = set()
    for src, targets in _SOURCES.items():
        for dst in targets:
            _, df, p = local_independence_test(cohort, src, dst, bins)
            if df > 0 and p < alpha:
                edges.add((src, dst))
    return LocalIndependenceGraph(frozenset(edges))


CHECKS = ("bias", "censoring", "com")
