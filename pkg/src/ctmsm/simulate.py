"""Exact event-driven simulation under the observational and trial measures.

Subjects are simulated with competing exponential clocks on the composite
state (health, treated, alive, uncensored). Under the randomized-trial
measure the treatment and censoring clocks follow deterministic projected
rate curves; those are sampled by thinning against the curve maximum, so
no time discretisation enters anywhere.
"""

from __future__ import annotations

import bisect
import json
import math
import os
from dataclasses import dataclass

import numpy as np

from .core import (EVENT_CODES, Cohort, ContractError, EventKind, EventRecord,
                   Measure, SubjectPath, health_state_at, history_table)
from .filters import ProjectionCurves, projection_curves
from .scenario import ScenarioSpec


class SimulationError(RuntimeError):
    """Internal inconsistency during simulation."""


def subject_stream(seed: int, subject_id: int) -> np.random.Generator:
    """Independent RNG stream for one subject, keyed by ``(seed, subject_id)``."""
    ss = np.random.SeedSequence(entropy=seed & (2**64 - 1), spawn_key=(subject_id,))
    return np.random.Generator(np.random.PCG64(ss))


class _Uniforms:
    """Buffered uniform draws from a generator."""

    __slots__ = ("_rng", "_buf", "_i")

    def __init__(self, rng, block=32):
        self._rng = rng
        self._buf = rng.random(block).tolist()
        self._i = 0

    def __call__(self):
        if self._i == len(self._buf):
            self._buf = self._rng.random(len(self._buf)).tolist()
            self._i = 0
        u = self._buf[self._i]
        self._i += 1
        return u


class _Tables:
    """Plain-Python copies of the scenario rates for the inner loop."""

    def __init__(self, spec: ScenarioSpec):
        k = spec.n_states
        self.k = k
        self.init_cdf = np.cumsum(spec.init_dist).tolist()
        self.moves = []
        self.out = []
        for q in (spec.generator_untreated, spec.generator_treated):
            moves = [[(j, float(q[i, j])) for j in range(k) if j != i and q[i, j] > 0]
                     for i in range(k)]
            self.moves.append(moves)
            self.out.append([sum(r for _, r in m) for m in moves])
        self.a = spec.treat_rate.tolist()
        self.c = spec.censor_rate.tolist()
        self.d = spec.death_base.tolist()
        self.beta = spec.death_treat_effect
        self.horizon = spec.horizon


class _CurveLookup:
    """Scalar evaluation of the projection curves."""

    def __init__(self, curves: ProjectionCurves):
        self.grid = curves.grid.tolist()
        self.step = float(curves.grid[1] - curves.grid[0])
        self.n = len(self.grid) - 1
        self.h = curves.treatment.values.tolist()
        self.cu = curves.censor_untreated.values.tolist()
        self.family = curves.censor_treated
        self.h_max = curves.treatment.maximum
        self.cu_max = curves.censor_untreated.maximum
        self.ct_max = curves.censor_treated.maximum

    def _locate(self, t):
        j = min(int(t / self.step), self.n - 1)
        return j, (t - self.grid[j]) / self.step

    def treatment(self, t):
        j, w = self._locate(t)
        return (1 - w) * self.h[j] + w * self.h[j + 1]

    def censor_untreated(self, t):
        j, w = self._locate(t)
        return (1 - w) * self.cu[j] + w * self.cu[j + 1]

    def censor_treated(self, t_a, t):
        return float(self.family(t_a, t))


def _initial_state(tab, u):
    return min(bisect.bisect_right(tab.init_cdf, u), tab.k - 1)


def simulate_subject(spec: ScenarioSpec, subject_id: int, rng: np.random.Generator,
                     measure: Measure = Measure.Observational,
                     curves: ProjectionCurves | None = None,
                     keep_latent: bool = False, *, _tables=None,
                     _lookup=None) -> SubjectPath:
    """Simulate one subject path.

    ``curves`` must be given exactly when ``measure`` is the randomized trial.
    With ``keep_latent`` the history after censoring is continued with the
    censoring clock removed and stored in ``latent_events``.
    """
    if measure is Measure.RandomizedTrial and curves is None:
        raise ContractError("the randomized-trial measure needs projection curves")
    if measure is Measure.Observational and curves is not None:
        raise ContractError("projection curves are only used under the trial measure")
    tab = _tables or _Tables(spec)
    look = None
    if curves is not None:
        look = _lookup or _CurveLookup(curves)
    rct = look is not None
    unif = _Uniforms(rng)

    l0 = _initial_state(tab, unif())
    l = l0
    treated = 0
    t_a = None
    censored = False
    t = 0.0
    events: list[EventRecord] = []
    latent: list[EventRecord] = []
    horizon = tab.horizon

    while True:
        r_move = tab.out[treated][l]
        r_death = tab.d[l] + tab.beta * treated
        # dominating rates; exact for the observational measure
        if treated:
            r_treat = 0.0
        else:
            r_treat = look.h_max if rct else tab.a[l]
        if censored:
            r_cens = 0.0
        elif rct:
            r_cens = look.ct_max if treated else look.cu_max
        else:
            r_cens = tab.c[l]
        total = r_move + r_death + r_treat + r_cens
        if total <= 0:
            break
        t += -math.log(1.0 - unif()) / total
        if t > horizon:
            break
        pick = unif() * total
        sink = latent if censored else events
        if pick < r_move:
            for j, r in tab.moves[treated][l]:
                if pick < r:
                    break
                pick -= r
            l = j
            sink.append(EventRecord(subject_id, t, EventKind.HealthJump, l))
            continue
        pick -= r_move
        if pick < r_death:
            sink.append(EventRecord(subject_id, t, EventKind.Death))
            break
        pick -= r_death
        if pick < r_treat:
            if rct:
                actual = look.treatment(t)
                if actual > r_treat * (1 + 1e-12):
                    raise SimulationError("treatment curve exceeds its thinning bound")
                if pick >= actual:
                    continue
            treated = 1
            t_a = t
            sink.append(EventRecord(subject_id, t, EventKind.TreatmentStart))
            continue
        pick -= r_treat
        if rct:
            actual = look.censor_treated(t_a, t) if treated else look.censor_untreated(t)
            if actual > r_cens * (1 + 1e-12):
                raise SimulationError("censoring curve exceeds its thinning bound")
            if pick >= actual:
                continue
        events.append(EventRecord(subject_id, t, EventKind.Censor))
        censored = True
        if not keep_latent:
            break
    return SubjectPath(subject_id, l0, tuple(events), horizon, tuple(latent))


@dataclass(frozen=True)
class SimulationRequest:
    spec: ScenarioSpec
    n_subjects: int
    seed: int
    measure: Measure = Measure.Observational
    keep_latent: bool = False
    grid_step: float | None = None

    def __post_init__(self):
        if self.n_subjects < 1:
            raise ContractError("n_subjects must be at least 1")


def simulate_cohort(request: SimulationRequest,
                    curves: ProjectionCurves | None = None) -> Cohort:
    """Simulate ``n_subjects`` independent paths.

    Subject ``i`` draws from ``subject_stream(seed, i)``, so the output does
    not depend on the order in which subjects are generated.
    """
    spec = request.spec
    if request.measure is Measure.RandomizedTrial:
        if curves is None:
            curves = projection_curves(spec, request.grid_step)
    else:
        curves = None
    tab = _Tables(spec)
    look = _CurveLookup(curves) if curves is not None else None
    paths = tuple(
        simulate_subject(spec, i, subject_stream(request.seed, i), request.measure,
                         curves, request.keep_latent, _tables=tab, _lookup=look)
        for i in range(request.n_subjects))
    return Cohort(paths, spec.digest(), request.measure)


def simulation_metadata(request: SimulationRequest) -> dict:
    return {
        "seed": request.seed,
        "measure": request.measure.value,
        "n_subjects": request.n_subjects,
        "keep_latent": request.keep_latent,
        "grid_step": request.grid_step,
        "scenario_hash": request.spec.digest(),
    }


def write_metadata(path: str | os.PathLike, meta: dict) -> None:
    with open(path, "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


# diagnostics

def martingale_residuals(cohort: Cohort, spec: ScenarioSpec, grid,
                         latent: bool = False) -> dict:
    """Cohort mean and standard error of ``N_t - compensator_t`` per process.

    Residuals use the observational full intensities, so each is a mean-zero
    martingale under that measure. With ``latent`` the treatment, death and
    health processes are followed past censoring (paths simulated with
    ``keep_latent``); censoring always uses the observed history.
    """
    grid = np.asarray(grid, dtype=float)
    m = len(cohort)
    out_rates = np.stack([-np.diag(spec.generator_untreated),
                          -np.diag(spec.generator_treated)])
    death = np.stack([spec.death_base, spec.death_base + spec.death_treat_effect])
    observed = history_table(cohort)
    full = history_table(cohort, latent=True) if latent else observed
    rate_of = {
        "A": lambda h, a: np.where(a == 0, spec.treat_rate[h], 0.0),
        "C": lambda h, a: spec.censor_rate[h],
        "D": lambda h, a: death[a, h],
        "L": lambda h, a: out_rates[a, h],
    }
    result = {}
    for code, kind in enumerate(EVENT_CODES):
        name = kind.value
        tab = observed if name == "C" else full
        exposure = np.clip(np.minimum(tab.seg_end[:, None], grid[None, :])
                           - tab.seg_start[:, None], 0.0, None)
        comp = exposure * rate_of[name](tab.seg_health, tab.seg_treated)[:, None]
        res = np.zeros((m, len(grid)))
        np.add.at(res, tab.seg_row, -comp)
        hit = tab.ev_kind == code
        counts = (tab.ev_time[hit][:, None] <= grid[None, :]).astype(float)
        np.add.at(res, tab.ev_row[hit], counts)
        result[name] = (res.mean(axis=0), res.std(axis=0, ddof=1) / math.sqrt(m))
    return result


def latent_health(cohort: Cohort, t: float) -> np.ndarray:
    """Health state at ``t`` for every subject still alive in the latent path
    (``-1`` where the subject has died or is unobservable)."""
    out = np.full(len(cohort), -1)
    for i, p in enumerate(cohort):
        try:
            out[i] = health_state_at(p, t, latent=True)
        except ContractError:
            pass
    return out
