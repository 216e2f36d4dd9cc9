"""Continuous-time likelihood-ratio (stabilised weight) process.

For one subject the weight is a treatment factor times a censoring factor,

    R_t = (h(T_A) / a[L_{T_A-}])^{1(T_A <= t)} exp(int_0^{t ^ T_A} a[L_s] - h ds)
        * (c~(T_C) / c[L_{T_C-}])^{1(T_C <= t)} exp(int_0^t c[L_s] - c~ ds),

where ``h`` and ``c~`` are the projected (marginal) rates. This is the
explicit solution of ``R = 1 + int R_- dK`` with
``K = int (lambda~/lambda - 1) dM``; the compensator enters with the sign
``lambda - lambda~``, which is what makes ``R`` mean-one. The treatment
factor is frozen after treatment starts and the censoring factor after the
subject leaves observation, since both processes are one-shot.

Integrals of the subject's own rates are exact (they are piecewise constant
between health jumps); integrals of the projection curves integrate their
linear interpolants exactly, which is trapezoid quadrature on the grid.
"""

from __future__ import annotations

import csv
import json
import math
import os
from collections.abc import Sequence
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .core import Cohort, ContractError, SubjectPath
from .filters import ProjectionCurves, projection_curves
from .scenario import ScenarioSpec


class DegenerateWeightError(ArithmeticError):
    """A weight ratio is zero or unbounded at an observed jump."""

    def __init__(self, message, subject_id=None, time=None):
        super().__init__(message)
        self.subject_id = subject_id
        self.time = time


def _state_before(path: SubjectPath, t: float) -> int:
    state = path.initial_health
    times, states = path.health_jumps
    k = np.searchsorted(times, t, side="left")
    return int(states[k - 1]) if k > 0 else state


def _build_params(paths, spec: ScenarioSpec, curves: ProjectionCurves):
    n = len(paths)
    a, c = spec.treat_rate, spec.censor_rate
    m_max = max((len(p.health_jumps[0]) for p in paths), default=0)
    m_max = max(m_max, 1)
    jt = np.full((n, m_max), np.inf)
    d_a = np.zeros((n, m_max))
    d_c = np.zeros((n, m_max))
    a0 = np.empty(n)
    c0 = np.empty(n)
    ta = np.full(n, np.inf)
    tc = np.full(n, np.inf)
    stop = np.empty(n)
    log_ja = np.zeros(n)
    log_jc = np.zeros(n)
    for i, p in enumerate(paths):
        times, states = p.health_jumps
        prev = np.concatenate([[p.initial_health], states[:-1]]).astype(int)
        jt[i, :len(times)] = times
        d_a[i, :len(times)] = a[states] - a[prev]
        d_c[i, :len(times)] = c[states] - c[prev]
        a0[i] = a[p.initial_health]
        c0[i] = c[p.initial_health]
        stop[i] = p.exit_time
        if p.treatment_time is not None:
            t = p.treatment_time
            full = a[_state_before(p, t)]
            proj = float(curves.treatment(t))
            if full <= 0 or proj <= 0:
                raise DegenerateWeightError(
                    f"subject {p.subject_id}: treatment ratio {proj}/{full} at "
                    f"t={t} is degenerate", p.subject_id, t)
            ta[i] = t
            log_ja[i] = math.log(proj) - math.log(full)
        if p.censor_time is not None:
            t = p.censor_time
            full = c[_state_before(p, t)]
            if p.treatment_time is not None and p.treatment_time < t:
                proj = float(curves.censor_treated(p.treatment_time, t))
            else:
                proj = float(curves.censor_untreated(t))
            if full <= 0 or proj <= 0:
                raise DegenerateWeightError(
                    f"subject {p.subject_id}: censoring ratio {proj}/{full} at "
                    f"t={t} is degenerate", p.subject_id, t)
            tc[i] = t
            log_jc[i] = math.log(proj) - math.log(full)
    return dict(jt=jt, d_a=d_a, d_c=d_c, a0=a0, c0=c0, ta=ta, tc=tc, stop=stop,
                log_ja=log_ja, log_jc=log_jc)


def _own_rate_integral(rate0, jump_times, deltas, t):
    """Integral over [0, t] of a subject's piecewise-constant rate."""
    out = rate0 * t
    for m in range(jump_times.shape[-1]):
        out = out + deltas[..., m:m + 1] * np.maximum(t - jump_times[..., m:m + 1], 0.0)
    return out


def _compensator_log(p, curves: ProjectionCurves, t):
    """Log of the exponential (compensator) part of the weight at ``t``."""
    s = np.minimum(t, p["stop"])
    u = np.minimum(s, p["ta"])
    log_r = (_own_rate_integral(p["a0"], p["jt"], p["d_a"], u)
             + _own_rate_integral(p["c0"], p["jt"], p["d_c"], s)
             - curves.treatment.integral(u) - curves.censor_untreated.integral(u))
    treated = s > p["ta"]
    if np.any(treated):
        ta_b = np.broadcast_to(p["ta"], s.shape)
        safe_ta = np.where(treated, ta_b, 0.0)
        post = curves.censor_treated.integral(safe_ta, np.where(treated, s, 0.0))
        log_r = log_r - np.where(treated, post, 0.0)
    return log_r


def _jump_log(p, t, left):
    if left:
        return np.where(t > p["ta"], p["log_ja"], 0.0) + np.where(t > p["tc"], p["log_jc"], 0.0)
    return np.where(t >= p["ta"], p["log_ja"], 0.0) + np.where(t >= p["tc"], p["log_jc"], 0.0)


class CohortWeights(Sequence):
    """Likelihood-ratio processes for every subject of a cohort.

    Evaluation is vectorised over subjects and times; ``left=True`` gives the
    left limits ``R_{t-}`` used by the estimator.
    """

    def __init__(self, cohort: Cohort, spec: ScenarioSpec, curves: ProjectionCurves,
                 truncate_q: float | None = None):
        if not np.isclose(curves.grid[-1], spec.horizon):
            raise ContractError("projection curves do not cover the scenario horizon")
        if truncate_q is not None and not 0.5 < truncate_q < 1:
            raise ContractError("truncation quantile must lie in (0.5, 1)")
        self.cohort = cohort
        self.spec = spec
        self.curves = curves
        self.truncate_q = truncate_q
        self.subject_ids = cohort.arrays.subject_id
        self._params = _build_params(cohort.paths, spec, curves)
        self._bounds = None
        if truncate_q is not None:
            final = self._raw(np.array([spec.horizon]), left=False)[:, 0]
            self._bounds = (float(np.quantile(final, 1 - truncate_q)),
                            float(np.quantile(final, truncate_q)))

    def __len__(self):
        return len(self.subject_ids)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return [self[j] for j in range(*i.indices(len(self)))]
        if i < 0:
            i += len(self)
        if not 0 <= i < len(self):
            raise IndexError(i)
        return WeightProcess(self, i)

    def _block(self, rows):
        p = {}
        for k, v in self._params.items():
            v = v[rows]
            p[k] = v[:, None] if v.ndim == 1 else v
        return p

    def log_weights(self, times, left=True, rows=slice(None)):
        """``log R`` on a ``(subjects, times)`` grid (no truncation)."""
        p = self._block(rows)
        t = np.asarray(times, dtype=float)[None, :]
        return _compensator_log(p, self.curves, t) + _jump_log(p, t, left)

    def _raw(self, times, left=True, rows=slice(None)):
        return np.exp(self.log_weights(times, left, rows))

    def evaluate_pairs(self, rows, times, left=False):
        """Weight of subject ``rows[k]`` at ``times[k]`` for each ``k``."""
        rows = np.asarray(rows, dtype=int)
        if len(rows) == 0:
            return np.zeros(0)
        p = self._block(rows)
        t = np.asarray(times, dtype=float)[:, None]
        w = np.exp(_compensator_log(p, self.curves, t) + _jump_log(p, t, left))[:, 0]
        if self._bounds is not None:
            w = np.clip(w, *self._bounds)
        return w

    def evaluate(self, times, left=False, rows=slice(None)):
        """Weights on a ``(subjects, times)`` grid, truncated if configured."""
        w = self._raw(times, left, rows)
        if self._bounds is not None:
            w = np.clip(w, *self._bounds)
        return w

    def risk_set_windows(self, times, rows=None):
        """Left-limit weights of each subject over its own risk window.

        ``times`` must be sorted. For each subject yields
        ``(row, k_untreated, k_exit, w)`` where ``w`` holds ``R_{t-}`` at
        ``times[:k_exit]`` (the times at which the subject is at risk) and the
        first ``k_untreated`` of those precede or equal treatment start.
        """
        times = np.asarray(times, dtype=float)
        curves = self.curves
        g = curves.treatment.integral(times) + curves.censor_untreated.integral(times)
        p = self._params
        horizon = self.spec.horizon
        rows = range(len(self)) if rows is None else rows
        for i in rows:
            k_exit = int(np.searchsorted(times, p["stop"][i], side="right"))
            ta = p["ta"][i]
            k_untr = min(k_exit, int(np.searchsorted(times, ta, side="right")))
            tau = times[:k_exit]
            jumps = p["jt"][i]
            jumps = jumps[np.isfinite(jumps)]
            knots = np.concatenate([[0.0], jumps, [max(horizon, jumps[-1] if len(jumps) else 0.0)]])
            seg = np.diff(knots)
            rate_a = p["a0"][i] + np.concatenate([[0.0], np.cumsum(p["d_a"][i, :len(jumps)])])
            rate_c = p["c0"][i] + np.concatenate([[0.0], np.cumsum(p["d_c"][i, :len(jumps)])])
            cum_a = np.concatenate([[0.0], np.cumsum(rate_a * seg)])
            cum_c = np.concatenate([[0.0], np.cumsum(rate_c * seg)])
            log_r = np.interp(np.minimum(tau, ta), knots, cum_a) + np.interp(tau, knots, cum_c)
            log_r[:k_untr] -= g[:k_untr]
            if k_untr < k_exit:
                g_ta = float(curves.treatment.integral(ta)
                             + curves.censor_untreated.integral(ta))
                post = curves.censor_treated.integral(ta, tau[k_untr:])
                log_r[k_untr:] -= g_ta + post - p["log_ja"][i]
            w = np.exp(log_r)
            if self._bounds is not None:
                w = np.clip(w, *self._bounds)
            yield i, k_untr, k_exit, w

    def final(self) -> np.ndarray:
        """``R_T`` for every subject (frozen at its exit time)."""
        return self.evaluate(np.array([self.spec.horizon]), left=False)[:, 0]

    @property
    def truncation_bounds(self):
        return self._bounds

    def to_csv(self, path: str | os.PathLike) -> None:
        """Write ``subject,time,weight`` rows at every subject's knots."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["subject", "time", "weight"])
            for proc in self:
                for t, v in zip(proc.knots, proc.values):
                    w.writerow([proc.subject_id, f"{t:.9f}", repr(float(v))])


@dataclass(frozen=True)
class WeightProcess:
    """Weight trajectory of one subject, a view into :class:`CohortWeights`."""

    owner: CohortWeights = field(repr=False)
    index: int

    @property
    def subject_id(self) -> int:
        return int(self.owner.subject_ids[self.index])

    @property
    def final_time(self) -> float:
        return float(self.owner._params["stop"][self.index])

    @cached_property
    def knots(self) -> np.ndarray:
        path = self.owner.cohort.paths[self.index]
        grid = self.owner.curves.grid
        ev = [e.time for e in path.events]
        return np.unique(np.concatenate([grid[grid <= self.final_time], ev,
                                         [self.final_time]]))

    @cached_property
    def values(self) -> np.ndarray:
        return self(self.knots)

    def __call__(self, t, left=False):
        t = np.atleast_1d(np.asarray(t, dtype=float))
        sl = slice(self.index, self.index + 1)
        return self.owner.evaluate(t, left=left, rows=sl)[0]


def compute_weights(cohort: Cohort, spec: ScenarioSpec, curves: ProjectionCurves,
                    truncate_q: float | None = None) -> CohortWeights:
    return CohortWeights(cohort, spec, curves, truncate_q)


def likelihood_ratio_path(path: SubjectPath, spec: ScenarioSpec,
                          curves: ProjectionCurves) -> WeightProcess:
    """Weight process of a single subject."""
    return CohortWeights(Cohort((path,)), spec, curves)[0]


# diagnostics

@dataclass
class WeightDiagnostics:
    grid: np.ndarray
    mean: np.ndarray
    se: np.ndarray
    quantiles: dict
    ess: float
    ess_fraction: float
    n_subjects: int
    truncation: dict | None = None

    @property
    def z(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            z = (self.mean - 1.0) / self.se
        return np.where(self.se > 0, z, np.where(self.mean == 1.0, 0.0, np.inf))

    def martingale_ok(self, n_se: float = 4.0) -> bool:
        return bool(np.all(np.abs(self.mean - 1.0) <= n_se * self.se + 1e-12))

    def to_dict(self) -> dict:
        return {
            "grid": self.grid.tolist(),
            "mean": self.mean.tolist(),
            "se": self.se.tolist(),
            "quantiles_at_horizon": self.quantiles,
            "ess": self.ess,
            "ess_fraction": self.ess_fraction,
            "n_subjects": self.n_subjects,
            "truncation": self.truncation,
        }

    def to_json(self, path: str | os.PathLike) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


_QUANTILES = (0.0, 0.01, 0.05, 0.25, 0.5, 0.75, 0.95, 0.99, 1.0)


def weight_diagnostics(weights: CohortWeights, grid=None, block=4096) -> WeightDiagnostics:
    """Mean-one check, spread and effective sample size of the weights."""
    if grid is None:
        grid = np.linspace(0.0, weights.spec.horizon, 21)
    grid = np.asarray(grid, dtype=float)
    n = len(weights)
    s1 = np.zeros(len(grid))
    s2 = np.zeros(len(grid))
    for start in range(0, n, block):
        w = weights.evaluate(grid, left=False, rows=slice(start, start + block))
        s1 += w.sum(axis=0)
        s2 += (w * w).sum(axis=0)
    mean = s1 / n
    var = np.maximum(s2 / n - mean**2, 0.0) * n / max(n - 1, 1)
    se = np.sqrt(var / n)
    # exact unit weights have zero spread; suppress rounding noise
    se = np.where(var <= 1e-24, 0.0, se)
    final = weights.final()
    ess = float(final.sum() ** 2 / (final**2).sum())
    trunc = None
    if weights.truncation_bounds is not None:
        raw = weights._raw(np.array([weights.spec.horizon]), left=False)[:, 0]
        lo, hi = weights.truncation_bounds
        trunc = {"quantile": weights.truncate_q, "lower": lo, "upper": hi,
                 "n_capped_low": int((raw < lo).sum()),
                 "n_capped_high": int((raw > hi).sum())}
    return WeightDiagnostics(
        grid=grid, mean=mean, se=se,
        quantiles={str(q): float(np.quantile(final, q)) for q in _QUANTILES},
        ess=ess, ess_fraction=ess / n, n_subjects=n, truncation=trunc)


class StabilizedWeights(BaseEstimator, TransformerMixin):
    """Transformer-style interface: ``fit`` builds the projection curves for a
    scenario, ``transform`` turns a cohort into its weight processes.

    Parameters
    ----------
    spec : ScenarioSpec
        Scenario whose rates define the observational intensities.
    grid_step : float, optional
        Step of the projection-curve grid.
    truncate_q : float, optional
        Upper quantile at which final weights are capped (symmetric below).
    """

    def __init__(self, spec=None, grid_step=None, truncate_q=None):
        self.spec = spec
        self.grid_step = grid_step
        self.truncate_q = truncate_q

    def fit(self, X=None, y=None):
        if not isinstance(self.spec, ScenarioSpec):
            raise ContractError("StabilizedWeights needs a ScenarioSpec")
        if X is not None and not isinstance(X, Cohort):
            raise TypeError(f"expected a Cohort, got {type(X).__name__}")
        self.curves_ = projection_curves(self.spec, self.grid_step)
        return self

    def transform(self, X) -> CohortWeights:
        check_is_fitted(self, "curves_")
        if not isinstance(X, Cohort):
            raise TypeError(f"expected a Cohort, got {type(X).__name__}")
        return CohortWeights(X, self.spec, self.curves_, self.truncate_q)

