"""Marginal intensities by exact point-process filtering.

With a finite health chain, the conditional law ``pi(t)`` of the health
state given that none of a set of counting processes has jumped solves

    dpi/dt = pi Q - pi * r + pi (pi . r)

where ``r`` holds the state-wise rates of the processes conditioned on. The
projected intensity of a process with state-wise rate ``x`` is ``pi(t) . x``.
All ODEs are integrated with fixed-step RK4 on a uniform grid and the filter
state is renormalised after every step.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .core import ContractError
from .scenario import ScenarioSpec

DEFAULT_GRID_POINTS = 2000


class NumericalError(ArithmeticError):
    """Raised when an ODE solve produces non-finite values."""


class DegenerateProjectionError(ArithmeticError):
    """Raised when re-conditioning on a jump that has probability zero."""


class NotExactError(ValueError):
    """Raised when no exact additive marginal model exists for a scenario."""


def make_grid(horizon: float, step: float | None = None) -> np.ndarray:
    """Uniform grid on ``[0, horizon]`` with spacing at most ``step``."""
    if step is None:
        n = DEFAULT_GRID_POINTS
    else:
        if not step > 0:
            raise ContractError(f"grid step must be positive, got {step}")
        n = max(1, math.ceil(horizon / step - 1e-9))
    return np.linspace(0.0, horizon, n + 1)


def _rk4(f, y, h):
    k1 = f(y)
    k2 = f(y + 0.5 * h * k1)
    k3 = f(y + 0.5 * h * k2)
    k4 = f(y + h * k3)
    return y + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def _kushner(q, rates):
    def drift(pi):
        return pi @ q - pi * rates + pi * (pi @ rates)[..., None]
    return drift


def _normalise(pi):
    if not np.all(np.isfinite(pi)):
        raise NumericalError("non-finite filter state")
    pi = np.where(pi < 0, np.maximum(pi, 0.0), pi)
    return pi / pi.sum(axis=-1, keepdims=True)


def solve_filter(init, generator, rates, grid) -> np.ndarray:
    """Conditional state law on ``grid`` given no jump of the ``rates`` processes."""
    q = np.asarray(generator, dtype=float)
    r = np.asarray(rates, dtype=float)
    drift = _kushner(q, r)
    h = grid[1] - grid[0]
    out = np.empty((len(grid), len(r)))
    pi = _normalise(np.asarray(init, dtype=float)[None])
    out[0] = pi[0]
    for j in range(1, len(grid)):
        pi = _normalise(_rk4(drift, pi, h))
        out[j] = pi[0]
    return out


@dataclass(frozen=True)
class FilterCurve:
    """Deterministic rate curve, linear between grid points."""

    grid: np.ndarray
    values: np.ndarray
    context: str

    def __post_init__(self):
        if np.any(self.values < 0):
            raise NumericalError(f"{self.context}: negative projected rate")

    @property
    def step(self) -> float:
        return float(self.grid[1] - self.grid[0])

    def __call__(self, t):
        return np.interp(t, self.grid, self.values)

    @cached_property
    def _cumulative(self):
        inc = 0.5 * (self.values[1:] + self.values[:-1]) * np.diff(self.grid)
        return np.concatenate([[0.0], np.cumsum(inc)])

    def integral(self, t):
        """Exact integral of the interpolant over ``[0, t]``."""
        t = np.asarray(t, dtype=float)
        n = len(self.grid) - 1
        j = np.clip(np.floor(t / self.step).astype(np.int64), 0, n - 1)
        dt = t - self.grid[j]
        v0, v1 = self.values[j], self.values[j + 1]
        return self._cumulative[j] + dt * v0 + 0.5 * dt * dt * (v1 - v0) / self.step

    @cached_property
    def maximum(self) -> float:
        return float(self.values.max())

    def to_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "value"])
            for t, v in zip(self.grid, self.values):
                w.writerow([f"{t:.9f}", repr(float(v))])


@dataclass(frozen=True)
class TreatedCensorFamily:
    """Censoring projections after treatment, indexed by the treatment time.

    ``values[i, j]`` is the projected censoring rate at ``grid[j]`` for a
    subject treated at ``grid[i]``; for ``j < i`` the row is held at its
    starting value. Off-grid treatment times interpolate linearly between
    rows.
    """

    grid: np.ndarray
    values: np.ndarray
    degenerate_rows: np.ndarray

    @property
    def step(self) -> float:
        return float(self.grid[1] - self.grid[0])

    @cached_property
    def _cumulative(self):
        inc = 0.5 * (self.values[:, 1:] + self.values[:, :-1]) * self.step
        return np.concatenate([np.zeros((len(self.grid), 1)), np.cumsum(inc, axis=1)],
                              axis=1)

    @cached_property
    def maximum(self) -> float:
        return float(self.values.max())

    def _rows(self, t_a):
        n = len(self.grid) - 1
        i = np.clip(np.floor(np.asarray(t_a) / self.step).astype(np.int64), 0, n - 1)
        alpha = (np.asarray(t_a) - self.grid[i]) / self.step
        return i, alpha

    def _check(self, i, alpha):
        bad = (self.degenerate_rows[i] & (alpha < 1)) | \
              (self.degenerate_rows[i + 1] & (alpha > 0))
        if np.any(bad):
            raise DegenerateProjectionError(
                "treatment has zero projected rate at a requested treatment time")

    def _row_value(self, i, t):
        n = len(self.grid) - 1
        j = np.clip(np.floor(t / self.step).astype(np.int64), 0, n - 1)
        w = (t - self.grid[j]) / self.step
        return (1 - w) * self.values[i, j] + w * self.values[i, j + 1]

    def _row_integral(self, i, t):
        n = len(self.grid) - 1
        j = np.clip(np.floor(t / self.step).astype(np.int64), 0, n - 1)
        dt = t - self.grid[j]
        v0, v1 = self.values[i, j], self.values[i, j + 1]
        return self._cumulative[i, j] + dt * v0 + 0.5 * dt * dt * (v1 - v0) / self.step

    def __call__(self, t_a, t):
        """Projected censoring rate at ``t`` given treatment at ``t_a``."""
        t_a, t = np.broadcast_arrays(np.asarray(t_a, float), np.asarray(t, float))
        i, alpha = self._rows(t_a)
        self._check(i, alpha)
        return (1 - alpha) * self._row_value(i, t) + alpha * self._row_value(i + 1, t)

    def integral(self, t_a, t):
        """Integral of the projected rate over ``[t_a, t]``."""
        if np.ndim(t_a) == 0:
            # one treatment time: gather from two rows only
            i, alpha = self._rows(float(t_a))
            t = np.asarray(t, dtype=float)
            pts = np.concatenate([[float(t_a)], t.ravel()])
            r0 = self._row_integral(int(i), pts)
            r1 = self._row_integral(int(i) + 1, pts)
            r = (1 - alpha) * r0 + alpha * r1
            return (r[1:] - r[0]).reshape(t.shape)
        t_a, t = np.broadcast_arrays(np.asarray(t_a, float), np.asarray(t, float))
        i, alpha = self._rows(t_a)
        lo = (1 - alpha) * self._row_integral(i, t_a) + alpha * self._row_integral(i + 1, t_a)
        hi = (1 - alpha) * self._row_integral(i, t) + alpha * self._row_integral(i + 1, t)
        return hi - lo

    def to_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t_a", "t", "value"])
            for i, ta in enumerate(self.grid):
                for j in range(i, len(self.grid)):
                    w.writerow([f"{ta:.9f}", f"{self.grid[j]:.9f}",
                                repr(float(self.values[i, j]))])


@dataclass(frozen=True)
class ProjectionCurves:
    """Everything needed to define the randomized-trial measure."""

    treatment: FilterCurve
    censor_untreated: FilterCurve
    censor_treated: TreatedCensorFamily

    @property
    def grid(self) -> np.ndarray:
        return self.treatment.grid


def treatment_projection(spec: ScenarioSpec, step: float | None = None) -> FilterCurve:
    """Projected treatment rate given only treatment and death history."""
    grid = make_grid(spec.horizon, step)
    pi = solve_filter(spec.init_dist, spec.generator_untreated,
                      spec.treat_rate + spec.death_base, grid)
    return FilterCurve(grid, pi @ spec.treat_rate, "TreatmentProjection")


def _untreated_censor_filter(spec, grid):
    return solve_filter(spec.init_dist, spec.generator_untreated,
                        spec.treat_rate + spec.censor_rate + spec.death_base, grid)


def censor_projection(spec: ScenarioSpec, step: float | None = None
                      ) -> tuple[FilterCurve, TreatedCensorFamily]:
    """Projected censoring rate given treatment, censoring and death history."""
    grid = make_grid(spec.horizon, step)
    h = grid[1] - grid[0]
    pi_u = _untreated_censor_filter(spec, grid)
    c = spec.censor_rate
    untreated = FilterCurve(grid, pi_u @ c, "CensorProjectionUntreated")

    # condition on the treatment jump, then keep filtering with treated dynamics
    lik = pi_u * spec.treat_rate
    mass = lik.sum(axis=1)
    degenerate = mass <= 0
    start = np.where(degenerate[:, None], pi_u, lik / np.where(degenerate, 1.0, mass)[:, None])
    drift = _kushner(spec.generator_treated,
                     c + spec.death_base + spec.death_treat_effect)
    n = len(grid)
    values = np.empty((n, n))
    state = start.copy()
    values[:, 0] = state @ c
    for j in range(n - 1):
        state[: j + 1] = _normalise(_rk4(drift, state[: j + 1], h))
        values[:, j + 1] = state @ c
    if np.any(values < 0):
        raise NumericalError("negative projected censoring rate")
    family = TreatedCensorFamily(grid, values, degenerate)
    return untreated, family


def projection_curves(spec: ScenarioSpec, step: float | None = None) -> ProjectionCurves:
    untreated, treated = censor_projection(spec, step)
    return ProjectionCurves(treatment_projection(spec, step), untreated, treated)


@dataclass(frozen=True)
class OracleHazards:
    """Exact marginal additive-hazard coefficients under the trial measure."""

    grid: np.ndarray
    b0: np.ndarray
    b1: np.ndarray
    beta0: np.ndarray
    beta1: np.ndarray

    def __call__(self, t):
        """Cumulative coefficients ``(B0(t), B1(t))``, shape ``(..., 2)``."""
        return np.stack([np.interp(t, self.grid, self.b0),
                         np.interp(t, self.grid, self.b1)], axis=-1)


def oracle_marginal_hazards(spec: ScenarioSpec, step: float | None = None) -> OracleHazards:
    """Baseline and treatment coefficients of the marginal death intensity.

    Only exact when treatment leaves the health dynamics unchanged: the
    randomized treatment is then uninformative about health, the constant
    treatment shift cancels from the filter, and the treatment coefficient
    is exactly ``beta_a``.
    """
    if not np.array_equal(spec.generator_untreated, spec.generator_treated):
        raise NotExactError(
            "treatment changes the health dynamics, so the marginal death "
            "intensity is not exactly additive; compare cohorts instead")
    grid = make_grid(spec.horizon, step)
    h = grid[1] - grid[0]
    d = spec.death_base
    k = spec.n_states
    filt = _kushner(spec.generator_untreated, d)

    def drift(y):
        pi = y[..., :k]
        return np.concatenate([filt(pi), (pi @ d)[..., None]], axis=-1)

    y = np.concatenate([spec.init_dist, [0.0]])[None]
    states = np.empty((len(grid), k + 1))
    states[0] = y[0]
    for j in range(1, len(grid)):
        y = _rk4(drift, y, h)
        y[:, :k] = _normalise(y[:, :k])
        states[j] = y[0]
    beta0 = states[:, :k] @ d
    beta1 = np.full(len(grid), spec.death_treat_effect)
    return OracleHazards(grid, states[:, k], spec.death_treat_effect * grid, beta0, beta1)


def first_event_probabilities(spec: ScenarioSpec, step: float | None = None) -> dict:
    """Probability that each of treatment, censoring and death is observed
    first by each grid time, from the Kolmogorov forward equations of the
    untreated, uncensored, alive sub-chain.
    """
    grid = make_grid(spec.horizon, step)
    h = grid[1] - grid[0]
    a, c, d = spec.treat_rate, spec.censor_rate, spec.death_base
    k = spec.n_states
    gen = spec.generator_untreated - np.diag(a + c + d)
    exits = np.stack([a, c, d], axis=1)

    def drift(y):
        p = y[..., :k]
        return np.concatenate([p @ gen, p @ exits], axis=-1)

    y = np.concatenate([spec.init_dist, np.zeros(3)])[None]
    out = np.empty((len(grid), k + 3))
    out[0] = y[0]
    for j in range(1, len(grid)):
        y = _rk4(drift, y, h)
        if not np.all(np.isfinite(y)):
            raise NumericalError("non-finite forward probabilities")
        out[j] = y[0]
    return {"grid": grid, "untouched": out[:, :k].sum(axis=1),
            "A": out[:, k], "C": out[:, k + 1], "D": out[:, k + 2]}
