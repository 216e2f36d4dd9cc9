"""Weighted additive hazard regression with a binary treatment covariate.

The design at time ``t`` has rows ``(Y_i, Y_i A_{i,t-})`` and the weights are
the left limits ``R_{i,t-}``. Since both covariates are indicators,
``X^T R X`` is congruent to ``diag(S00, S11)`` through
``V = [[1, 0], [-1, 1]]``, where ``S00`` and ``S11`` are the weighted sizes
of the untreated and treated risk sets. A death of subject ``i`` therefore
increments the cumulative coefficients by

    (w_i / S00, -w_i / S00)   if i is untreated,
    (0, w_i / S11)            if i is treated,

provided both risk sets have positive weight (otherwise the event is
skipped).
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .core import Cohort, ContractError, StepFunction, format_time
from .weights import CohortWeights, DegenerateWeightError


class TieError(ValueError):
    """Two deaths share the same time."""


EMPTY_GROUP_POLICIES = ("skip", "baseline")


@dataclass
class FitResult:
    bhat: StepFunction
    event_times_used: np.ndarray
    skipped_events: list = field(default_factory=list)
    n_subjects: int = 0

    def __call__(self, t):
        return self.bhat(t)

    def to_csv(self, path: str | os.PathLike, se: np.ndarray | None = None) -> None:
        """Write ``time,b0,b1`` rows (plus ``se_b0,se_b1`` when given)."""
        with open(path, "w", newline="") as fh:
            write_fit_csv(fh, self, se)


def write_fit_csv(fh, fit: FitResult, se=None):
    w = csv.writer(fh, lineterminator="\n")
    header = ["time", "b0", "b1"]
    if se is not None:
        header += ["se_b0", "se_b1"]
    w.writerow(header)
    first = ["0.0", "0", "0"]
    if se is not None:
        first += ["0", "0"]
    w.writerow(first)
    for k, t in enumerate(fit.bhat.times):
        row = [format_time(t)] + [repr(float(v)) for v in fit.bhat.values[k]]
        if se is not None:
            row += [repr(float(v)) for v in se[k]]
        w.writerow(row)


def closed_form_increment(s00, s11, w, treated):
    """Per-death increment of the cumulative coefficients (``J`` included)."""
    s00, s11, w, treated = np.broadcast_arrays(*(np.asarray(x, dtype=float) for x in
                                                 (s00, s11, w, treated)))
    both = (s00 > 0) & (s11 > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        inc0 = np.where(treated > 0, 0.0, w / s00)
        inc1 = np.where(treated > 0, w / s11, -w / s00)
    return np.stack([np.where(both, inc0, 0.0), np.where(both, inc1, 0.0)], axis=-1)


# risk-set bookkeeping

@dataclass
class _Deaths:
    times: np.ndarray
    subject_index: np.ndarray
    treated: np.ndarray


def _deaths(cohort: Cohort) -> _Deaths:
    arr = cohort.arrays
    idx = np.flatnonzero(np.isfinite(arr.death))
    order = np.argsort(arr.death[idx], kind="stable")
    idx = idx[order]
    times = arr.death[idx]
    dup = np.flatnonzero(np.diff(times) == 0)
    if len(dup):
        t = times[dup[0]]
        ids = arr.subject_id[idx[dup[0]:dup[0] + 2]].tolist()
        raise TieError(f"tied death times at t={t} (subjects {ids}); "
                       "jitter the event times before fitting")
    return _Deaths(times, idx, arr.treatment[idx] < times)


def _check_alignment(cohort, weights):
    if weights is None:
        return
    if not isinstance(weights, CohortWeights):
        raise ContractError("weights must be a CohortWeights instance or None")
    if not np.array_equal(weights.subject_ids, cohort.arrays.subject_id):
        raise ContractError("weights and cohort list different subjects")


def _unit_risk_sums(cohort, deaths, freq):
    arr = cohort.arrays
    untreated_until = np.minimum(arr.exit, arr.treatment)

    def count_ge(key, t):
        order = np.argsort(key, kind="stable")
        f = freq[order]
        tail = np.concatenate([np.cumsum(f[::-1], axis=0)[::-1],
                               np.zeros((1,) + f.shape[1:])])
        return tail[np.searchsorted(key[order], t, side="left")]

    total = count_ge(arr.exit, deaths.times)
    s00 = count_ge(untreated_until, deaths.times)
    return s00, total - s00, np.ones(len(deaths.times))


def _weighted_risk_sums(cohort, weights, deaths, freq, block):
    arr = cohort.arrays
    nd = len(deaths.times)
    s00 = np.zeros((nd,) + freq.shape[1:])
    s11 = np.zeros_like(s00)

    def check(i, w):
        bad = ~(np.isfinite(w) & (w > 0))
        if np.any(bad):
            k = int(np.flatnonzero(bad)[0])
            sid = int(arr.subject_id[i])
            raise DegenerateWeightError(
                f"non-positive weight for subject {sid} at t={deaths.times[k]}",
                sid, deaths.times[k])

    if freq.ndim == 1:
        for i, ku, ke, w in weights.risk_set_windows(deaths.times):
            check(i, w)
            s00[:ku] += freq[i] * w[:ku]
            s11[ku:ke] += freq[i] * w[ku:]
    else:
        # dense blocks of subjects with similar exit times, then one matmul each
        order = np.argsort(arr.exit, kind="stable")
        for start in range(0, len(order), block):
            rows = order[start:start + block]
            kmax = int(np.searchsorted(deaths.times, arr.exit[rows].max(), side="right"))
            if kmax == 0:
                continue
            w0 = np.zeros((len(rows), kmax))
            w1 = np.zeros((len(rows), kmax))
            for r, (i, ku, ke, w) in enumerate(weights.risk_set_windows(deaths.times, rows)):
                check(i, w)
                w0[r, :ku] = w[:ku]
                w1[r, ku:ke] = w[ku:]
            f = freq[rows]
            s00[:kmax] += w0.T @ f
            s11[:kmax] += w1.T @ f
    own = weights.evaluate_pairs(deaths.subject_index, deaths.times, left=True)
    return s00, s11, own


def _risk_sums(cohort, weights, deaths, freq, block=512):
    if weights is None:
        return _unit_risk_sums(cohort, deaths, freq)
    return _weighted_risk_sums(cohort, weights, deaths, freq, block)


def _increments(deaths, s00, s11, own, freq, empty_group):
    """Increments per death (and per replicate when ``freq`` is 2-d)."""
    f = freq[deaths.subject_index]
    w = own if f.ndim == 1 else own[:, None]
    treated = deaths.treated if f.ndim == 1 else deaths.treated[:, None]
    inc = closed_form_increment(s00, s11, f * w, treated)
    if empty_group == "baseline":
        only0 = (s00 > 0) & (s11 == 0) & ~np.broadcast_to(treated, s00.shape)
        with np.errstate(divide="ignore", invalid="ignore"):
            inc[..., 0] = np.where(only0, f * w / s00, inc[..., 0])
    used = (s00 > 0) & (s11 > 0)
    if empty_group == "baseline":
        used = used | only0
    return inc, used


def aalen_fit(cohort: Cohort, weights: CohortWeights | None = None,
              empty_group: str = "skip") -> FitResult:
    """Weighted Aalen estimator of the cumulative coefficients ``(B0, B1)``.

    ``weights=None`` gives the classical unweighted two-group fit.
    ``empty_group='baseline'`` increments ``B0`` alone at deaths where the
    treated risk set is empty instead of skipping them.
    """
    if empty_group not in EMPTY_GROUP_POLICIES:
        raise ContractError(f"empty_group must be one of {EMPTY_GROUP_POLICIES}")
    _check_alignment(cohort, weights)
    deaths = _deaths(cohort)
    freq = np.ones(len(cohort))
    s00, s11, own = _risk_sums(cohort, weights, deaths, freq)
    if weights is not None and len(own):
        bad = ~(np.isfinite(own) & (own > 0))
        if np.any(bad):
            k = np.flatnonzero(bad)[0]
            sid = int(cohort.arrays.subject_id[deaths.subject_index[k]])
            raise DegenerateWeightError(
                f"non-positive weight for subject {sid} at t={deaths.times[k]}",
                sid, deaths.times[k])
    inc, used = _increments(deaths, s00, s11, own, freq, empty_group)
    values = np.cumsum(inc[used], axis=0).reshape(-1, 2)
    arr = cohort.arrays
    skipped = [(float(t), int(arr.subject_id[i]))
               for t, i, u in zip(deaths.times, deaths.subject_index, used) if not u]
    return FitResult(
        bhat=StepFunction(deaths.times[used], values, initial=np.zeros(2)),
        event_times_used=deaths.times[used],
        skipped_events=skipped,
        n_subjects=len(cohort),
    )


GROUPS = ("all", "untreated", "treated")


def nelson_aalen(cohort: Cohort, group: str = "all", return_variance: bool = False):
    """Nelson-Aalen cumulative hazard of death within a treatment group.

    Group membership is judged by ``A_{t-}`` at each death time. With
    ``return_variance`` the Aalen variance estimate is returned as a second
    step function.
    """
    if group not in GROUPS:
        raise ContractError(f"group must be one of {GROUPS}")
    arr = cohort.arrays
    is_death = np.isfinite(arr.death)
    t_death = arr.death[is_death]
    treated_at_death = arr.treatment[is_death] < t_death
    if group == "untreated":
        keep = ~treated_at_death
    elif group == "treated":
        keep = treated_at_death
    else:
        keep = np.ones(len(t_death), dtype=bool)
    times, n_events = np.unique(t_death[keep], return_counts=True)
    exit_sorted = np.sort(arr.exit)
    total = len(arr.exit) - np.searchsorted(exit_sorted, times, side="left")
    untreated_sorted = np.sort(np.minimum(arr.exit, arr.treatment))
    untreated = len(arr.exit) - np.searchsorted(untreated_sorted, times, side="left")
    at_risk = {"all": total, "untreated": untreated, "treated": total - untreated}[group]
    if np.any(at_risk <= 0):
        raise AssertionError("death outside its own risk set")
    est = StepFunction(times, np.cumsum(n_events / at_risk), initial=0.0)
    if not return_variance:
        return est
    var = StepFunction(times, np.cumsum(n_events / at_risk.astype(float) ** 2), initial=0.0)
    return est, var


@dataclass
class BootstrapBand:
    grid: np.ndarray
    se: np.ndarray
    replicates: np.ndarray = field(repr=False)

    @property
    def n_boot(self) -> int:
        return self.replicates.shape[0]


def bootstrap_counts(n: int, n_boot: int, seed: int) -> np.ndarray:
    """Subject multiplicities for ``n_boot`` resamples with replacement."""
    rng = np.random.default_rng(seed)
    draws = rng.integers(0, n, size=(n_boot, n))
    return np.stack([np.bincount(d, minlength=n) for d in draws])


def bootstrap_band(cohort: Cohort, weights: CohortWeights | None, n_boot: int,
                   seed: int, grid=None, counts: np.ndarray | None = None,
                   empty_group: str = "skip") -> BootstrapBand:
    """Pointwise bootstrap standard errors of the fitted coefficients.

    Subjects are resampled with replacement and keep their weights. A subject
    drawn ``k`` times enters every risk set and death increment with
    multiplicity ``k``, which is exactly the fit on the duplicated sample.
    ``counts`` overrides the random multiplicities (shape ``(n_boot, n)``).
    """
    if n_boot < 2:
        raise ContractError("n_boot must be at least 2")
    _check_alignment(cohort, weights)
    n = len(cohort)
    if grid is None:
        grid = np.linspace(0.0, cohort.horizon, 21)
    grid = np.asarray(grid, dtype=float)
    if counts is None:
        counts = bootstrap_counts(n, n_boot, seed)
    counts = np.asarray(counts, dtype=float)
    if counts.shape != (n_boot, n):
        raise ContractError(f"counts must have shape {(n_boot, n)}")
    deaths = _deaths(cohort)
    freq = counts.T
    s00, s11, own = _risk_sums(cohort, weights, deaths, freq)
    inc, used = _increments(deaths, s00, s11, own, freq, empty_group)
    inc = np.where(used[..., None], inc, 0.0)
    path = np.concatenate([np.zeros((1, n_boot, 2)), np.cumsum(inc, axis=0)])
    pos = np.searchsorted(deaths.times, grid, side="right")
    reps = np.transpose(path[pos], (1, 0, 2))
    se = reps.std(axis=0, ddof=1)
    return BootstrapBand(grid, se, reps)


# estimator-style wrappers

def _validate_cohort(X) -> Cohort:
    if not isinstance(X, Cohort):
        raise TypeError(f"expected a Cohort, got {type(X).__name__}")
    return X


class AdditiveHazardRegression(BaseEstimator):
    """Estimator interface to :func:`aalen_fit`.

    Parameters
    ----------
    empty_group : {'skip', 'baseline'}
        What to do at deaths where the treated risk set is empty.
    n_boot : int
        Bootstrap replicates for ``standard_errors``; 0 disables them.
    random_state : int
        Seed of the bootstrap resampling.
    """

    def __init__(self, empty_group="skip", n_boot=0, random_state=0):
        self.empty_group = empty_group
        self.n_boot = n_boot
        self.random_state = random_state

    def fit(self, X, y=None, sample_weight=None):
        cohort = _validate_cohort(X)
        self.result_ = aalen_fit(cohort, sample_weight, self.empty_group)
        self.coef_path_ = self.result_.bhat
        self.n_subjects_ = len(cohort)
        self._cohort = cohort
        self._weights = sample_weight
        return self

    def predict(self, times):
        """Cumulative coefficients ``(B0, B1)`` at ``times``."""
        check_is_fitted(self, "coef_path_")
        return self.coef_path_(np.asarray(times, dtype=float))

    def predict_cumulative_hazard(self, times, treated):
        b = self.predict(times)
        return b[..., 0] + np.asarray(treated) * b[..., 1]

    def standard_errors(self, times):
        check_is_fitted(self, "coef_path_")
        if self.n_boot < 2:
            raise ContractError("set n_boot >= 2 to compute standard errors")
        band = bootstrap_band(self._cohort, self._weights, self.n_boot,
                              self.random_state, grid=times,
                              empty_group=self.empty_group)
        return band.se


class NelsonAalen(BaseEstimator):
    """Estimator interface to :func:`nelson_aalen`."""

    def __init__(self, group="all"):
        self.group = group

    def fit(self, X, y=None):
        self.cumulative_hazard_, self.variance_ = nelson_aalen(
            _validate_cohort(X), self.group, return_variance=True)
        return self

    def predict(self, times):
        check_is_fitted(self, "cumulative_hazard_")
        return self.cumulative_hazard_(np.asarray(times, dtype=float))
