"""Event-history data model shared by every other module.

A subject is observed from time 0 until death, censoring or the horizon,
whichever comes first. Its history is a time-ordered list of jump events of
four orthogonal counting processes: treatment start (``A``), censoring
(``C``), death (``D``) and health-state jumps (``L``).

Conventions at jump instants: health states are right-continuous, while
predictable quantities (treatment indicator, at-risk indicator) use left
limits, so a subject is at risk at its own event time.
"""

from __future__ import annotations

import enum
import io
import math
import os
from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Sequence, TextIO

import numpy as np

TIME_DECIMALS = 9


class ContractError(ValueError):
    """Raised when a caller violates an operation's preconditions."""


class UnobservableStateError(ContractError):
    """Raised when querying a subject's state after observation has stopped."""


class EventLogError(ValueError):
    """Raised when an event-log file cannot be parsed."""


class EventKind(enum.Enum):
    TreatmentStart = "A"
    Censor = "C"
    Death = "D"
    HealthJump = "L"


class Measure(enum.Enum):
    Observational = "obs"
    RandomizedTrial = "rct"


@dataclass(frozen=True)
class EventRecord:
    subject_id: int
    time: float
    kind: EventKind
    mark: int | None = None

    def __post_init__(self):
        if self.subject_id < 0:
            raise ContractError(f"negative subject id {self.subject_id}")
        if not math.isfinite(self.time) or self.time < 0:
            raise ContractError(f"invalid event time {self.time!r}")
        if (self.kind is EventKind.HealthJump) != (self.mark is not None):
            raise ContractError("mark must be present exactly for health jumps")


@dataclass(frozen=True)
class SubjectPath:
    """Observed history of one subject.

    ``latent_events`` holds the continuation of the history after censoring,
    kept only for oracle diagnostics. Estimators never look at it.
    """

    subject_id: int
    initial_health: int
    events: tuple[EventRecord, ...]
    horizon: float
    latent_events: tuple[EventRecord, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "events", tuple(self.events))
        object.__setattr__(self, "latent_events", tuple(self.latent_events))
        _check_events(self.subject_id, self.events, self.horizon)
        if self.latent_events:
            if self.censor_time is None:
                raise ContractError("latent events require a censored path")
            _check_events(self.subject_id, self.events + self.latent_events,
                          self.horizon, latent=True)

    def _first(self, kind):
        for ev in self.events:
            if ev.kind is kind:
                return ev.time
        return None

    @cached_property
    def treatment_time(self) -> float | None:
        return self._first(EventKind.TreatmentStart)

    @cached_property
    def censor_time(self) -> float | None:
        return self._first(EventKind.Censor)

    @cached_property
    def death_time(self) -> float | None:
        return self._first(EventKind.Death)

    @cached_property
    def exit_time(self) -> float:
        """End of observation: death, censoring or the horizon."""
        times = [t for t in (self.death_time, self.censor_time) if t is not None]
        return min(times) if times else self.horizon

    @cached_property
    def health_jumps(self) -> tuple[np.ndarray, np.ndarray]:
        """Observed health jump times and the states entered at them."""
        jumps = [(ev.time, ev.mark) for ev in self.events
                 if ev.kind is EventKind.HealthJump]
        times = np.array([j[0] for j in jumps], dtype=float)
        states = np.array([j[1] for j in jumps], dtype=int)
        return times, states


def _check_events(subject_id, events, horizon, latent=False):
    last = -1.0
    seen = set()
    stopped = False
    for ev in events:
        if ev.subject_id != subject_id:
            raise ContractError("event belongs to a different subject")
        if ev.time > horizon:
            raise ContractError(f"event at {ev.time} beyond horizon {horizon}")
        if ev.time <= last:
            raise ContractError(
                f"subject {subject_id}: events not strictly increasing at {ev.time}")
        last = ev.time
        if stopped:
            raise ContractError(
                f"subject {subject_id}: event after death or censoring")
        if ev.kind is not EventKind.HealthJump:
            if ev.kind in seen:
                raise ContractError(
                    f"subject {subject_id}: repeated {ev.kind.name} event")
            seen.add(ev.kind)
        if ev.kind is EventKind.Death:
            stopped = True
        elif ev.kind is EventKind.Censor and not latent:
            stopped = True


def at_risk(path: SubjectPath, t: float) -> bool:
    """Whether the subject is alive and uncensored just before ``t``."""
    return t <= path.exit_time


def treatment_left_limit(path: SubjectPath, t: float) -> int:
    """Treatment indicator ``A_{t-}``."""
    ta = path.treatment_time
    return int(ta is not None and ta < t)


def health_state_at(path: SubjectPath, t: float, left: bool = False,
                    latent: bool = False) -> int:
    """Health state at ``t`` (or its left limit when ``left`` is true).

    With ``latent=True`` the post-censoring continuation is used, so the state
    can be queried up to the latent death time. The path is then assumed to
    come from a ``keep_latent`` simulation: an empty continuation means no
    further events.
    """
    events = path.events + path.latent_events if latent else path.events
    end = path.exit_time
    if latent and path.censor_time is not None:
        deaths = [ev.time for ev in events if ev.kind is EventKind.Death]
        end = deaths[0] if deaths else path.horizon
    if t > end or t < 0:
        raise UnobservableStateError(
            f"subject {path.subject_id}: state at {t} is not observed "
            f"(observation ends at {end})")
    state = path.initial_health
    for ev in events:
        if ev.time > t or (left and ev.time == t):
            break
        if ev.kind is EventKind.HealthJump:
            state = ev.mark
    return state


@dataclass(frozen=True)
class Cohort:
    paths: tuple[SubjectPath, ...]
    scenario_tag: str = ""
    measure_tag: Measure = Measure.Observational

    def __post_init__(self):
        object.__setattr__(self, "paths", tuple(self.paths))
        if not self.paths:
            raise ContractError("a cohort needs at least one subject")
        ids = [p.subject_id for p in self.paths]
        if len(set(ids)) != len(ids):
            raise ContractError("subject ids must be unique")
        if len({p.horizon for p in self.paths}) != 1:
            raise ContractError("all paths must share one horizon")
        if "\n" in self.scenario_tag:
            raise ContractError("scenario tag must be a single line")

    def __len__(self):
        return len(self.paths)

    def __iter__(self):
        return iter(self.paths)

    def __getitem__(self, i):
        return self.paths[i]

    @property
    def horizon(self) -> float:
        return self.paths[0].horizon

    @cached_property
    def arrays(self) -> "CohortArrays":
        return CohortArrays.from_paths(self.paths)


@dataclass(frozen=True)
class CohortArrays:
    """Column view of the per-subject stopping times (``inf`` when absent)."""

    subject_id: np.ndarray
    treatment: np.ndarray
    censor: np.ndarray
    death: np.ndarray
    exit: np.ndarray

    @classmethod
    def from_paths(cls, paths: Sequence[SubjectPath]) -> "CohortArrays":
        def col(attr):
            return np.array([math.inf if getattr(p, attr) is None
                             else getattr(p, attr) for p in paths])
        return cls(
            subject_id=np.array([p.subject_id for p in paths], dtype=np.int64),
            treatment=col("treatment_time"),
            censor=col("censor_time"),
            death=col("death_time"),
            exit=np.array([p.exit_time for p in paths]),
        )


@dataclass(frozen=True)
class HistoryTable:
    """Flat tables of a cohort's histories.

    ``segments`` rows are ``(row, start, end, health, treated)``: maximal
    intervals on which both the health state and the treatment indicator
    are constant, up to the end of observation. ``events`` rows are
    ``(row, time, kind, health_before, treated_before)``, where ``kind``
    indexes ``EVENT_CODES``.
    """

    seg_row: np.ndarray
    seg_start: np.ndarray
    seg_end: np.ndarray
    seg_health: np.ndarray
    seg_treated: np.ndarray
    ev_row: np.ndarray
    ev_time: np.ndarray
    ev_kind: np.ndarray
    ev_health: np.ndarray
    ev_treated: np.ndarray


EVENT_CODES = (EventKind.TreatmentStart, EventKind.Censor, EventKind.Death,
               EventKind.HealthJump)


def history_table(cohort: Cohort, latent: bool = False) -> HistoryTable:
    """Build a :class:`HistoryTable`; ``latent`` follows paths past censoring."""
    code = {k: i for i, k in enumerate(EVENT_CODES)}
    seg, ev = [], []
    for row, p in enumerate(cohort.paths):
        events = p.events + p.latent_events if latent else p.events
        health, treated, start = p.initial_health, 0, 0.0
        for e in events:
            ev.append((row, e.time, code[e.kind], health, treated))
            if e.kind is EventKind.Censor and latent:
                continue
            if e.kind is EventKind.Censor or e.kind is EventKind.Death:
                break
            seg.append((row, start, e.time, health, treated))
            start = e.time
            if e.kind is EventKind.HealthJump:
                health = e.mark
            else:
                treated = 1
        else:
            seg.append((row, start, p.horizon, health, treated))
            start = None
        if start is not None:
            seg.append((row, start, e.time, health, treated))
    s = np.array(seg, dtype=float).reshape(-1, 5)
    v = np.array(ev, dtype=float).reshape(-1, 5)
    return HistoryTable(
        seg_row=s[:, 0].astype(np.int64), seg_start=s[:, 1], seg_end=s[:, 2],
        seg_health=s[:, 3].astype(np.int64), seg_treated=s[:, 4].astype(np.int64),
        ev_row=v[:, 0].astype(np.int64), ev_time=v[:, 1], ev_kind=v[:, 2].astype(np.int64),
        ev_health=v[:, 3].astype(np.int64), ev_treated=v[:, 4].astype(np.int64),
    )


class StepFunction:
    """Right-continuous piecewise-constant function of time.

    ``values[k]`` holds on ``[times[k], times[k+1])``; ``initial`` holds on
    ``[0, times[0])``. Values may be scalar or vector valued.
    """

    def __init__(self, times, values, initial=None):
        times = np.asarray(times, dtype=float)
        values = np.asarray(values, dtype=float)
        if times.ndim != 1 or len(times) != len(values):
            raise ContractError("times and values must have equal length")
        if np.any(np.diff(times) <= 0):
            raise ContractError("step function knots must be strictly increasing")
        if initial is None:
            initial = np.zeros(values.shape[1:])
        self.times = times
        self.values = values
        self.initial = np.asarray(initial, dtype=float)
        if self.initial.shape != values.shape[1:]:
            raise ContractError("initial value has the wrong dimension")
        self.times.setflags(write=False)
        self.values.setflags(write=False)

    @property
    def dim(self) -> int:
        return 1 if self.values.ndim == 1 else self.values.shape[1]

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.times, t, side="right") - 1
        padded = np.concatenate([self.initial[None], self.values])
        return padded[idx + 1]

    def left_limit(self, t):
        t = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.times, t, side="left") - 1
        padded = np.concatenate([self.initial[None], self.values])
        return padded[idx + 1]

    def __eq__(self, other):
        if not isinstance(other, StepFunction):
            return NotImplemented
        return (np.array_equal(self.times, other.times)
                and np.array_equal(self.values, other.values)
                and np.array_equal(self.initial, other.initial))

    def __repr__(self):
        return f"StepFunction(n_knots={len(self.times)}, dim={self.dim})"


# event-log format

_HEADER = "subject,time,kind,mark"


def format_time(t: float) -> str:
    return f"{t:.{TIME_DECIMALS}f}"


def write_event_log(cohort: Cohort, dest: str | os.PathLike | TextIO,
                    latent: bool = False) -> None:
    """Write a cohort in the comma-separated event-log format.

    With ``latent=True`` only the post-censoring continuation rows are
    written (the companion file produced for ``--keep-latent`` runs).
    """
    if isinstance(dest, (str, os.PathLike)):
        with open(dest, "w", newline="") as fh:
            write_event_log(cohort, fh, latent=latent)
        return
    out = dest
    out.write(f"#cohort,{cohort.measure_tag.value},{format_time(cohort.horizon)},"
              f"{cohort.scenario_tag}\n")
    paths = sorted(cohort.paths, key=lambda p: p.subject_id)
    for p in paths:
        out.write(f"#init,{p.subject_id},{p.initial_health}\n")
    out.write(_HEADER + "\n")
    for p in paths:
        for ev in (p.latent_events if latent else p.events):
            mark = "" if ev.mark is None else str(ev.mark)
            out.write(f"{p.subject_id},{format_time(ev.time)},{ev.kind.value},{mark}\n")


def read_event_log(src: str | os.PathLike | TextIO,
                   latent: str | os.PathLike | TextIO | None = None) -> Cohort:
    """Parse an event log, optionally merging a latent companion file."""
    if isinstance(src, (str, os.PathLike)):
        with open(src, newline="") as fh:
            return read_event_log(fh, latent)
    meta, init, rows = _parse_log(src)
    latent_rows: dict[int, list[EventRecord]] = {}
    if latent is not None:
        if isinstance(latent, (str, os.PathLike)):
            with open(latent, newline="") as fh:
                _, _, latent_rows = _parse_log(fh)
        else:
            _, _, latent_rows = _parse_log(latent)
    measure, horizon, tag = meta
    unknown = (set(rows) | set(latent_rows)) - set(init)
    if unknown:
        raise EventLogError(f"events for subjects without #init line: {sorted(unknown)}")
    try:
        paths = [SubjectPath(sid, init[sid], tuple(rows.get(sid, ())), horizon,
                             tuple(latent_rows.get(sid, ())))
                 for sid in sorted(init)]
        return Cohort(tuple(paths), tag, measure)
    except ContractError as exc:
        raise EventLogError(str(exc)) from exc


def _parse_log(fh: Iterable[str]):
    meta = None
    init: dict[int, int] = {}
    rows: dict[int, list[EventRecord]] = {}
    header_seen = False
    last_key = None
    for lineno, raw in enumerate(fh, 1):
        line = raw.rstrip("\r\n")
        if not line:
            continue
        try:
            if line.startswith("#"):
                if header_seen:
                    raise EventLogError("header block after the column header")
                parts = line[1:].split(",", 3)
                if parts[0] == "cohort":
                    meta = (Measure(parts[1]), float(parts[2]),
                            parts[3] if len(parts) > 3 else "")
                elif parts[0] == "init":
                    sid, state = int(parts[1]), int(parts[2])
                    if sid in init:
                        raise EventLogError(f"duplicate #init for subject {sid}")
                    init[sid] = state
                else:
                    raise EventLogError(f"unknown header line {parts[0]!r}")
                continue
            if not header_seen:
                if line != _HEADER:
                    raise EventLogError(f"expected header {_HEADER!r}")
                header_seen = True
                continue
            sid_s, time_s, kind_s, mark_s = line.split(",")
            sid, time = int(sid_s), float(time_s)
            kind = EventKind(kind_s)
            mark = int(mark_s) if mark_s else None
            key = (sid, time)
            if last_key is not None and key <= last_key:
                raise EventLogError("rows not sorted by (subject, time)")
            last_key = key
            rows.setdefault(sid, []).append(EventRecord(sid, time, kind, mark))
        except EventLogError as exc:
            raise EventLogError(f"line {lineno}: {exc}") from None
        except (ValueError, IndexError) as exc:
            raise EventLogError(f"line {lineno}: {exc}") from None
    if meta is None:
        raise EventLogError("missing #cohort line")
    if not header_seen:
        raise EventLogError("missing column header")
    return meta, init, rows


def cohort_to_text(cohort: Cohort, latent: bool = False) -> str:
    buf = io.StringIO()
    write_event_log(cohort, buf, latent=latent)
    return buf.getvalue()


def round_cohort(cohort: Cohort) -> Cohort:
    """The cohort as it reads back from the event-log format."""
    return read_event_log(io.StringIO(cohort_to_text(cohort)))

