"""Generative model for the patient process and its positivity checks.

Under the observational measure every intensity depends on the current
health state ``l``; the treatment and censoring rates are ``a[l]`` and
``c[l]``, death happens at ``d[l] + beta_a * A`` and health moves according
to the generator ``Q(A)``. Treatment is one-shot: a subject starts untreated
and can switch once.
"""

from __future__ import annotations

import dataclasses
import hashlib
import math
import os
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .core import ContractError


class ConfigError(ValueError):
    """Raised for malformed or inconsistent scenario configuration."""


def _frozen(x, ndim):
    arr = np.array(x, dtype=float)
    if arr.ndim != ndim:
        raise ConfigError(f"expected a {ndim}-d array, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class ScenarioSpec:
    generator_untreated: np.ndarray
    generator_treated: np.ndarray
    treat_rate: np.ndarray
    censor_rate: np.ndarray
    death_base: np.ndarray
    death_treat_effect: float
    init_dist: np.ndarray
    horizon: float

    def __post_init__(self):
        for name, ndim in [("generator_untreated", 2), ("generator_treated", 2),
                           ("treat_rate", 1), ("censor_rate", 1),
                           ("death_base", 1), ("init_dist", 1)]:
            object.__setattr__(self, name, _frozen(getattr(self, name), ndim))
        object.__setattr__(self, "death_treat_effect", float(self.death_treat_effect))
        object.__setattr__(self, "horizon", float(self.horizon))
        self._validate()

    def _validate(self):
        k = len(self.init_dist)
        if k < 2:
            raise ConfigError("need at least two health states")
        for name in ("generator_untreated", "generator_treated"):
            q = getattr(self, name)
            if q.shape != (k, k):
                raise ConfigError(f"{name} must be {k}x{k}")
            off = q[~np.eye(k, dtype=bool)]
            if np.any(off < 0):
                raise ConfigError(f"{name} has negative off-diagonal rates")
            if not np.allclose(q.sum(axis=1), 0.0, atol=1e-12):
                raise ConfigError(f"{name} rows must sum to zero")
        for name in ("treat_rate", "censor_rate", "death_base"):
            v = getattr(self, name)
            if v.shape != (k,):
                raise ConfigError(f"{name} must have {k} entries")
            if np.any(v < 0) or not np.all(np.isfinite(v)):
                raise ConfigError(f"{name} must be finite and non-negative")
        if np.any(self.death_base + self.death_treat_effect < 0):
            raise ConfigError("treated death rate d[l] + beta_a is negative")
        if np.any(self.init_dist < 0) or abs(self.init_dist.sum() - 1.0) > 1e-12:
            raise ConfigError("init must be a probability vector")
        if not (math.isfinite(self.horizon) and self.horizon > 0):
            raise ConfigError("horizon must be positive")

    @property
    def n_states(self) -> int:
        return len(self.init_dist)

    def generator(self, treated) -> np.ndarray:
        return self.generator_treated if treated else self.generator_untreated

    def replace(self, **changes) -> "ScenarioSpec":
        return dataclasses.replace(self, **changes)

    def digest(self) -> str:
        """Stable short hash of the scenario parameters."""
        return hashlib.sha256(format_scenario(self).encode()).hexdigest()[:16]

    def __eq__(self, other):
        if not isinstance(other, ScenarioSpec):
            return NotImplemented
        return format_scenario(self) == format_scenario(other)

    def __hash__(self):
        return hash(self.digest())

    def __repr__(self):
        return f"ScenarioSpec(n_states={self.n_states}, digest={self.digest()})"


def two_state_generator(q01, q10):
    return np.array([[-q01, q01], [q10, -q10]], dtype=float)


def scenario_s1() -> ScenarioSpec:
    """Treat-the-sick scenario in which treatment does not act on health."""
    q = two_state_generator(0.4, 0.2)
    return ScenarioSpec(
        generator_untreated=q,
        generator_treated=q,
        treat_rate=[0.3, 1.2],
        censor_rate=[0.1, 0.4],
        death_base=[0.2, 1.2],
        death_treat_effect=-0.15,
        init_dist=[0.7, 0.3],
        horizon=2.0,
    )


def scenario_s2() -> ScenarioSpec:
    """As S1, but treatment slows deterioration (an indirect effect)."""
    return scenario_s1().replace(generator_treated=two_state_generator(0.1, 0.2))


def no_confounding_scenario() -> ScenarioSpec:
    """All rates state independent, so both measures coincide."""
    return scenario_s1().replace(treat_rate=[0.3, 0.3], censor_rate=[0.1, 0.1],
                                 death_base=[0.2, 0.2])


# Expected sign of the naive (unweighted) bias in the treatment coefficient,
# keyed by scenario digest: +1 upward, -1 downward, 0 none. Scenarios not
# listed make no claim.
_NAIVE_BIAS: dict[str, int] = {}


def register_naive_bias(spec: ScenarioSpec, direction: int) -> None:
    if direction not in (-1, 0, 1):
        raise ContractError("direction must be -1, 0 or +1")
    _NAIVE_BIAS[spec.digest()] = direction


def expected_naive_bias(spec: ScenarioSpec) -> int | None:
    return _NAIVE_BIAS.get(spec.digest())



# intensities

class SubjectState(NamedTuple):
    health: int
    treated: int
    alive: bool
    uncensored: bool


def full_intensity(spec: ScenarioSpec, process: str, state) -> float:
    """Full-history intensity of ``process`` ('A', 'C' or 'D') in ``state``."""
    try:
        l, a, alive, uncensored = state
    except (TypeError, ValueError):
        raise ContractError(f"invalid state tuple {state!r}") from None
    if not (isinstance(l, (int, np.integer)) and 0 <= l < spec.n_states):
        raise ContractError(f"invalid health state {l!r}")
    if a not in (0, 1) or not isinstance(alive, (bool, np.bool_)) \
            or not isinstance(uncensored, (bool, np.bool_)):
        raise ContractError(f"invalid state tuple {state!r}")
    if not (alive and uncensored):
        return 0.0
    if process == "A":
        return 0.0 if a else float(spec.treat_rate[l])
    if process == "C":
        return float(spec.censor_rate[l])
    if process == "D":
        return float(spec.death_base[l] + spec.death_treat_effect * a)
    raise ContractError(f"unknown process {process!r}")


# positivity

@dataclass(frozen=True)
class PositivityReport:
    theta_treatment: float
    theta_censor: float
    reachable_states: tuple[int, ...]
    degenerate_treatment_states: tuple[int, ...]
    degenerate_censor_states: tuple[int, ...]
    risk_groups_present: bool

    @property
    def passed(self) -> bool:
        return (not self.degenerate_treatment_states
                and not self.degenerate_censor_states
                and self.risk_groups_present
                and math.isfinite(self.theta_treatment)
                and math.isfinite(self.theta_censor))

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["passed"] = self.passed
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in d.items()}


def reachable_states(spec: ScenarioSpec) -> tuple[int, ...]:
    k = spec.n_states
    adj = (spec.generator_untreated > 0) | (spec.generator_treated > 0)
    seen = {i for i in range(k) if spec.init_dist[i] > 0}
    stack = list(seen)
    while stack:
        i = stack.pop()
        for j in np.flatnonzero(adj[i]):
            if j != i and j not in seen:
                seen.add(int(j))
                stack.append(int(j))
    return tuple(sorted(seen))


def _theta(rates):
    lo, hi = rates.min(), rates.max()
    if hi == lo:
        return 0.0, ()
    worst = 0.0
    degenerate = []
    for i, r in enumerate(rates):
        gap = max(r - lo, hi - r)
        if r == 0:
            degenerate.append(i)
            worst = math.inf
        else:
            worst = max(worst, gap / math.sqrt(r))
    return worst, tuple(degenerate)


def check_positivity(spec: ScenarioSpec) -> PositivityReport:
    """Bound the distance between full and projected intensities.

    The projected rate always lies in ``[min_l a[l], max_l a[l]]``, so the
    smallest ``theta`` with ``|a[l] - abar| <= theta * sqrt(a[l])`` over that
    range and all reachable ``l`` is a sufficient constant (same for ``c``).
    """
    reach = np.array(reachable_states(spec))
    a = spec.treat_rate[reach]
    c = spec.censor_rate[reach]
    theta_a, deg_a = _theta(a)
    theta_c, deg_c = _theta(c)
    death = np.maximum(spec.death_base, spec.death_base + spec.death_treat_effect)
    survives = bool(np.all(np.isfinite(death)))
    return PositivityReport(
        theta_treatment=theta_a,
        theta_censor=theta_c,
        reachable_states=tuple(int(i) for i in reach),
        degenerate_treatment_states=tuple(int(reach[i]) for i in deg_a),
        degenerate_censor_states=tuple(int(reach[i]) for i in deg_c),
        risk_groups_present=bool(np.any(a > 0)) and survives,
    )


# local independence graphs

VERTICES = ("A", "C", "D", "L")


@dataclass(frozen=True)
class LocalIndependenceGraph:
    edges: frozenset[tuple[str, str]]

    def __post_init__(self):
        object.__setattr__(self, "edges", frozenset(self.edges))
        for src, dst in self.edges:
            if src not in VERTICES or dst not in VERTICES or src == dst:
                raise ContractError(f"invalid edge {src}->{dst}")

    def __contains__(self, edge):
        return tuple(edge) in self.edges

    def parents(self, vertex):
        return sorted(src for src, dst in self.edges if dst == vertex)


OBSERVATIONAL_GRAPH = LocalIndependenceGraph(frozenset({
    ("L", "C"), ("L", "D"), ("L", "A"),
    ("A", "C"), ("A", "L"), ("A", "D"),
}))

RANDOMIZED_TRIAL_GRAPH = LocalIndependenceGraph(frozenset({
    ("L", "D"),
    ("A", "C"), ("A", "L"), ("A", "D"),
}))


# config files

_KEYS = ("n_states", "q0", "q1", "a", "c", "d", "beta_a", "init", "horizon")


def _fmt(x):
    return repr(float(x))


def _offdiag(q):
    k = q.shape[0]
    return [q[i, j] for i in range(k) for j in range(k) if i != j]


def format_scenario(spec: ScenarioSpec) -> str:
    vec = lambda xs: ", ".join(_fmt(x) for x in xs)  # noqa: E731
    lines = [
        f"n_states = {spec.n_states}",
        f"q0 = {vec(_offdiag(spec.generator_untreated))}",
        f"q1 = {vec(_offdiag(spec.generator_treated))}",
        f"a = {vec(spec.treat_rate)}",
        f"c = {vec(spec.censor_rate)}",
        f"d = {vec(spec.death_base)}",
        f"beta_a = {_fmt(spec.death_treat_effect)}",
        f"init = {vec(spec.init_dist)}",
        f"horizon = {_fmt(spec.horizon)}",
    ]
    return "\n".join(lines) + "\n"


def parse_scenario(text: str) -> ScenarioSpec:
    """Parse ``key = value`` scenario text; unknown or missing keys are errors."""
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in raw:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        raw[key] = value
    missing = [k for k in _KEYS if k not in raw]
    if missing:
        raise ConfigError(f"missing keys: {', '.join(missing)}")

    def floats(key):
        try:
            return [float(x) for x in raw[key].split(",")]
        except ValueError:
            raise ConfigError(f"{key}: expected comma-separated numbers") from None

    try:
        k = int(raw["n_states"])
    except ValueError:
        raise ConfigError("n_states: expected an integer") from None
    if k < 2:
        raise ConfigError("n_states must be at least 2")

    def generator(key):
        off = floats(key)
        if len(off) != k * (k - 1):
            raise ConfigError(f"{key}: expected {k * (k - 1)} off-diagonal rates")
        q = np.zeros((k, k))
        it = iter(off)
        for i in range(k):
            for j in range(k):
                if i != j:
                    q[i, j] = next(it)
            q[i, i] = -q[i].sum()
        return q

    def scalar(key):
        vals = floats(key)
        if len(vals) != 1:
            raise ConfigError(f"{key}: expected a single number")
        return vals[0]

    return ScenarioSpec(
        generator_untreated=generator("q0"),
        generator_treated=generator("q1"),
        treat_rate=floats("a"),
        censor_rate=floats("c"),
        death_base=floats("d"),
        death_treat_effect=scalar("beta_a"),
        init_dist=floats("init"),
        horizon=scalar("horizon"),
    )


def load_scenario(path: str | os.PathLike) -> ScenarioSpec:
    with open(path) as fh:
        return parse_scenario(fh.read())


def save_scenario(spec: ScenarioSpec, path: str | os.PathLike) -> None:
    with open(path, "w") as fh:
        fh.write(format_scenario(spec))


# sicker patients are treated more often, so the treated look worse
register_naive_bias(scenario_s1(), +1)
register_naive_bias(no_confounding_scenario(), 0)
