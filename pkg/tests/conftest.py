import numpy as np
import pytest

from ctmsm.core import Cohort, EventKind, EventRecord, SubjectPath
from ctmsm.filters import projection_curves
from ctmsm.scenario import no_confounding_scenario, scenario_s1, scenario_s2
from ctmsm.weights import CohortWeights


@pytest.fixture(scope="session")
def s1():
    return scenario_s1()


@pytest.fixture(scope="session")
def s2():
    return scenario_s2()


@pytest.fixture(scope="session")
def nc():
    return no_confounding_scenario()


@pytest.fixture(scope="session")
def s1_curves(s1):
    return projection_curves(s1)


def make_path(sid, init, events, horizon=2.0, latent=()):
    """Build a path from ``(time, kind, mark)`` tuples, kind a one-letter code."""
    def rec(e):
        t, k = e[0], EventKind(e[1])
        return EventRecord(sid, t, k, e[2] if len(e) > 2 else None)
    return SubjectPath(sid, init, tuple(rec(e) for e in events), horizon,
                       tuple(rec(e) for e in latent))


def make_cohort(specs, horizon=2.0):
    """Cohort from a list of ``(init, events)`` pairs; ids are positions."""
    return Cohort(tuple(make_path(i, init, ev, horizon) for i, (init, ev) in enumerate(specs)))


def z_score(mean, se, target):
    return np.where(se > 0, (mean - target) / np.where(se > 0, se, 1.0), 0.0)


def mc_conditional_rate(cohort, t, rates):
    """Mean and standard error of ``rates[L_t]`` over subjects still observed
    and untreated at ``t``."""
    from ctmsm.core import history_table
    tab = history_table(cohort)
    sel = (tab.seg_start <= t) & (t < tab.seg_end) & (tab.seg_treated == 0)
    x = np.asarray(rates)[tab.seg_health[sel]]
    return x.mean(), x.std(ddof=1) / np.sqrt(len(x))


class ScaledWeights(CohortWeights):
    """Weights multiplied by a constant."""

    def __init__(self, base, k):
        self.__dict__.update(base.__dict__)
        self.k = k

    def evaluate(self, times, left=False, rows=slice(None)):
        return self.k * super().evaluate(times, left, rows)

    def evaluate_pairs(self, rows, times, left=False):
        return self.k * super().evaluate_pairs(rows, times, left)

    def risk_set_windows(self, times, rows=None):
        for i, ku, ke, w in super().risk_set_windows(times, rows):
            yield i, ku, ke, self.k * w


ACCEPTANCE_LINES = []


@pytest.fixture
def record_criterion():
    """Store ``(number, passed, detail)`` for the terminal summary."""
    def record(number, passed, detail):
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'} ({detail})"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
