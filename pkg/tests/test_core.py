import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ctmsm.core import (Cohort, ContractError, EventKind, EventLogError, EventRecord,
                        Measure, StepFunction, UnobservableStateError,
                        at_risk, cohort_to_text, health_state_at, history_table,
                        read_event_log, round_cohort, treatment_left_limit,
                        write_event_log)

from conftest import make_cohort, make_path


def test_event_record_mark_only_for_health_jumps():
    EventRecord(0, 1.0, EventKind.HealthJump, 1)
    with pytest.raises(ContractError):
        EventRecord(0, 1.0, EventKind.Death, 1)
    with pytest.raises(ContractError):
        EventRecord(0, 1.0, EventKind.HealthJump)
    with pytest.raises(ContractError):
        EventRecord(0, -0.1, EventKind.Death)
    with pytest.raises(ContractError):
        EventRecord(0, float("nan"), EventKind.Death)


def test_path_rejects_events_after_death():
    with pytest.raises(ContractError):
        make_path(0, 0, [(0.5, "D"), (0.7, "L", 1)])


def test_path_rejects_unsorted_and_repeated_events():
    with pytest.raises(ContractError):
        make_path(0, 0, [(0.5, "L", 1), (0.4, "L", 0)])
    with pytest.raises(ContractError):
        make_path(0, 0, [(0.3, "A"), (0.4, "A")])
    with pytest.raises(ContractError):
        make_path(0, 0, [(2.5, "D")])


def test_stopping_times_and_exit():
    p = make_path(3, 0, [(0.2, "L", 1), (0.5, "A"), (1.1, "C")])
    assert p.treatment_time == 0.5
    assert p.censor_time == 1.1
    assert p.death_time is None
    assert p.exit_time == 1.1
    assert make_path(4, 1, []).exit_time == 2.0


def test_at_risk_includes_own_event_time():
    p = make_path(0, 0, [(1.0, "D")])
    assert at_risk(p, 1.0)
    assert not at_risk(p, 1.0 + 1e-12)


def test_treatment_left_limit_is_predictable():
    p = make_path(0, 0, [(0.5, "A")])
    assert treatment_left_limit(p, 0.5) == 0
    assert treatment_left_limit(p, 0.5001) == 1


def test_health_state_right_continuous_and_left_limit():
    p = make_path(0, 0, [(0.5, "L", 1), (1.5, "D")])
    assert health_state_at(p, 0.5) == 1
    assert health_state_at(p, 0.5, left=True) == 0
    assert health_state_at(p, 1.5) == 1
    with pytest.raises(UnobservableStateError):
        health_state_at(p, 1.6)


def test_latent_state_past_censoring():
    p = make_path(0, 0, [(0.4, "C")], latent=[(0.9, "L", 1), (1.2, "D")])
    with pytest.raises(UnobservableStateError):
        health_state_at(p, 1.0)
    assert health_state_at(p, 1.0, latent=True) == 1
    with pytest.raises(UnobservableStateError):
        health_state_at(p, 1.3, latent=True)


def test_latent_events_need_censoring():
    with pytest.raises(ContractError):
        make_path(0, 0, [], latent=[(0.9, "L", 1)])


def test_cohort_validation():
    with pytest.raises(ContractError):
        Cohort(())
    p = make_path(0, 0, [])
    with pytest.raises(ContractError):
        Cohort((p, p))
    with pytest.raises(ContractError):
        Cohort((p, make_path(1, 0, [], horizon=3.0)))


def test_cohort_arrays():
    c = make_cohort([(0, [(0.5, "A"), (1.0, "D")]), (1, [(0.3, "C")]), (0, [])])
    a = c.arrays
    np.testing.assert_array_equal(a.subject_id, [0, 1, 2])
    np.testing.assert_array_equal(a.treatment, [0.5, np.inf, np.inf])
    np.testing.assert_array_equal(a.death, [1.0, np.inf, np.inf])
    np.testing.assert_array_equal(a.exit, [1.0, 0.3, 2.0])


def test_step_function_conventions():
    f = StepFunction([1.0, 2.0], [10.0, 20.0])
    np.testing.assert_array_equal(f([0.0, 1.0, 1.5, 2.0, 9.0]), [0, 10, 10, 20, 20])
    np.testing.assert_array_equal(f.left_limit([1.0, 2.0]), [0, 10])
    g = StepFunction([1.0], [[1.0, -1.0]])
    assert g.dim == 2
    np.testing.assert_array_equal(g(0.5), [0, 0])
    with pytest.raises(ContractError):
        StepFunction([1.0, 1.0], [1.0, 2.0])
    with pytest.raises(ValueError):
        f.values[0] = 3.0


def test_history_table_segments_and_events():
    c = make_cohort([(0, [(0.5, "L", 1), (0.8, "A"), (1.0, "D")]), (1, [])])
    tab = history_table(c)
    segs = list(zip(tab.seg_row, tab.seg_start, tab.seg_end, tab.seg_health, tab.seg_treated))
    assert segs == [(0, 0.0, 0.5, 0, 0), (0, 0.5, 0.8, 1, 0), (0, 0.8, 1.0, 1, 1),
                    (1, 0.0, 2.0, 1, 0)]
    # death happens from health 1 while treated
    assert (tab.ev_health[-1], tab.ev_treated[-1]) == (1, 1)


def test_history_table_latent_continues_after_censoring():
    p = make_path(0, 0, [(0.4, "C")], latent=[(0.9, "L", 1)])
    tab = history_table(Cohort((p,)), latent=True)
    assert tab.seg_end.max() == 2.0
    assert history_table(Cohort((p,))).seg_end.max() == 0.4


# event log

def test_event_log_roundtrip_and_header():
    c = Cohort((make_path(0, 1, [(0.25, "L", 0), (0.5, "A"), (1.0, "D")]),
                make_path(1, 0, [(0.3, "C")])), "abc", Measure.RandomizedTrial)
    text = cohort_to_text(c)
    lines = text.splitlines()
    assert lines[0] == "#cohort,rct,2.000000000,abc"
    assert "subject,time,kind,mark" in lines
    assert "0,0.250000000,L,0" in lines
    back = read_event_log(io.StringIO(text))
    assert back.paths == c.paths
    assert back.scenario_tag == "abc"
    assert back.measure_tag is Measure.RandomizedTrial


def test_event_log_latent_companion(tmp_path):
    p = make_path(0, 0, [(0.4, "C")], latent=[(0.9, "L", 1), (1.2, "D")])
    c = Cohort((p, make_path(1, 0, [])))
    write_event_log(c, tmp_path / "c.csv")
    write_event_log(c, tmp_path / "c.csv.latent", latent=True)
    assert read_event_log(tmp_path / "c.csv").paths[0].latent_events == ()
    back = read_event_log(tmp_path / "c.csv", latent=tmp_path / "c.csv.latent")
    assert back.paths == c.paths


@pytest.mark.parametrize("text", [
    "subject,time,kind,mark\n",
    "#cohort,obs,2.0,\nsubject,time,kind,mark\n0,0.5,D,\n",
    "#cohort,obs,2.0,\n#init,0,0\nsubject,time,kind,mark\n0,0.5,X,\n",
    "#cohort,obs,2.0,\n#init,0,0\nsubject,time,kind,mark\n0,0.5,L,1\n0,0.4,L,0\n",
    "#cohort,obs,2.0,\n#init,0,0\nsubject,time,kind,mark\n0,0.5,D,\n0,0.6,L,1\n",
    "#cohort,obs,2.0,\n#init,0,0\nwrong,header\n",
])
def test_event_log_rejects_malformed(text):
    with pytest.raises(EventLogError):
        read_event_log(io.StringIO(text))


_times = st.lists(st.floats(0.001, 1.999, allow_nan=False), min_size=0, max_size=6,
                  unique=True)


@st.composite
def paths(draw, sid):
    ts = sorted(draw(_times))
    ts = sorted(set(round(t, 9) for t in ts))
    events = []
    state = draw(st.integers(0, 1))
    init = state
    treated = False
    for t in ts:
        kind = draw(st.sampled_from(["L", "L", "A", "D", "C"]))
        if kind == "A" and treated:
            kind = "L"
        if kind == "L":
            state = 1 - state
            events.append((t, "L", state))
        else:
            events.append((t, kind))
            treated = treated or kind == "A"
            if kind in "DC":
                break
    return make_path(sid, init, events)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 5).flatmap(lambda n: st.tuples(*[paths(i) for i in range(n)])))
def test_event_log_roundtrip_property(ps):
    c = Cohort(ps, "tag", Measure.Observational)
    back = round_cohort(c)
    assert back.paths == c.paths
    assert cohort_to_text(back) == cohort_to_text(c)
