import json

import numpy as np
import pytest

from ctmsm.core import ContractError, EventKind, Measure, cohort_to_text
from ctmsm.filters import first_event_probabilities
from ctmsm.scenario import ScenarioSpec
from ctmsm.simulate import (SimulationRequest, latent_health, martingale_residuals,
                            simulate_cohort, simulate_subject, simulation_metadata,
                            subject_stream, write_metadata)
from ctmsm.validate import empirical_graph


def test_null_process(s1):
    z = np.zeros((2, 2))
    spec = ScenarioSpec(z, z, [0, 0], [0, 0], [0, 0], 0.0, [0.5, 0.5], 2.0)
    cohort = simulate_cohort(SimulationRequest(spec, 50, 1))
    assert all(p.events == () and p.exit_time == 2.0 for p in cohort)


def test_same_seed_identical_different_seed_differs(s1):
    a = cohort_to_text(simulate_cohort(SimulationRequest(s1, 200, 42)))
    b = cohort_to_text(simulate_cohort(SimulationRequest(s1, 200, 42)))
    c = cohort_to_text(simulate_cohort(SimulationRequest(s1, 200, 43)))
    assert a == b
    assert a != c


def test_single_subject_matches_stream(s1):
    cohort = simulate_cohort(SimulationRequest(s1, 1, 42))
    assert cohort[0] == simulate_subject(s1, 0, subject_stream(42, 0))


def test_subject_paths_independent_of_cohort_size(s1):
    small = simulate_cohort(SimulationRequest(s1, 5, 9))
    big = simulate_cohort(SimulationRequest(s1, 50, 9))
    assert small.paths == big.paths[:5]


def test_trial_measure_needs_curves(s1, s1_curves):
    rng = subject_stream(0, 0)
    with pytest.raises(ContractError):
        simulate_subject(s1, 0, rng, Measure.RandomizedTrial)
    with pytest.raises(ContractError):
        simulate_subject(s1, 0, rng, Measure.Observational, s1_curves)
    with pytest.raises(ContractError):
        SimulationRequest(s1, 0, 1)


def test_fast_death(s1):
    spec = s1.replace(death_base=np.array([0.2, 1.2]) * 1000)
    cohort = simulate_cohort(SimulationRequest(spec, 10000, 5))
    died = np.isfinite(cohort.arrays.death)
    assert died.mean() >= 0.999
    assert np.mean(cohort.arrays.death[died] < 0.05) >= 0.999


def test_no_tied_event_times(s1):
    cohort = simulate_cohort(SimulationRequest(s1, 5000, 3))
    times = np.concatenate([[e.time for e in p.events] for p in cohort])
    assert len(np.unique(times)) == len(times)


def test_cohort_tags(s1, s1_curves):
    obs = simulate_cohort(SimulationRequest(s1, 3, 1))
    rct = simulate_cohort(SimulationRequest(s1, 3, 1, Measure.RandomizedTrial), s1_curves)
    assert obs.scenario_tag == s1.digest()
    assert obs.measure_tag is Measure.Observational
    assert rct.measure_tag is Measure.RandomizedTrial


def test_latent_continuation_keeps_observed_part(s1):
    plain = simulate_cohort(SimulationRequest(s1, 300, 4))
    latent = simulate_cohort(SimulationRequest(s1, 300, 4, keep_latent=True))
    assert [p.events for p in plain] == [p.events for p in latent]
    censored = [p for p in latent if p.censor_time is not None]
    assert censored and any(p.latent_events for p in censored)
    for p in censored:
        assert all(e.time > p.censor_time for e in p.latent_events)
        assert all(e.kind is not EventKind.Censor for e in p.latent_events)


def test_latent_health(s1):
    cohort = simulate_cohort(SimulationRequest(s1, 300, 4, keep_latent=True))
    states = latent_health(cohort, 1.0)
    alive = ~(cohort.arrays.death <= 1.0)
    for p, l, a in zip(cohort, states, alive):
        dead_latent = any(e.kind is EventKind.Death and e.time <= 1.0 for e in p.latent_events)
        assert (l >= 0) == (a and not dead_latent)


def test_metadata(s1, tmp_path):
    req = SimulationRequest(s1, 10, 7, Measure.RandomizedTrial)
    write_metadata(tmp_path / "m.json", simulation_metadata(req))
    meta = json.loads((tmp_path / "m.json").read_text())
    assert meta == {"seed": 7, "measure": "rct", "n_subjects": 10, "keep_latent": False,
                    "grid_step": None, "scenario_hash": s1.digest()}


@pytest.mark.slow
def test_first_event_probabilities_match_forward_equations(s1):
    m = 10000
    cohort = simulate_cohort(SimulationRequest(s1, m, 21))
    arr = cohort.arrays
    first = np.minimum(np.minimum(arr.treatment, arr.censor), arr.death)
    oracle = first_event_probabilities(s1)
    for kind, col in (("A", arr.treatment), ("C", arr.censor), ("D", arr.death)):
        hit = (col == first) & np.isfinite(first)
        p = oracle[kind][-1]
        se = np.sqrt(p * (1 - p) / m)
        assert abs(hit.mean() - p) <= 3 * se, kind


@pytest.mark.slow
@pytest.mark.parametrize("latent", [False, True])
def test_martingale_residuals(s1, latent):
    cohort = simulate_cohort(SimulationRequest(s1, 20000, 22, keep_latent=latent))
    res = martingale_residuals(cohort, s1, np.linspace(0, 2, 21), latent=latent)
    for name, (mean, se) in res.items():
        ok = np.abs(mean) <= 4 * se + 1e-12
        assert ok.all(), name


def test_martingale_residuals_detect_wrong_rates(s1):
    cohort = simulate_cohort(SimulationRequest(s1, 5000, 23))
    mean, se = martingale_residuals(cohort, s1.replace(treat_rate=[0.3, 0.6]),
                                    np.linspace(0, 2, 5))["A"]
    assert np.max(mean / np.where(se > 0, se, 1)) > 4


@pytest.mark.slow
def test_trial_measure_randomizes_treatment(s1, s1_curves):
    obs = simulate_cohort(SimulationRequest(s1, 20000, 24))
    rct = simulate_cohort(SimulationRequest(s1, 20000, 24, Measure.RandomizedTrial), s1_curves)
    assert ("L", "A") in empirical_graph(obs)
    g = empirical_graph(rct)
    assert ("L", "A") not in g
    assert ("L", "C") not in g
    assert ("L", "D") in g
