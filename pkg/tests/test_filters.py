import numpy as np
import pytest
from scipy import integrate
from scipy.linalg import expm

from ctmsm.core import ContractError
from ctmsm.filters import (DegenerateProjectionError, NotExactError, censor_projection,
                           make_grid, oracle_marginal_hazards, projection_curves,
                           solve_filter, treatment_projection)
from ctmsm.simulate import SimulationRequest, simulate_cohort

from conftest import mc_conditional_rate


def zakai(init, q, rates, t):
    """Unnormalised filter ``init expm((Q - diag r) t)``, normalised."""
    u = np.asarray(init) @ expm((q - np.diag(rates)) * t)
    return u / u.sum()


def test_make_grid():
    g = make_grid(2.0, 0.25)
    np.testing.assert_allclose(g, np.arange(9) * 0.25)
    assert len(make_grid(2.0)) == 2001
    with pytest.raises(ContractError):
        make_grid(2.0, 0.0)


def test_constant_projections(nc):
    h = treatment_projection(nc)
    cu, ct = censor_projection(nc)
    np.testing.assert_allclose(h.values, 0.3, rtol=1e-13)
    np.testing.assert_allclose(cu.values, 0.1, rtol=1e-13)
    np.testing.assert_allclose(ct.values, 0.1, rtol=1e-13)


def test_initial_values(s1, s1_curves):
    assert s1_curves.treatment(0.0) == pytest.approx(0.3 * 0.7 + 1.2 * 0.3)
    assert s1_curves.censor_untreated(0.0) == pytest.approx(0.1 * 0.7 + 0.4 * 0.3)


@pytest.mark.parametrize("t", [0.3, 1.0, 1.7, 2.0])
def test_treatment_projection_matches_matrix_exponential(s1, s1_curves, t):
    pi = zakai(s1.init_dist, s1.generator_untreated, s1.treat_rate + s1.death_base, t)
    assert s1_curves.treatment(t) == pytest.approx(pi @ s1.treat_rate, abs=1e-10)


@pytest.mark.parametrize("t", [0.3, 1.0, 2.0])
def test_untreated_censor_projection_matches_matrix_exponential(s1, s1_curves, t):
    pi = zakai(s1.init_dist, s1.generator_untreated,
               s1.treat_rate + s1.censor_rate + s1.death_base, t)
    assert s1_curves.censor_untreated(t) == pytest.approx(pi @ s1.censor_rate, abs=1e-10)


@pytest.mark.parametrize("t_a,t", [(0.0, 0.0), (0.5, 0.5), (0.5, 1.5), (1.2, 2.0)])
def test_treated_censor_family_matches_matrix_exponential(s2, t_a, t):
    # S2 has different treated dynamics, which the family must pick up
    _, ct = censor_projection(s2)
    pu = zakai(s2.init_dist, s2.generator_untreated,
               s2.treat_rate + s2.censor_rate + s2.death_base, t_a)
    start = pu * s2.treat_rate
    pi = zakai(start / start.sum(), s2.generator_treated,
               s2.censor_rate + s2.death_base + s2.death_treat_effect, t - t_a)
    assert float(ct(t_a, t)) == pytest.approx(pi @ s2.censor_rate, abs=1e-10)


def test_family_integral_matches_quadrature(s1_curves):
    ct = s1_curves.censor_treated
    t_a, t = 0.4321, 1.8765
    s = np.linspace(t_a, t, 200001)
    ref = integrate.trapezoid(ct(t_a, s), s)
    assert float(ct.integral(t_a, t)) == pytest.approx(ref, rel=1e-8)
    # scalar and vector forms agree
    ts = np.array([0.5, 1.0, 1.9])
    np.testing.assert_allclose(ct.integral(t_a, ts), ct.integral(np.full(3, t_a), ts),
                               rtol=1e-13)


def test_filter_state_stays_a_probability_vector(s1):
    grid = make_grid(s1.horizon)
    pi = solve_filter(s1.init_dist, s1.generator_untreated, [5.0, 0.01], grid)
    assert pi.min() >= 0
    np.testing.assert_allclose(pi.sum(axis=1), 1.0, atol=1e-8)


def test_projections_are_bracketed(s1, s1_curves):
    h = s1_curves.treatment.values
    assert h.min() >= s1.treat_rate.min() - 1e-12
    assert h.max() <= s1.treat_rate.max() + 1e-12
    for v in (s1_curves.censor_untreated.values, s1_curves.censor_treated.values):
        assert v.min() >= s1.censor_rate.min() - 1e-12
        assert v.max() <= s1.censor_rate.max() + 1e-12


def test_grid_refinement(s1):
    coarse = projection_curves(s1)
    fine = projection_curves(s1, coarse.treatment.step / 2)
    g = coarse.grid
    for name in ("treatment", "censor_untreated"):
        change = np.abs(getattr(coarse, name)(g) - getattr(fine, name)(g)).max()
        assert change < 1e-6, name
    idx = np.arange(0, len(g), 50)
    ta, t = np.meshgrid(g[idx], g[idx], indexing="ij")
    keep = t >= ta
    diff = coarse.censor_treated(ta[keep], t[keep]) - fine.censor_treated(ta[keep], t[keep])
    assert np.abs(diff).max() < 1e-6


def test_degenerate_reconditioning(s1):
    _, ct = censor_projection(s1.replace(treat_rate=[0.0, 0.0]))
    assert ct.degenerate_rows.all()
    with pytest.raises(DegenerateProjectionError):
        ct(0.5, 1.0)


def test_oracle_constant_death_rate(s1):
    spec = s1.replace(death_base=[0.2, 0.2])
    orc = oracle_marginal_hazards(spec)
    np.testing.assert_allclose(orc.beta0, 0.2, rtol=1e-12)
    np.testing.assert_allclose(orc(2.0), [0.4, -0.3], rtol=1e-12)


def test_oracle_s1(s1):
    orc = oracle_marginal_hazards(s1)
    np.testing.assert_allclose(orc.b1, -0.15 * orc.grid, atol=1e-15)
    assert orc(0.0).tolist() == [0.0, 0.0]
    assert np.all(np.diff(orc.b0) >= 0)
    # B0(t) = -log P(no death by t) of the untreated health-death chain
    for t in (0.5, 1.0, 2.0):
        surv = s1.init_dist @ expm((s1.generator_untreated - np.diag(s1.death_base)) * t) @ np.ones(2)
        assert orc(t)[0] == pytest.approx(-np.log(surv), abs=1e-10)


def test_oracle_not_exact_when_treatment_moves_health(s2):
    with pytest.raises(NotExactError):
        oracle_marginal_hazards(s2)


@pytest.mark.slow
def test_treatment_projection_monte_carlo(s1, s1_curves):
    cohort = simulate_cohort(SimulationRequest(s1.replace(censor_rate=[0.0, 0.0]), 30000, 11))
    mean, se = mc_conditional_rate(cohort, 1.0, s1.treat_rate)
    assert abs(mean - s1_curves.treatment(1.0)) <= 3 * se


@pytest.mark.slow
def test_censor_projection_monte_carlo(s1, s1_curves):
    cohort = simulate_cohort(SimulationRequest(s1, 30000, 12))
    mean, se = mc_conditional_rate(cohort, 1.0, s1.censor_rate)
    assert abs(mean - s1_curves.censor_untreated(1.0)) <= 3 * se
