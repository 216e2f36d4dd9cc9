"""Continuous-time marginal structural models for event-history data.

Simulate confounded cohorts from a finite-state patient model, compute the
likelihood-ratio weights that turn them into randomized-trial cohorts, and
fit weighted additive hazard models.
"""

from .core import (Cohort, ContractError, EventKind, EventRecord, Measure,
                   StepFunction, SubjectPath, read_event_log, write_event_log)
from .estimate import (AdditiveHazardRegression, FitResult, NelsonAalen, TieError,
                       aalen_fit, bootstrap_band, nelson_aalen)
from .filters import (oracle_marginal_hazards, projection_curves,
                      treatment_projection, censor_projection)
from .scenario import (ConfigError, ScenarioSpec, check_positivity, load_scenario,
                       no_confounding_scenario, scenario_s1, scenario_s2)
from .simulate import SimulationRequest, simulate_cohort, simulate_subject
from .weights import (CohortWeights, DegenerateWeightError, StabilizedWeights,
                      compute_weights, likelihood_ratio_path, weight_diagnostics)

__version__ = "0.1.0"

__all__ = [
    "AdditiveHazardRegression", "Cohort", "CohortWeights", "ConfigError",
    "ContractError", "DegenerateWeightError", "EventKind", "EventRecord",
    "FitResult", "Measure", "NelsonAalen", "ScenarioSpec", "SimulationRequest",
    "StabilizedWeights", "StepFunction", "SubjectPath", "TieError", "aalen_fit",
    "bootstrap_band", "censor_projection", "check_positivity", "compute_weights",
    "likelihood_ratio_path", "load_scenario", "nelson_aalen",
    "no_confounding_scenario", "oracle_marginal_hazards", "projection_curves",
    "read_event_log", "scenario_s1", "scenario_s2", "simulate_cohort",
    "simulate_subject", "treatment_projection", "weight_diagnostics",
    "write_event_log",
]
