"""Correcting heterogeneous underdiagnosis bias in clinical prediction models.

A progressive three-stage disease is modelled as a hidden Markov chain
whose emissions are confirmatory test results; fitting it by maximum
likelihood lets one re-impute outcomes under a reference testing regime
and benchmark prediction models trained on observed versus corrected
labels.
"""

__version__ = "0.1.0"

from .counterfactual import (
    CounterfactualResult,
    counterfactual_diagnosis_prob,
    counterfactual_probs,
    factual_diagnosis_prob,
    impute_counterfactual_outcomes,
    recalibration_factor,
    smoothed_posteriors,
    smoothed_stage_posterior,
)
from .data import Cohort, IndividualRecord, read_cohort, write_cohort
from .inference import (
    FitOptions,
    FitResult,
    dataset_log_likelihood,
    default_init,
    fit_mle,
    forward_log_likelihood,
    forward_states,
    load_fit,
    log_likelihood_gradient,
    save_fit,
)
from .model import (
    EmissionModel,
    HazardModel,
    HmmParams,
    ParamTransform,
    Stage,
    TestResult,
    emission_matrix,
    hazard,
    initial_state,
    load_params,
    save_params,
    transition_matrix,
)
from .prediction import (
    GlmModel,
    MetricsReport,
    auroc,
    bootstrap_optimism,
    calibration,
    decile_calibration,
    evaluate_predictions,
    fit_logistic,
    net_benefit,
    scalar_losses,
)
from .simulation import (
    MultiAttributeConfig,
    ScenarioConfig,
    SimulatedCohort,
    generate_scenario_cohort,
    rebaseline_open_cohort,
    simulate_cohort,
    simulate_multi_attribute,
)

__all__ = [name for name in dir() if not name.startswith("_")]
