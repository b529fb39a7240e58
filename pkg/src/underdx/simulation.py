"""Synthetic cohort generators: four benchmark scenarios plus a
multi-attribute configuration.

Each individual is simulated by first drawing a full latent stage path
over the total horizon (stage transitions happen at the start of a
timepoint, testing applies to the post-transition stage) and then drawing
test results from the emission regime.  The factual and counterfactual
worlds share every uniform draw, so the same seed yields coupled cohorts
that differ only through the testing regime; the coupled counterfactual
outcome is retained as truth.

Scenario 1 meets all model assumptions; scenario 2 degrades test
sensitivity (90% early, 95% late) so a tested case may be confirmed
negative; scenario 3 gives the under-tested group a faster progression
rate; scenario 4 runs 20 timepoints and re-baselines at t=10, discarding
earlier testing information and anyone already diagnosed.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .data import Cohort
from .errors import ConfigError
from .model import (
    GROUP_RATES,
    LOGISTIC_SHARED,
    WEIBULL,
    EmissionModel,
    HazardModel,
    HmmParams,
    hazard_curve,
)

_SCENARIO_HAZARD_COEF = (0.5, -0.25, 0.25)  # over (x1, x2, a)
_SCENARIO_RATES = {"s0_a0": 0.025, "s0_a1": 0.01, "s1_a0": 0.1, "s1_a1": 0.05, "late": 0.3}


@dataclass(frozen=True)
class ScenarioConfig:
    """Generator settings for the four benchmark scenarios."""

    scenario: int
    n: int
    horizon: int = 10
    counterfactual_world: bool = False
    p_attribute: float = 0.2
    scale: float = 0.005
    shape: float = 1.5
    hazard_coef: tuple = _SCENARIO_HAZARD_COEF
    progression: float = 0.1
    progression_underserved: float = 0.13  # scenario 3 only
    rates: tuple = (
        _SCENARIO_RATES["s0_a0"],
        _SCENARIO_RATES["s0_a1"],
        _SCENARIO_RATES["s1_a0"],
        _SCENARIO_RATES["s1_a1"],
        _SCENARIO_RATES["late"],
    )
    sensitivity_early: float = 1.0  # scenario 2 overrides to 0.90
    sensitivity_late: float = 1.0  # scenario 2 overrides to 0.95

    def __post_init__(self):
        if self.scenario not in (1, 2, 3, 4):
            raise ConfigError(f"scenario must be 1..4, got {self.scenario}")
        if self.n < 1:
            raise ConfigError("n must be >= 1")
        probs = (self.p_attribute, *self.rates, self.progression,
                 self.progression_underserved, self.sensitivity_early, self.sensitivity_late)
        if any(not 0.0 <= p <= 1.0 for p in probs):
            raise ConfigError("scenario probabilities must lie in [0, 1]")
        if self.scenario == 2:
            object.__setattr__(self, "sensitivity_early", 0.90)
            object.__setattr__(self, "sensitivity_late", 0.95)

    @property
    def total_horizon(self) -> int:
        return 2 * self.horizon if self.scenario == 4 else self.horizon

    def true_params(self) -> HmmParams:
        """Generating parameters in fitted-model form.

        Scenario 3 generates group-specific progression; the returned value
        carries the reference group's rate (the fitted model shares one).
        """
        hz = HazardModel(WEIBULL, np.array(self.hazard_coef), self.total_horizon,
                         scale=self.scale, shape=self.shape)
        em = EmissionModel(GROUP_RATES, rate_late=self.rates[4],
                           rates_stage0=np.array(self.rates[:2]),
                           rates_stage1=np.array(self.rates[2:4]))
        return HmmParams(hz, em, progression=self.progression, baseline_late_fraction=0.0)


@dataclass(frozen=True)
class MultiAttributeConfig:
    """Generator with several observability attributes and a shared logistic
    testing rate for stages 0/1, mirroring a multi-predictor case study."""

    n: int
    attribute_prevalence: tuple
    emission_coefficients: tuple  # intercept + one per attribute
    rate_late: float
    hazard_coef: tuple  # over risk covariates then attributes
    scale: float
    shape: float
    progression: float
    baseline_late_fraction: float = 0.0
    n_covariates: int = 2
    horizon: int = 10
    counterfactual_world: bool = False
    reference: tuple | None = None  # attribute values defining the reference regime

    def __post_init__(self):
        n_att = len(self.attribute_prevalence)
        if len(self.emission_coefficients) != n_att + 1:
            raise ConfigError("emission_coefficients must be intercept + one per attribute")
        if len(self.hazard_coef) != self.n_covariates + n_att:
            raise ConfigError("hazard_coef must cover covariates then attributes")
        if self.counterfactual_world and self.reference is None:
            raise ConfigError("counterfactual world requires a reference attribute vector")

    def true_params(self) -> HmmParams:
        hz = HazardModel(WEIBULL, np.array(self.hazard_coef), self.horizon,
                         scale=self.scale, shape=self.shape)
        em = EmissionModel(LOGISTIC_SHARED, rate_late=self.rate_late,
                           coefficients=np.array(self.emission_coefficients),
                           constraint_late_ge_early=True)
        return HmmParams(hz, em, progression=self.progression,
                         baseline_late_fraction=self.baseline_late_fraction)


@dataclass(frozen=True, eq=False)
class SimulatedCohort:
    """Observed records plus generating truth.

    ``stages`` covers the cohort's observation window; ``d_cf_true`` is the
    coupled counterfactual outcome (-1 where undefined, e.g. excluded from
    the counterfactual world after re-baselining); ``baseline_stage`` is the
    latent stage at the re-baselined entry (scenario 4 only).
    """

    cohort: Cohort
    stages: np.ndarray
    d_cf_true: np.ndarray
    cf_first_positive: np.ndarray | None = None  # 0 where the coupled cf world has no positive
    baseline_stage: np.ndarray | None = None


def _draw_stage_paths(rng_uniform: np.ndarray, h: np.ndarray, progression: np.ndarray,
                      baseline_late: float) -> np.ndarray:
    """(n, T) latent stage paths from per-(individual, t) uniforms."""
    n, total = rng_uniform.shape
    stages = np.zeros((n, total), dtype=np.int8)
    u0 = rng_uniform[:, 0]
    stages[:, 0] = np.where(u0 < h[:, 0] * baseline_late, 2, np.where(u0 < h[:, 0], 1, 0))
    for t in range(1, total):
        prev = stages[:, t - 1]
        u = rng_uniform[:, t]
        incident = (prev == 0) & (u < h[:, t])
        progressed = (prev == 1) & (u < progression)
        stages[:, t] = prev + incident + progressed
    return stages


def _draw_results(stages, stage_rates, u_test, u_sens, sens_early, sens_late):
    """(n, T) result codes: censoring is applied afterwards."""
    n, total = stages.shape
    rows = np.arange(n)[:, None]
    tested = u_test < stage_rates[rows, stages]
    results = np.full((n, total), 3, dtype=np.int8)
    confirmed = np.where(
        stages == 1, u_sens < sens_early, np.where(stages == 2, u_sens < sens_late, False)
    )
    observed_stage = np.where(confirmed, stages, 0)
    results[tested] = observed_stage[tested]
    return results


def _censor(results: np.ndarray, horizon: int) -> tuple[np.ndarray, np.ndarray]:
    """Truncate at the first positive; returns (censored results, t_n)."""
    n = results.shape[0]
    positive = (results == 1) | (results == 2)
    any_pos = positive.any(axis=1)
    first = np.where(any_pos, positive.argmax(axis=1) + 1, horizon)
    out = results[:, :horizon].copy()
    mask = np.arange(1, horizon + 1)[None, :] > first[:, None]
    out[mask] = 3
    return out, first.astype(np.int64)


def _simulate_engine(X, A, hazard_matrix, baseline_late: float, progression_per_ind,
                     seed: int, total_horizon: int, factual_rates, cf_rates,
                     sens_early: float, sens_late: float, use_cf_world: bool,
                     x_names, a_names, cf_from: int = 0) -> SimulatedCohort:
    """Shared generation engine.

    The counterfactual world swaps in the reference testing rates from
    timepoint ``cf_from`` on (0 for the closed-cohort scenarios; the
    re-baselining point for the open cohort, where the intervention starts
    at study entry).  Both worlds share all uniform draws, so the same seed
    gives coupled cohorts.
    """
    n = X.shape[0]
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), 0xC0F0)))
    u_stage = rng.uniform(size=(n, total_horizon))
    u_test = rng.uniform(size=(n, total_horizon))
    u_sens = rng.uniform(size=(n, total_horizon))

    stages = _draw_stage_paths(u_stage, hazard_matrix, progression_per_ind, baseline_late)

    res_factual = _draw_results(stages, factual_rates, u_test, u_sens, sens_early, sens_late)
    res_cf = _draw_results(stages, cf_rates, u_test, u_sens, sens_early, sens_late)
    if cf_from > 0:
        res_cf = np.concatenate([res_factual[:, :cf_from], res_cf[:, cf_from:]], axis=1)
    cf_positive = (res_cf == 1) | (res_cf == 2)
    cf_first = np.where(cf_positive.any(axis=1), cf_positive.argmax(axis=1) + 1, 0)
    d_cf_true = (cf_first > 0).astype(np.int8)

    observed = res_cf if use_cf_world else res_factual
    results, t_n = _censor(observed, total_horizon)
    cohort = Cohort(
        ids=np.arange(n, dtype=np.int64),
        x=X,
        a=A,
        results=results,
        t_n=t_n,
        horizon=total_horizon,
        x_names=x_names,
        a_names=a_names,
    )
    return SimulatedCohort(cohort=cohort, stages=stages, d_cf_true=d_cf_true,
                           cf_first_positive=cf_first.astype(np.int64))


def simulate_cohort(cfg: ScenarioConfig, seed: int) -> SimulatedCohort:
    """Generate one scenario cohort (scenario 4: over the full 20 timepoints;
    apply rebaseline_open_cohort afterwards)."""
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), 0xC0DE)))
    n = cfg.n
    a = (rng.uniform(size=n) < cfg.p_attribute).astype(np.float64)[:, None]
    x1 = np.where(a[:, 0] > 0.5, rng.normal(1.0, 1.5, size=n), rng.normal(0.0, 1.0, size=n))
    x2 = rng.normal(0.5, 1.0, size=n)
    X = np.column_stack([x1, x2])

    progression = np.where(
        (cfg.scenario == 3) & (a[:, 0] > 0.5), cfg.progression_underserved, cfg.progression
    )
    emission = EmissionModel(GROUP_RATES, rate_late=cfg.rates[4],
                             rates_stage0=np.array(cfg.rates[:2]),
                             rates_stage1=np.array(cfg.rates[2:4]))
    if cfg.scale == 0.0:
        hazard_matrix = np.zeros((n, cfg.total_horizon))
    else:
        hazard_matrix = hazard_curve(cfg.true_params(), X, a, n_steps=cfg.total_horizon)
    factual_rates = emission.stage_rates(a)
    cf_rates = emission.stage_rates(np.zeros_like(a))
    return _simulate_engine(
        X, a, hazard_matrix, 0.0, progression, seed, cfg.total_horizon,
        factual_rates, cf_rates, cfg.sensitivity_early, cfg.sensitivity_late,
        cfg.counterfactual_world, ("x_1", "x_2"), ("a_1",),
        cf_from=cfg.horizon if cfg.scenario == 4 else 0,
    )


def rebaseline_open_cohort(sim: SimulatedCohort, baseline: int | None = None) -> SimulatedCohort:
    """Re-enter an open cohort at ``baseline`` (default: half the total window).

    Individuals diagnosed at or before the baseline are dropped; survivors
    keep only post-baseline timepoints, relabelled 1..horizon, with the
    latent stage at the baseline retained as truth.
    """
    total = sim.cohort.horizon
    baseline = total // 2 if baseline is None else baseline
    horizon = total - baseline
    diagnosed_early = sim.cohort.diagnosed & (sim.cohort.t_n <= baseline)
    keep = ~diagnosed_early

    results = sim.cohort.results[keep, baseline:]
    t_n = np.where(
        sim.cohort.diagnosed[keep], sim.cohort.t_n[keep] - baseline, horizon
    ).astype(np.int64)
    cohort = Cohort(
        ids=sim.cohort.ids[keep],
        x=sim.cohort.x[keep],
        a=sim.cohort.a[keep],
        results=results,
        t_n=t_n,
        horizon=horizon,
        x_names=sim.cohort.x_names,
        a_names=sim.cohort.a_names,
    )
    # Coupled counterfactual outcome over the post-baseline window: undefined
    # (-1) for individuals the counterfactual world would have diagnosed and
    # excluded before the baseline.
    cf_first = sim.cf_first_positive[keep]
    d_cf = np.where(
        (cf_first > 0) & (cf_first <= baseline), -1, (cf_first > baseline).astype(np.int8)
    ).astype(np.int8)
    return SimulatedCohort(
        cohort=cohort,
        stages=sim.stages[keep, baseline:],
        d_cf_true=d_cf,
        cf_first_positive=cf_first,
        baseline_stage=sim.stages[keep, baseline - 1].copy(),
    )


def generate_scenario_cohort(cfg: ScenarioConfig, seed: int) -> SimulatedCohort:
    """simulate_cohort plus scenario-4 rebaselining; what the CLI ships."""
    sim = simulate_cohort(cfg, seed)
    if cfg.scenario == 4:
        sim = rebaseline_open_cohort(sim, baseline=cfg.horizon)
    return sim


def simulate_multi_attribute(cfg: MultiAttributeConfig, seed: int) -> SimulatedCohort:
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), 0xC0DE)))
    n = cfg.n
    prev = np.asarray(cfg.attribute_prevalence)
    a = (rng.uniform(size=(n, prev.shape[0])) < prev[None, :]).astype(np.float64)
    X = rng.normal(0.0, 1.0, size=(n, cfg.n_covariates))

    truth = cfg.true_params()
    hazard_matrix = hazard_curve(truth, X, a, n_steps=cfg.horizon)
    factual_rates = truth.emission.stage_rates(a)
    if cfg.reference is not None:
        cf_rates = truth.emission.stage_rates(
            np.broadcast_to(np.asarray(cfg.reference, dtype=np.float64), a.shape)
        )
    else:
        cf_rates = factual_rates
    progression = np.full(n, cfg.progression)
    x_names = tuple(f"x_{i+1}" for i in range(cfg.n_covariates))
    a_names = tuple(f"a_{i+1}" for i in range(prev.shape[0]))
    return _simulate_engine(
        X, a, hazard_matrix, cfg.baseline_late_fraction, progression, seed, cfg.horizon,
        factual_rates, cf_rates, 1.0, 1.0, cfg.counterfactual_world, x_names, a_names,
    )
