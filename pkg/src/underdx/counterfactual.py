"""Latent-stage smoothing, counterfactual diagnosis risk, and outcome re-imputation.

Smoothing turns the forward sweep's cached quantities into per-timepoint
stage posteriors given the *full* test history, by a backward recursion.
Conditioned on the history, the latent path is still a Markov chain whose
one-step transitions are the transition kernel reweighted by the ratio of
smoothed to predicted stage probabilities; the counterfactual recursion
walks that chain forward while tracking the probability that an
independent redraw of the testing process under a reference emission
regime has not yet produced a positive test.  Because a disease-free
stage can never emit a positive, only the early/late testing rates of the
reference regime matter.

Re-imputation leaves reference-regime individuals and everyone already
diagnosed untouched, and redraws the remaining outcomes as Bernoulli in
their counterfactual probability scaled by a group-level factor chosen so
the expected imputed incidence equals the estimated counterfactual
incidence.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Cohort, IndividualRecord
from .errors import DataError, DimensionError, RecalibrationError
from .inference import ForwardPass, forward_pass
from .model import HmmParams, hazard_curve
from .util import unit_uniform


def _safe_ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    """num / den with 0/0 -> 0 (impossible states carry no posterior mass)."""
    out = np.zeros_like(num)
    np.divide(num, den, out=out, where=den > 0.0)
    return out


def smoothed_posteriors(params: HmmParams, cohort: Cohort,
                        fwd: ForwardPass | None = None,
                        emission_floor: float = 0.0) -> np.ndarray:
    """(n, horizon, 3) stage posteriors given each full history.

    Entries at t > t_n[i] are zero-filled and must not be consumed.  At the
    final timepoint the posterior equals the filtered distribution (one-hot
    whenever a test was observed, tests being perfect); earlier timepoints
    follow the backward recursion.
    """
    if fwd is None:
        fwd = forward_pass(params, cohort, emission_floor)
    n, horizon = cohort.n, cohort.horizon
    smoothed = np.zeros((n, horizon, 3))
    rows = np.arange(n)
    last = cohort.t_n - 1
    smoothed[rows, last] = fwd.stage_post[rows, last]

    prog = params.progression
    for t in range(horizon - 2, -1, -1):
        live = last > t
        if not np.any(live):
            continue
        ratio = _safe_ratio(smoothed[live, t + 1], fwd.stage_prior[live, t + 1])
        h = fwd.hazards[live, t + 1]
        back = np.empty_like(ratio)
        back[:, 0] = (1.0 - h) * ratio[:, 0] + h * ratio[:, 1]
        back[:, 1] = (1.0 - prog) * ratio[:, 1] + prog * ratio[:, 2]
        back[:, 2] = ratio[:, 2]
        smoothed[live, t] = fwd.stage_post[live, t] * back
    return smoothed


def smoothed_stage_posterior(params: HmmParams, record: IndividualRecord) -> np.ndarray:
    """(t_n, 3) smoothed stage posterior for one individual."""
    cohort = Cohort.from_records([record], horizon=record.t_n)
    return smoothed_posteriors(params, cohort)[0, : record.t_n]


@dataclass(frozen=True, eq=False)
class CounterfactualResult:
    """Diagnosis risk under a reference testing regime, given the history.

    ``hazard_seq[t]`` is the probability of a first counterfactual positive
    at timepoint t+1 given none before; ``survivor_seq[t]`` the probability
    of no positive through t+1; ``p_cf`` = 1 - survivor_seq[-1].
    """

    p_cf: float
    hazard_seq: np.ndarray
    survivor_seq: np.ndarray


def counterfactual_probs(params: HmmParams, cohort: Cohort, reference,
                         horizon: int | None = None,
                         fwd: ForwardPass | None = None,
                         full: bool = False,
                         emission_floor: float = 0.0):
    """Vectorized counterfactual diagnosis probabilities for a cohort.

    ``reference`` is an attribute vector (applied to everyone) or an
    (n, n_a) matrix of per-individual counterfactual attribute rows.
    Returns the (n,) probability of diagnosis by ``horizon`` (default: the
    cohort horizon); with ``full=True`` also the (n, horizon) hazard and
    survivor sequences.
    """
    n = cohort.n
    horizon = cohort.horizon if horizon is None else int(horizon)
    if horizon < cohort.horizon and np.any(cohort.t_n > horizon):
        raise DataError("counterfactual horizon is shorter than an individual's follow-up")
    reference = np.asarray(reference, dtype=np.float64)
    if reference.ndim == 1:
        reference = np.broadcast_to(reference, (n, reference.shape[0]))
    if reference.shape != (n, cohort.a.shape[1]):
        raise DimensionError(
            f"reference attribute shape {reference.shape} does not match (n, {cohort.a.shape[1]})"
        )

    if fwd is None:
        fwd = forward_pass(params, cohort, emission_floor)
    smoothed = smoothed_posteriors(params, cohort, fwd)
    cf_rates = params.emission.stage_rates(reference)  # (n, 3)
    pos1, pos2 = cf_rates[:, 1], cf_rates[:, 2]  # stage 0 never emits a positive

    hz = fwd.hazards
    if horizon > cohort.horizon:
        hz = hazard_curve(params, cohort.x, cohort.a, n_steps=horizon)
    prog = params.progression
    last = cohort.t_n - 1

    hazards = np.empty((n, horizon))
    survivors = np.empty((n, horizon))

    w = smoothed[:, 0].copy()
    haz = pos1 * w[:, 1] + pos2 * w[:, 2]
    hazards[:, 0] = haz
    surv = 1.0 - haz
    survivors[:, 0] = surv
    v = w.copy()
    v[:, 1] *= 1.0 - pos1
    v[:, 2] *= 1.0 - pos2
    v /= (1.0 - haz)[:, None]

    for t in range(1, horizon):
        within = last >= t  # smoothed transition still informed by the history
        w = np.empty((n, 3))
        if np.any(within):
            y = _safe_ratio(fwd.stage_post[within, t - 1] * v[within], smoothed[within, t - 1])
            h = hz[within, t]
            z = np.empty_like(y)
            z[:, 0] = (1.0 - h) * y[:, 0]
            z[:, 1] = h * y[:, 0] + (1.0 - prog) * y[:, 1]
            z[:, 2] = prog * y[:, 1] + y[:, 2]
            w[within] = z * _safe_ratio(smoothed[within, t], fwd.stage_prior[within, t])
        beyond = ~within
        if np.any(beyond):
            vb = v[beyond]
            h = hz[beyond, t]
            z = np.empty_like(vb)
            z[:, 0] = (1.0 - h) * vb[:, 0]
            z[:, 1] = h * vb[:, 0] + (1.0 - prog) * vb[:, 1]
            z[:, 2] = prog * vb[:, 1] + vb[:, 2]
            w[beyond] = z
        haz = pos1 * w[:, 1] + pos2 * w[:, 2]
        hazards[:, t] = haz
        surv = surv * (1.0 - haz)
        survivors[:, t] = surv
        v = w
        v[:, 1] *= 1.0 - pos1
        v[:, 2] *= 1.0 - pos2
        v /= (1.0 - haz)[:, None]

    p_cf = 1.0 - survivors[:, -1]
    if full:
        return p_cf, hazards, survivors
    return p_cf


def counterfactual_diagnosis_prob(params: HmmParams, record: IndividualRecord,
                                  reference, horizon: int | None = None) -> CounterfactualResult:
    """Counterfactual diagnosis risk for one individual under ``reference``."""
    horizon = record.t_n if horizon is None else horizon
    if horizon < record.t_n:
        raise DataError("horizon must be at least the individual's follow-up length")
    cohort = Cohort.from_records([record], horizon=record.t_n)
    p, hz, sv = counterfactual_probs(params, cohort, reference, horizon=horizon, full=True)
    return CounterfactualResult(p_cf=float(p[0]), hazard_seq=hz[0], survivor_seq=sv[0])


def factual_diagnosis_prob(params: HmmParams, record: IndividualRecord,
                           horizon: int | None = None) -> CounterfactualResult:
    """Model-implied diagnosis risk under the individual's own testing regime."""
    return counterfactual_diagnosis_prob(params, record, record.a, horizon=horizon)


# ---------------------------------------------------------------------------
# Recalibration and re-imputation


@dataclass(frozen=True)
class RecalibrationResult:
    factor: float
    raw_factor: float
    clamped: bool


def recalibration_factor(p_cf, diagnosed, group) -> RecalibrationResult:
    """Scaling applied to undiagnosed group members' counterfactual risk.

    Chosen so that (expected imputed diagnoses) + (observed diagnoses)
    equals the group's total counterfactual probability mass:
    factor = (mean p_cf - observed incidence) / (undiagnosed p_cf mass / group size).
    Clamped to [0, 1]; a negative raw value means the observed incidence
    already exceeds the estimated counterfactual incidence.
    """
    p_cf = np.asarray(p_cf, dtype=np.float64)
    diagnosed = np.asarray(diagnosed, dtype=bool)
    group = np.asarray(group, dtype=bool)
    n_group = int(group.sum())
    if n_group == 0:
        raise RecalibrationError("recalibration group is empty")
    undiag = group & ~diagnosed
    denom = p_cf[undiag].sum() / n_group
    if denom <= 1e-12:
        raise RecalibrationError("no counterfactual probability mass among undiagnosed members")
    raw = (p_cf[group].mean() - diagnosed[group].mean()) / denom
    factor = float(np.clip(raw, 0.0, 1.0))
    return RecalibrationResult(factor=factor, raw_factor=float(raw), clamped=factor != raw)


@dataclass(frozen=True, eq=False)
class ImputationResult:
    d_cf: np.ndarray  # (n,) imputed counterfactual outcomes
    p_cf: np.ndarray
    factor_applied: np.ndarray  # (n,) NaN where no re-imputation happened
    is_reference: np.ndarray  # (n,) testing regime unchanged under the reference
    factors: dict
    n_clamped: int


def reference_attribute_rows(cohort: Cohort, reference) -> np.ndarray:
    """Expand a reference spec into per-individual counterfactual attribute rows.

    ``reference`` is either a full attribute vector or a {name: value} map
    over a subset of attribute columns (unnamed attributes keep each
    individual's own value).
    """
    if isinstance(reference, dict):
        rows = cohort.a.copy()
        for name, value in reference.items():
            if name not in cohort.a_names:
                raise DataError(f"unknown observability attribute {name!r}; have {cohort.a_names}")
            rows[:, cohort.a_names.index(name)] = float(value)
        return rows
    reference = np.asarray(reference, dtype=np.float64)
    if reference.shape != (cohort.a.shape[1],):
        raise DimensionError(
            f"reference vector has shape {reference.shape}, expected ({cohort.a.shape[1]},)"
        )
    return np.broadcast_to(reference, cohort.a.shape).copy()


def impute_counterfactual_outcomes(params: HmmParams, cohort: Cohort, reference,
                                   seed: int, per_stratum: bool = False,
                                   p_cf: np.ndarray | None = None,
                                   emission_floor: float = 0.0) -> ImputationResult:
    """Re-impute outcomes under the reference testing regime.

    Observed diagnoses are kept (monotonicity), reference-regime members are
    left untouched (their counterfactual equals their factual outcome), and
    undiagnosed non-reference members are redrawn as
    Bernoulli(factor * p_cf) with per-individual uniforms hashed from
    (seed, id).  ``per_stratum`` recalibrates within each distinct factual
    attribute pattern among non-reference members instead of pooling.
    """
    cf_rows = reference_attribute_rows(cohort, reference)
    if p_cf is None:
        p_cf = counterfactual_probs(params, cohort, cf_rows, emission_floor=emission_floor)
    is_reference = np.all(cf_rows == cohort.a, axis=1)
    diagnosed = cohort.diagnosed

    d_cf = diagnosed.astype(np.int8)
    d_cf[is_reference] = diagnosed[is_reference]
    factor_applied = np.full(cohort.n, np.nan)

    non_ref = ~is_reference
    factors: dict = {}
    n_clamped = 0
    if np.any(non_ref & ~diagnosed):
        if per_stratum:
            patterns = np.unique(cohort.a[non_ref], axis=0)
            groups = [(tuple(p.tolist()), non_ref & np.all(cohort.a == p, axis=1)) for p in patterns]
        else:
            groups = [("pooled", non_ref)]
        u = unit_uniform(seed, cohort.ids)
        for key, mask in groups:
            rec = recalibration_factor(p_cf, diagnosed, mask)
            factors[key] = rec.factor
            target = mask & ~diagnosed
            prob = rec.factor * p_cf[target]
            n_clamped += int((prob > 1.0).sum())
            prob = np.clip(prob, 0.0, 1.0)
            d_cf[target] = (u[target] < prob).astype(np.int8)
            factor_applied[target] = rec.factor
    return ImputationResult(
        d_cf=d_cf,
        p_cf=np.asarray(p_cf, dtype=np.float64),
        factor_applied=factor_applied,
        is_reference=is_reference,
        factors=factors,
        n_clamped=n_clamped,
    )
