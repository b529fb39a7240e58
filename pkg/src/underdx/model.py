"""Parametric pieces of the disease-progression and testing model.

Three latent stages (0 = no disease, 1 = early, 2 = late) evolve through a
forward-only chain: incidence is driven by a covariate-dependent hazard,
early-to-late progression by a single shared probability, and stage 2 is
absorbing.  At each timepoint a test result is emitted from the current
stage: a confirmatory negative (0), an early-stage positive (1), a
late-stage positive (2), or no test (3).  Tests are perfect, so a stage can
only emit its own confirmatory result or "no test"; the per-stage testing
rates may depend on observability attributes.

This module holds the parameter containers, the stochastic matrices they
induce, and the bijection onto an unconstrained real vector used by the
optimizer.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import IntEnum

import numpy as np
from scipy.special import expit, logit

from .errors import DataError, DimensionError

# Hazards are probabilities in a discrete-time chain but the Weibull form is
# unbounded, so outputs are clamped to [0, 1 - EPS_HAZARD].
EPS_HAZARD = 1e-6
# Probability-valued parameters are kept strictly inside (0, 1).
EPS_RATE = 1e-12

N_STAGES = 3
N_RESULTS = 4

WEIBULL = "Weibull"
PIECEWISE = "PiecewiseBaseline"
GROUP_RATES = "GroupRates"
LOGISTIC_SHARED = "LogisticShared"


class Stage(IntEnum):
    NONE = 0
    EARLY = 1
    LATE = 2


class TestResult(IntEnum):
    NEGATIVE = 0
    POSITIVE_EARLY = 1
    POSITIVE_LATE = 2
    NO_TEST = 3


def _as_float_vector(v, name: str) -> np.ndarray:
    arr = np.atleast_1d(np.asarray(v, dtype=np.float64))
    if arr.ndim != 1:
        raise DimensionError(f"{name} must be a 1-d vector, got shape {arr.shape}")
    return arr


@dataclass(frozen=True, eq=False)
class HazardModel:
    """Per-timepoint incidence probability for a disease-free individual.

    ``family`` is ``"Weibull"`` (scale * shape * (t/horizon)^(shape-1)) or
    ``"PiecewiseBaseline"`` (one base hazard per timepoint).  Either base is
    multiplied by exp(coefficients . (x, a)) with risk covariates first and
    observability attributes after, then clamped to [0, 1 - EPS_HAZARD].
    """

    family: str
    coefficients: np.ndarray
    horizon: int
    scale: float | None = None
    shape: float | None = None
    baseline: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "coefficients", _as_float_vector(self.coefficients, "coefficients"))
        if self.horizon < 1:
            raise DataError(f"horizon must be >= 1, got {self.horizon}")
        if self.family == WEIBULL:
            if self.scale is None or self.shape is None:
                raise DataError("Weibull hazard requires scale and shape")
            if self.scale <= 0 or self.shape <= 0:
                raise DataError(f"scale and shape must be positive, got {self.scale}, {self.shape}")
        elif self.family == PIECEWISE:
            if self.baseline is None:
                raise DataError("PiecewiseBaseline hazard requires a baseline vector")
            base = _as_float_vector(self.baseline, "baseline")
            object.__setattr__(self, "baseline", base)
            if base.shape[0] != self.horizon:
                raise DimensionError(
                    f"baseline has {base.shape[0]} entries, expected horizon={self.horizon}"
                )
            if np.any(base <= 0):
                raise DataError("baseline entries must be positive")
        else:
            raise DataError(f"unknown hazard family {self.family!r}")

    @property
    def n_coef(self) -> int:
        return self.coefficients.shape[0]


@dataclass(frozen=True, eq=False)
class EmissionModel:
    """Per-stage testing rates, possibly attribute-dependent.

    ``"GroupRates"`` keeps separate stage-0 and stage-1 rates for the two
    levels of a single binary attribute.  ``"LogisticShared"`` models one
    rate b(a) = expit(coefficients . (1, a)) shared by stages 0 and 1.  The
    late-stage rate is common to all attribute levels.  When
    ``constraint_late_ge_early`` is set, the unconstrained parameterization
    (see ParamTransform) keeps rate_late >= the largest stage-0/1 rate.
    """

    form: str
    rate_late: float
    rates_stage0: np.ndarray | None = None  # GroupRates: (rate at a=0, rate at a=1)
    rates_stage1: np.ndarray | None = None
    coefficients: np.ndarray | None = None  # LogisticShared: intercept + one per attribute
    constraint_late_ge_early: bool = False

    def __post_init__(self):
        if not 0.0 < self.rate_late < 1.0:
            raise DataError(f"rate_late must be strictly inside (0, 1), got {self.rate_late}")
        if self.form == GROUP_RATES:
            if self.rates_stage0 is None or self.rates_stage1 is None:
                raise DataError("GroupRates emission requires rates_stage0 and rates_stage1")
            for name in ("rates_stage0", "rates_stage1"):
                arr = _as_float_vector(getattr(self, name), name)
                object.__setattr__(self, name, arr)
                if arr.shape[0] != 2:
                    raise DimensionError(f"{name} must have one rate per attribute level (2)")
                if np.any(arr <= 0.0) or np.any(arr >= 1.0):
                    raise DataError(f"{name} entries must be strictly inside (0, 1)")
        elif self.form == LOGISTIC_SHARED:
            if self.coefficients is None:
                raise DataError("LogisticShared emission requires coefficients")
            object.__setattr__(
                self, "coefficients", _as_float_vector(self.coefficients, "coefficients")
            )
        else:
            raise DataError(f"unknown emission form {self.form!r}")

    @property
    def n_attributes(self) -> int:
        if self.form == GROUP_RATES:
            return 1
        return self.coefficients.shape[0] - 1

    def shared_rate(self, a) -> np.ndarray:
        """Stage-0/1 testing rate for attribute rows ``a`` (LogisticShared)."""
        a2 = np.atleast_2d(np.asarray(a, dtype=np.float64))
        if a2.shape[1] != self.n_attributes:
            raise DimensionError(
                f"attribute vector has {a2.shape[1]} entries, emission expects {self.n_attributes}"
            )
        return expit(self.coefficients[0] + a2 @ self.coefficients[1:])

    def stage_rates(self, a) -> np.ndarray:
        """(n, 3) testing rate per stage for attribute rows ``a``."""
        a2 = np.atleast_2d(np.asarray(a, dtype=np.float64))
        n = a2.shape[0]
        out = np.empty((n, 3))
        if self.form == GROUP_RATES:
            if a2.shape[1] != 1:
                raise DimensionError("GroupRates emission expects a single binary attribute")
            level = (a2[:, 0] > 0.5).astype(np.intp)
            out[:, 0] = self.rates_stage0[level]
            out[:, 1] = self.rates_stage1[level]
        else:
            b = self.shared_rate(a2)
            out[:, 0] = b
            out[:, 1] = b
        out[:, 2] = self.rate_late
        return out

    def max_early_rate(self, anchors=None) -> float:
        """Largest stage-0/1 rate; LogisticShared needs anchor attribute rows."""
        if self.form == GROUP_RATES:
            return float(max(self.rates_stage0.max(), self.rates_stage1.max()))
        if anchors is None:
            raise DataError("LogisticShared max_early_rate requires anchor attribute rows")
        return float(self.shared_rate(anchors).max())


@dataclass(frozen=True, eq=False)
class HmmParams:
    """Full parameter set: hazard, emission, progression, baseline late fraction."""

    hazard: HazardModel
    emission: EmissionModel
    progression: float
    baseline_late_fraction: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.progression < 1.0:
            raise DataError(f"progression must be strictly inside (0, 1), got {self.progression}")
        if not 0.0 <= self.baseline_late_fraction < 1.0:
            raise DataError(
                f"baseline_late_fraction must be in [0, 1), got {self.baseline_late_fraction}"
            )


def _check_lengths(params: HmmParams, x, a):
    x = _as_float_vector(x, "x")
    a = _as_float_vector(a, "a")
    n_coef = params.hazard.n_coef
    if x.shape[0] + a.shape[0] != n_coef:
        raise DimensionError(
            f"(x, a) has {x.shape[0]}+{a.shape[0]} entries, hazard expects {n_coef} coefficients"
        )
    return x, a


def hazard(params: HmmParams, x, a, t: int) -> float:
    """Incidence probability at timepoint t (1-based), clamped below 1."""
    x, a = _check_lengths(params, x, a)
    hz = params.hazard
    lin = float(hz.coefficients @ np.concatenate([x, a]))
    if hz.family == WEIBULL:
        base = hz.scale * hz.shape * (t / hz.horizon) ** (hz.shape - 1.0)
    else:
        if not 1 <= t <= hz.horizon:
            raise DimensionError(f"t={t} outside piecewise baseline of length {hz.horizon}")
        base = hz.baseline[t - 1]
    return float(np.clip(base * np.exp(lin), 0.0, 1.0 - EPS_HAZARD))


def hazard_curve(params: HmmParams, X, A, n_steps: int | None = None) -> np.ndarray:
    """(n, n_steps) hazard at t = 1..n_steps for covariate rows (X, A)."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    hz = params.hazard
    if X.shape[1] + A.shape[1] != hz.n_coef:
        raise DimensionError(
            f"(x, a) has {X.shape[1]}+{A.shape[1]} columns, hazard expects {hz.n_coef} coefficients"
        )
    if n_steps is None:
        n_steps = hz.horizon
    lin = np.hstack([X, A]) @ hz.coefficients
    t = np.arange(1, n_steps + 1, dtype=np.float64)
    if hz.family == WEIBULL:
        base = hz.scale * hz.shape * (t / hz.horizon) ** (hz.shape - 1.0)
    else:
        if n_steps > hz.horizon:
            raise DimensionError("piecewise baseline cannot extrapolate beyond its horizon")
        base = hz.baseline[:n_steps]
    return np.clip(np.exp(lin)[:, None] * base[None, :], 0.0, 1.0 - EPS_HAZARD)


def transition_matrix(params: HmmParams, x, a, t: int) -> np.ndarray:
    """3x3 row-stochastic stage-transition kernel into timepoint t."""
    h = hazard(params, x, a, t)
    p = params.progression
    return np.array(
        [
            [1.0 - h, h, 0.0],
            [0.0, 1.0 - p, p],
            [0.0, 0.0, 1.0],
        ]
    )


def emission_matrix(params: HmmParams, a) -> np.ndarray:
    """3x4 row-stochastic matrix of result probabilities per stage."""
    r = params.emission.stage_rates(np.atleast_2d(a))[0]
    return np.array(
        [
            [r[0], 0.0, 0.0, 1.0 - r[0]],
            [0.0, r[1], 0.0, 1.0 - r[1]],
            [0.0, 0.0, r[2], 1.0 - r[2]],
        ]
    )


def initial_state(params: HmmParams, x, a) -> np.ndarray:
    """Stage distribution at t=1, allowing undiagnosed late stage at baseline."""
    h1 = hazard(params, x, a, 1)
    bl = params.baseline_late_fraction
    return np.array([1.0 - h1, (1.0 - bl) * h1, bl * h1])


# ---------------------------------------------------------------------------
# Unconstrained parameterization


def _logit_checked(p: float, name: str) -> float:
    if not EPS_RATE < p < 1.0 - EPS_RATE:
        raise DataError(f"{name}={p} too close to the boundary for a logit transform")
    return float(logit(p))


@dataclass(frozen=True, eq=False)
class ParamTransform:
    """Bijection between HmmParams and an unconstrained real vector.

    Index layout (fixed; serialized fits rely on it):

    1. hazard coefficients, identity (n_coef slots)
    2. Weibull: log scale, log shape.  PiecewiseBaseline: log baseline
       (horizon slots)
    3. emission block.  GroupRates: logit of stage-0 rate at a=0, stage-0 at
       a=1, stage-1 at a=0, stage-1 at a=1.  LogisticShared: coefficients,
       identity
    4. late testing rate, one slot: plain logit, or, under the
       late-rate >= early-rate constraint, logit of
       (rate_late - m) / (1 - m) where m is the maximum stage-0/1 rate
       (GroupRates: over the four rates; LogisticShared: over ``anchors``,
       the attribute rows seen in the data)
    5. logit of the early-to-late progression probability
    6. logit of the baseline late fraction, only when ``free_baseline_late``

    ``template`` fixes the structural choices (families, horizon, fixed
    baseline-late value when frozen).
    """

    template: HmmParams
    free_baseline_late: bool = True
    anchors: np.ndarray | None = None

    def __post_init__(self):
        em = self.template.emission
        if em.form == LOGISTIC_SHARED and em.constraint_late_ge_early and self.anchors is None:
            raise DataError("logistic emission with the late>=early constraint requires anchors")
        if self.anchors is not None:
            object.__setattr__(
                self, "anchors", np.atleast_2d(np.asarray(self.anchors, dtype=np.float64))
            )

    @property
    def _blocks(self):
        hz = self.template.hazard
        em = self.template.emission
        i = 0
        coef = slice(i, i + hz.n_coef)
        i = coef.stop
        n_haz = 2 if hz.family == WEIBULL else hz.horizon
        haz_extra = slice(i, i + n_haz)
        i = haz_extra.stop
        n_em = 4 if em.form == GROUP_RATES else em.coefficients.shape[0]
        emission = slice(i, i + n_em)
        i = emission.stop
        late = i
        progression = i + 1
        i += 2
        baseline_late = None
        if self.free_baseline_late:
            baseline_late = i
            i += 1
        return coef, haz_extra, emission, late, progression, baseline_late, i

    @property
    def dim(self) -> int:
        return self._blocks[-1]

    def to_vector(self, params: HmmParams) -> np.ndarray:
        coef, haz_extra, emission, late, progression, baseline_late, dim = self._blocks
        hz, em = params.hazard, params.emission
        u = np.empty(dim)
        u[coef] = hz.coefficients
        if hz.family == WEIBULL:
            u[haz_extra] = np.log([hz.scale, hz.shape])
        else:
            u[haz_extra] = np.log(hz.baseline)
        if em.form == GROUP_RATES:
            u[emission] = logit(np.concatenate([em.rates_stage0, em.rates_stage1]))
        else:
            u[emission] = em.coefficients
        if em.constraint_late_ge_early:
            m = em.max_early_rate(self.anchors)
            u[late] = _logit_checked((em.rate_late - m) / (1.0 - m), "constrained rate_late")
        else:
            u[late] = _logit_checked(em.rate_late, "rate_late")
        u[progression] = _logit_checked(params.progression, "progression")
        if baseline_late is not None:
            u[baseline_late] = _logit_checked(params.baseline_late_fraction, "baseline_late_fraction")
        if not np.all(np.isfinite(u)):
            bad = int(np.flatnonzero(~np.isfinite(u))[0])
            raise DataError(f"non-finite unconstrained parameter at index {bad}")
        return u

    def from_vector(self, u) -> HmmParams:
        u = np.asarray(u, dtype=np.float64)
        coef, haz_extra, emission, late, progression, baseline_late, dim = self._blocks
        if u.shape != (dim,):
            raise DimensionError(f"parameter vector has shape {u.shape}, expected ({dim},)")
        if not np.all(np.isfinite(u)):
            bad = int(np.flatnonzero(~np.isfinite(u))[0])
            raise DataError(f"non-finite unconstrained parameter at index {bad}")
        hz0, em0 = self.template.hazard, self.template.emission
        if hz0.family == WEIBULL:
            scale, shape = np.exp(u[haz_extra])
            hz = HazardModel(WEIBULL, u[coef], hz0.horizon, scale=float(scale), shape=float(shape))
        else:
            hz = HazardModel(PIECEWISE, u[coef], hz0.horizon, baseline=np.exp(u[haz_extra]))
        if em0.form == GROUP_RATES:
            rates = expit(u[emission])
            kwargs = {"rates_stage0": rates[:2], "rates_stage1": rates[2:]}
        else:
            kwargs = {"coefficients": u[emission]}
        if em0.constraint_late_ge_early:
            probe = EmissionModel(em0.form, rate_late=0.5, constraint_late_ge_early=False, **kwargs)
            m = probe.max_early_rate(self.anchors)
            rate_late = m + (1.0 - m) * float(expit(u[late]))
        else:
            rate_late = float(expit(u[late]))
        em = EmissionModel(
            em0.form,
            rate_late=rate_late,
            constraint_late_ge_early=em0.constraint_late_ge_early,
            **kwargs,
        )
        bl = self.template.baseline_late_fraction
        if baseline_late is not None:
            bl = float(expit(u[baseline_late]))
        return HmmParams(hz, em, progression=float(expit(u[progression])), baseline_late_fraction=bl)


# ---------------------------------------------------------------------------
# Serialization


def params_to_dict(params: HmmParams) -> dict:
    hz, em = params.hazard, params.emission
    d_h = {"family": hz.family, "coefficients": hz.coefficients.tolist(), "horizon": hz.horizon}
    if hz.family == WEIBULL:
        d_h["scale"] = hz.scale
        d_h["shape"] = hz.shape
    else:
        d_h["baseline"] = hz.baseline.tolist()
    d_e = {"form": em.form, "rate_late": em.rate_late,
           "constraint_late_ge_early": em.constraint_late_ge_early}
    if em.form == GROUP_RATES:
        d_e["rates_stage0"] = em.rates_stage0.tolist()
        d_e["rates_stage1"] = em.rates_stage1.tolist()
    else:
        d_e["coefficients"] = em.coefficients.tolist()
    return {
        "hazard": d_h,
        "emission": d_e,
        "progression": params.progression,
        "baseline_late_fraction": params.baseline_late_fraction,
    }


def params_from_dict(d: dict) -> HmmParams:
    try:
        h = dict(d["hazard"])
        e = dict(d["emission"])
        hz = HazardModel(
            family=h.pop("family"),
            coefficients=h.pop("coefficients"),
            horizon=int(h.pop("horizon")),
            **h,
        )
        em = EmissionModel(form=e.pop("form"), rate_late=float(e.pop("rate_late")), **e)
        return HmmParams(
            hazard=hz,
            emission=em,
            progression=float(d["progression"]),
            baseline_late_fraction=float(d.get("baseline_late_fraction", 0.0)),
        )
    except KeyError as exc:
        raise DataError(f"parameter dictionary missing field {exc}") from exc


def save_params(params: HmmParams, path) -> None:
    with open(path, "w") as fh:
        json.dump(params_to_dict(params), fh, indent=2)


def load_params(path) -> HmmParams:
    with open(path) as fh:
        return params_from_dict(json.load(fh))
