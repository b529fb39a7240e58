"""Downstream logistic prediction models and their performance metrics.

Models are unpenalized maximum-likelihood logistic regressions fitted by
iteratively reweighted least squares.  Metrics cover discrimination
(AUROC by pair counting with half credit for ties), calibration (slope of
a logistic recalibration on the logit of predictions; intercept with the
logit of predictions as a fixed offset, i.e. calibration-in-the-large;
observed:expected ratio), scalar losses (Brier, mean negative
log-likelihood), equal-frequency calibration bins, and net-benefit
decision curves.  A generic bootstrap optimism correction re-runs an
arbitrary fit/evaluate pipeline on resamples.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, logit
from scipy.stats import rankdata

from .errors import DataError, MetricError, RankDeficiencyError, SeparationError
from .util import derived_seed

PRED_CLAMP = 1e-12  # predictions are clamped here before logit/log
_COEF_DIVERGENCE = 30.0  # |coefficient| beyond this flags separation


@dataclass(frozen=True, eq=False)
class GlmModel:
    """Fitted logistic regression; ``tag`` records the predictor selection."""

    coefficients: np.ndarray
    tag: str = ""

    def predict(self, design) -> np.ndarray:
        design = np.asarray(design, dtype=np.float64)
        if design.shape[1] != self.coefficients.shape[0]:
            raise DataError(
                f"design has {design.shape[1]} columns, model expects {self.coefficients.shape[0]}"
            )
        return expit(design @ self.coefficients)


def add_intercept(X) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    return np.hstack([np.ones((X.shape[0], 1)), X])


def _check_rank(design: np.ndarray, column_names) -> None:
    names = column_names or [f"column {j}" for j in range(design.shape[1])]
    rank = 0
    for j in range(design.shape[1]):
        new_rank = np.linalg.matrix_rank(design[:, : j + 1])
        if new_rank == rank:
            raise RankDeficiencyError(names[j])
        rank = new_rank


def fit_logistic(design, outcome, offset=None, tol: float = 1e-8, max_iter: int = 100,
                 column_names=None, tag: str = "") -> GlmModel:
    """Maximum-likelihood logistic fit by iteratively reweighted least squares.

    Converged when every score component |X'(y - p)| is at most ``tol``.
    ``offset`` is added to the linear predictor with coefficient fixed at 1.
    """
    X = np.atleast_2d(np.asarray(design, dtype=np.float64))
    y = np.asarray(outcome, dtype=np.float64)
    n, p = X.shape
    if y.shape != (n,):
        raise DataError(f"outcome length {y.shape} does not match design rows {n}")
    if n <= p:
        raise DataError(f"need more observations ({n}) than parameters ({p})")
    off = np.zeros(n) if offset is None else np.asarray(offset, dtype=np.float64)
    _check_rank(X, column_names)

    beta = np.zeros(p)
    for _ in range(max_iter):
        mu = expit(X @ beta + off)
        score = X.T @ (y - mu)
        if np.abs(score).max() <= tol:
            return GlmModel(coefficients=beta, tag=tag)
        w = np.clip(mu * (1.0 - mu), 1e-10, None)
        hess = X.T @ (w[:, None] * X)
        beta = beta + np.linalg.solve(hess, score)
        if np.abs(beta).max() > _COEF_DIVERGENCE:
            raise SeparationError(
                f"coefficients diverged beyond |{_COEF_DIVERGENCE}|; outcomes look separated"
            )
    raise SeparationError(f"IRLS did not reach score tolerance {tol} in {max_iter} iterations")


# ---------------------------------------------------------------------------
# Metrics


def _clamp(pred) -> np.ndarray:
    return np.clip(np.asarray(pred, dtype=np.float64), PRED_CLAMP, 1.0 - PRED_CLAMP)


def auroc(pred, outcome) -> float:
    """P(random positive outranks random negative), ties counted half."""
    pred = np.asarray(pred, dtype=np.float64)
    y = np.asarray(outcome).astype(bool)
    n_pos = int(y.sum())
    n_neg = y.shape[0] - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUROC needs at least one positive and one negative outcome")
    ranks = rankdata(pred)  # average ranks reproduce half-credit pair counting
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


@dataclass(frozen=True)
class CalibrationResult:
    slope: float
    intercept: float  # logit of predictions entered as a fixed offset
    oe_ratio: float
    intercept_joint: float  # intercept of the joint slope+intercept fit


def calibration(pred, outcome) -> CalibrationResult:
    pred = _clamp(pred)
    y = np.asarray(outcome, dtype=np.float64)
    lp = logit(pred)
    joint = fit_logistic(add_intercept(lp[:, None]), y, column_names=["intercept", "logit_pred"])
    offset_fit = fit_logistic(np.ones((y.shape[0], 1)), y, offset=lp, column_names=["intercept"])
    return CalibrationResult(
        slope=float(joint.coefficients[1]),
        intercept=float(offset_fit.coefficients[0]),
        oe_ratio=float(y.sum() / pred.sum()),
        intercept_joint=float(joint.coefficients[0]),
    )


def scalar_losses(pred, outcome) -> tuple[float, float]:
    """(Brier score, mean negative log-likelihood with natural logs)."""
    pred = _clamp(pred)
    y = np.asarray(outcome, dtype=np.float64)
    brier = float(np.mean((y - pred) ** 2))
    logistic_error = float(-np.mean(y * np.log(pred) + (1.0 - y) * np.log(1.0 - pred)))
    return brier, logistic_error


@dataclass(frozen=True, eq=False)
class DecileTable:
    mean_pred: np.ndarray
    observed: np.ndarray
    count: np.ndarray


def decile_calibration(pred, outcome, bins: int = 10) -> DecileTable:
    """Equal-frequency bins by predicted risk; ties broken by input order."""
    pred = np.asarray(pred, dtype=np.float64)
    y = np.asarray(outcome, dtype=np.float64)
    n = pred.shape[0]
    if n < bins:
        raise DataError(f"need at least {bins} observations for {bins} bins")
    order = np.argsort(pred, kind="stable")
    base, extra = divmod(n, bins)
    counts = np.full(bins, base)
    counts[:extra] += 1
    edges = np.concatenate([[0], np.cumsum(counts)])
    mean_pred = np.empty(bins)
    observed = np.empty(bins)
    for b in range(bins):
        sel = order[edges[b] : edges[b + 1]]
        mean_pred[b] = pred[sel].mean()
        observed[b] = y[sel].mean()
    return DecileTable(mean_pred=mean_pred, observed=observed, count=counts)


DEFAULT_THRESHOLDS = tuple(np.round(np.arange(0.05, 0.3001, 0.01), 4))


@dataclass(frozen=True, eq=False)
class NetBenefitCurve:
    thresholds: np.ndarray
    model: np.ndarray
    treat_all: np.ndarray
    treat_none: np.ndarray


def net_benefit(pred, outcome, thresholds=DEFAULT_THRESHOLDS) -> NetBenefitCurve:
    """TP/N - FP/N * pt/(1-pt) with classification pred >= pt."""
    pred = np.asarray(pred, dtype=np.float64)
    y = np.asarray(outcome).astype(bool)
    thr = np.asarray(thresholds, dtype=np.float64)
    if np.any(thr <= 0.0) or np.any(thr >= 1.0):
        raise DataError("net-benefit thresholds must lie strictly inside (0, 1)")
    n = pred.shape[0]
    prevalence = y.mean()
    classified = pred[None, :] >= thr[:, None]
    tp = (classified & y[None, :]).sum(axis=1) / n
    fp = (classified & ~y[None, :]).sum(axis=1) / n
    odds = thr / (1.0 - thr)
    return NetBenefitCurve(
        thresholds=thr,
        model=tp - fp * odds,
        treat_all=prevalence - (1.0 - prevalence) * odds,
        treat_none=np.zeros_like(thr),
    )


@dataclass(frozen=True, eq=False)
class MetricsReport:
    model: str
    stratum: str
    auroc: float
    calibration_slope: float
    calibration_intercept: float
    calibration_intercept_joint: float
    oe_ratio: float
    brier: float
    logistic_error: float
    deciles: DecileTable
    net_benefit: NetBenefitCurve

    def scalars(self) -> dict:
        return {
            "auroc": self.auroc,
            "calibration_slope": self.calibration_slope,
            "calibration_intercept": self.calibration_intercept,
            "calibration_intercept_joint": self.calibration_intercept_joint,
            "oe_ratio": self.oe_ratio,
            "brier": self.brier,
            "logistic_error": self.logistic_error,
        }


def evaluate_predictions(pred, outcome, model: str = "", stratum: str = "overall",
                         bins: int = 10, thresholds=DEFAULT_THRESHOLDS) -> MetricsReport:
    cal = calibration(pred, outcome)
    brier, logistic_error = scalar_losses(pred, outcome)
    return MetricsReport(
        model=model,
        stratum=stratum,
        auroc=auroc(pred, outcome),
        calibration_slope=cal.slope,
        calibration_intercept=cal.intercept,
        calibration_intercept_joint=cal.intercept_joint,
        oe_ratio=cal.oe_ratio,
        brier=brier,
        logistic_error=logistic_error,
        deciles=decile_calibration(pred, outcome, bins=bins),
        net_benefit=net_benefit(pred, outcome, thresholds=thresholds),
    )


# ---------------------------------------------------------------------------
# Bootstrap optimism correction


@dataclass(frozen=True)
class BootstrapReport:
    apparent: dict
    optimism: dict
    corrected: dict
    effective_b: int
    n_failures: int


def bootstrap_optimism(cohort, pipeline, b: int, seed: int,
                       max_failure_fraction: float = 0.2) -> BootstrapReport:
    """Optimism-corrected metrics for a fit/evaluate pipeline.

    ``pipeline`` must provide ``fit(cohort, init_artifacts=None)`` and
    ``metrics(artifacts, cohort) -> dict``.  Each iteration resamples the
    cohort with replacement (rows relabelled 0..n-1), refits starting from
    the full-data artifacts, and records metric(bootstrap) - metric(original);
    the mean difference is subtracted from the apparent metrics.
    """
    full = pipeline.fit(cohort)
    apparent = pipeline.metrics(full, cohort)
    if b == 0:
        return BootstrapReport(apparent, {k: 0.0 for k in apparent}, dict(apparent), 0, 0)

    sums = {k: 0.0 for k in apparent}
    effective = 0
    failures = 0
    for i in range(b):
        rng = np.random.default_rng(np.random.SeedSequence((derived_seed(seed, i), 0xB007)))
        idx = rng.integers(0, cohort.n, size=cohort.n)
        sample = cohort.subset(idx, new_ids=np.arange(cohort.n))
        try:
            refit = pipeline.fit(sample, init_artifacts=full)
            m_boot = pipeline.metrics(refit, sample)
            m_orig = pipeline.metrics(refit, cohort)
        except Exception:  # noqa: BLE001 - per-iteration failures are skipped
            failures += 1
            continue
        for k in sums:
            sums[k] += m_boot[k] - m_orig[k]
        effective += 1
    if failures > max_failure_fraction * b:
        raise DataError(f"bootstrap failure rate too high: {failures}/{b} iterations failed")
    optimism = {k: (v / effective if effective else 0.0) for k, v in sums.items()}
    corrected = {k: apparent[k] - optimism[k] for k in apparent}
    return BootstrapReport(apparent, optimism, corrected, effective, failures)
