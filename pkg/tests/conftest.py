"""Shared test helpers: random model builders and brute-force oracles.

The oracles enumerate all latent stage paths explicitly and never touch
the recursive implementations they check.
"""

import itertools

import numpy as np
import pytest

from underdx.data import Cohort, IndividualRecord
from underdx.model import (
    GROUP_RATES,
    LOGISTIC_SHARED,
    PIECEWISE,
    WEIBULL,
    EmissionModel,
    HazardModel,
    HmmParams,
    emission_matrix,
    initial_state,
    transition_matrix,
)


def random_params(rng, form=GROUP_RATES, family=WEIBULL, horizon=10, n_x=2, n_a=1,
                  constraint=False, baseline_late=None):
    """Random valid parameter set, rates kept away from the boundaries."""
    coef = rng.normal(0.0, 0.4, size=n_x + n_a)
    if family == WEIBULL:
        hz = HazardModel(WEIBULL, coef, horizon,
                         scale=float(rng.uniform(0.005, 0.08)),
                         shape=float(rng.uniform(0.6, 2.5)))
    else:
        hz = HazardModel(PIECEWISE, coef, horizon,
                         baseline=rng.uniform(0.005, 0.08, size=horizon))
    early = rng.uniform(0.02, 0.45, size=4)
    if form == GROUP_RATES:
        late = float(rng.uniform(early.max(), 0.9)) if constraint else float(rng.uniform(0.05, 0.9))
        em = EmissionModel(GROUP_RATES, rate_late=late,
                           rates_stage0=early[:2], rates_stage1=early[2:],
                           constraint_late_ge_early=constraint)
    else:
        beta = np.concatenate([[rng.normal(-2.0, 0.5)], rng.normal(0.0, 0.5, size=n_a)])
        em = EmissionModel(LOGISTIC_SHARED, rate_late=float(rng.uniform(0.55, 0.9)),
                           coefficients=beta, constraint_late_ge_early=constraint)
    if baseline_late is None:
        baseline_late = float(rng.uniform(0.0, 0.5))
    return HmmParams(hz, em,
                     progression=float(rng.uniform(0.05, 0.5)),
                     baseline_late_fraction=baseline_late)


def sample_record(params, rng, max_t_n, rec_id=1, n_x=2):
    """Simulate one record from the model, so it is always possible."""
    n_a = 1 if params.emission.form == GROUP_RATES else params.emission.n_attributes
    a = rng.integers(0, 2, size=n_a).astype(float)
    x = rng.normal(size=n_x)
    pi = initial_state(params, x, a)
    gamma = emission_matrix(params, a)
    s = rng.choice(3, p=pi)
    results = []
    for t in range(1, max_t_n + 1):
        if t > 1:
            q = transition_matrix(params, x, a, t)
            s = rng.choice(3, p=q[s])
        r = rng.choice(4, p=gamma[s])
        results.append(int(r))
        if r in (1, 2):
            break
    t_n = len(results)
    return IndividualRecord(rec_id, x, a, np.array(results), t_n, results[-1] in (1, 2))


def record_cohort(records, horizon):
    return Cohort.from_records(records, horizon=horizon)


def path_weights(params, rec, horizon):
    """All latent paths over `horizon` steps with their posterior weights
    given the record's observed results (unnormalized), plus the paths."""
    pi = initial_state(params, rec.x, rec.a)
    gamma = emission_matrix(params, rec.a)
    qs = [transition_matrix(params, rec.x, rec.a, t) for t in range(2, horizon + 1)]
    paths = []
    weights = []
    for path in itertools.product(range(3), repeat=horizon):
        w = pi[path[0]]
        for t in range(1, horizon):
            w *= qs[t - 1][path[t - 1], path[t]]
        for t in range(rec.t_n):
            w *= gamma[path[t], rec.results[t]]
        if w > 0.0:
            paths.append(path)
            weights.append(w)
    return paths, np.array(weights)


def brute_log_likelihood(params, rec):
    _, w = path_weights(params, rec, rec.t_n)
    return float(np.log(w.sum()))


def brute_smoothed(params, rec):
    paths, w = path_weights(params, rec, rec.t_n)
    out = np.zeros((rec.t_n, 3))
    for path, weight in zip(paths, w):
        for t in range(rec.t_n):
            out[t, path[t]] += weight
    return out / w.sum()


def brute_p_cf(params, rec, reference, horizon):
    """Probability that an independent redraw of testing under the
    reference regime produces a positive by `horizon`, given the record."""
    gamma_cf = emission_matrix(params, np.atleast_1d(reference))
    no_pos = gamma_cf[:, 0] + gamma_cf[:, 3]
    paths, w = path_weights(params, rec, horizon)
    survive = np.array([np.prod([no_pos[s] for s in path]) for path in paths])
    return float((w * (1.0 - survive)).sum() / w.sum())


@pytest.fixture
def rng():
    return np.random.default_rng(20240811)
