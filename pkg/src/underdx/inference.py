"""Exact observed-data log-likelihood and maximum-likelihood fitting.

The likelihood of one individual's test history factorizes over time into
terms P(result_t | results before t).  A single forward sweep produces
those terms without enumerating latent paths: it alternates a Bayes update
of the stage distribution on the observed result with propagation through
the stage-transition kernel.  The sweep is implemented twice with identical
arithmetic: in numpy (used everywhere, and the source of the cached
quantities the smoothing and counterfactual recursions consume) and in
torch (used only to get gradients by automatic differentiation during
fitting; the test-suite pins both against brute-force enumeration and
central finite differences).

Fitting runs scipy's limited-memory BFGS on the unconstrained parameter
vector.  Convergence is declared on the max-norm of the gradient of the
*per-record mean* log-likelihood, so the tolerance is comparable across
cohort sizes; FitResult reports the summed log-likelihood.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import scipy.optimize

from .data import Cohort, IndividualRecord
from .errors import DataError, FitError, ImpossibleObservationError
from .model import (
    EPS_HAZARD,
    EPS_RATE,
    GROUP_RATES,
    WEIBULL,
    HmmParams,
    ParamTransform,
    hazard_curve,
    initial_state,
    params_from_dict,
    params_to_dict,
)

_TINY = 1e-300  # step probabilities below this are treated as impossible observations


@dataclass(frozen=True, eq=False)
class ForwardState:
    """Per-timepoint predictive quantities of the forward sweep."""

    t: int
    stage_given_past: np.ndarray  # P(S_t = i | results before t)
    result_given_past: np.ndarray  # P(R_t = j | results before t)


@dataclass(frozen=True, eq=False)
class ForwardPass:
    """Cached forward quantities for a whole cohort.

    Arrays are (n, horizon, ...); entries at t > t_n[i] are filler and must
    not be consumed.
    """

    stage_prior: np.ndarray  # (n, T, 3) P(S_t | results < t)
    result_prob: np.ndarray  # (n, T, 4) P(R_t | results < t)
    stage_post: np.ndarray  # (n, T, 3) P(S_t | results <= t)
    step_logprob: np.ndarray  # (n, T), zero beyond t_n
    hazards: np.ndarray  # (n, T) hazard at each timepoint
    stage_rates: np.ndarray  # (n, 3) testing rate per stage


def _propagate(stage: np.ndarray, h: np.ndarray, progression: float) -> np.ndarray:
    """Push a stage distribution through the transition kernel."""
    out = np.empty_like(stage)
    out[:, 0] = (1.0 - h) * stage[:, 0]
    out[:, 1] = h * stage[:, 0] + (1.0 - progression) * stage[:, 1]
    out[:, 2] = progression * stage[:, 1] + stage[:, 2]
    return out


def forward_pass(params: HmmParams, cohort: Cohort,
                 emission_floor: float = 0.0) -> ForwardPass:
    """One forward sweep over the cohort.

    With the default ``emission_floor`` of zero, an observed result whose
    model probability falls below 1e-300 raises ImpossibleObservationError.
    A positive floor instead replaces the structural zeros of the emission
    matrix by that value, so results the perfect-test structure cannot
    explain (they arise when the generating tests are imperfect) contribute
    a large finite penalty and the sweep continues.
    """
    n, horizon = cohort.n, cohort.horizon
    hz = hazard_curve(params, cohort.x, cohort.a)
    rates = params.emission.stage_rates(cohort.a)  # (n, 3)
    r_all = cohort.results
    active_len = cohort.t_n

    stage_prior = np.empty((n, horizon, 3))
    result_prob = np.empty((n, horizon, 4))
    stage_post = np.empty((n, horizon, 3))
    step_logprob = np.zeros((n, horizon))

    bl = params.baseline_late_fraction
    stage = np.empty((n, 3))
    stage[:, 0] = 1.0 - hz[:, 0]
    stage[:, 1] = (1.0 - bl) * hz[:, 0]
    stage[:, 2] = bl * hz[:, 0]

    rows = np.arange(n)
    for t in range(horizon):
        stage_prior[:, t] = stage
        result_prob[:, t, :3] = rates * stage  # P(tested at stage i and S_t = i | past)
        result_prob[:, t, 3] = ((1.0 - rates) * stage).sum(axis=1)
        if emission_floor:
            result_prob[:, t, :3] += emission_floor * (stage.sum(axis=1)[:, None] - stage)

        r = r_all[:, t]
        step = result_prob[rows, t, r]
        live = t < active_len
        bad = live & (step < _TINY)
        if np.any(bad):
            i = int(np.flatnonzero(bad)[0])
            raise ImpossibleObservationError(int(cohort.ids[i]), t + 1, int(r[i]))
        np.log(step, out=step_logprob[:, t], where=live)

        # Bayes update on the observed result: emission column r
        no_test = r == 3
        col = np.where(
            (r[:, None] == np.arange(3)[None, :]),
            rates,
            np.where(no_test[:, None], 1.0 - rates, emission_floor),
        )
        stage_post[:, t] = col * stage / step[:, None]

        if t + 1 < horizon:
            stage = _propagate(stage_post[:, t], hz[:, t + 1], params.progression)

    return ForwardPass(stage_prior, result_prob, stage_post, step_logprob, hz, rates)


def _single(record: IndividualRecord, horizon: int | None = None) -> Cohort:
    horizon = record.t_n if horizon is None else horizon
    return Cohort.from_records([record], horizon=max(horizon, record.t_n))


def forward_log_likelihood(params: HmmParams, record: IndividualRecord) -> float:
    """Log probability of one individual's observed test history."""
    fp = forward_pass(params, _single(record))
    return float(fp.step_logprob[0, : record.t_n].sum())


def forward_states(params: HmmParams, record: IndividualRecord) -> list[ForwardState]:
    fp = forward_pass(params, _single(record))
    return [
        ForwardState(t + 1, fp.stage_prior[0, t].copy(), fp.result_prob[0, t].copy())
        for t in range(record.t_n)
    ]


def dataset_log_likelihood(params: HmmParams, cohort: Cohort) -> float:
    """Summed log-likelihood; rows are id-sorted so the order is fixed."""
    if cohort.n == 0:
        raise DataError("cohort is empty")
    return float(forward_pass(params, cohort).step_logprob.sum())


# ---------------------------------------------------------------------------
# Automatic-differentiation twin (gradients, via JAX)


def _jax():
    import jax

    jax.config.update("jax_enable_x64", True)
    import jax.numpy as jnp

    return jax, jnp


def _cohort_tensors(cohort: Cohort):
    _, jnp = _jax()
    t_grid = np.arange(1, cohort.horizon + 1)[None, :]
    return {
        "z": jnp.asarray(np.hstack([cohort.x, cohort.a])),
        "a": jnp.asarray(cohort.a),
        "r": jnp.asarray(cohort.results.astype(np.int64)),
        "live": jnp.asarray(t_grid <= cohort.t_n[:, None]),
        "n": cohort.n,
        "horizon": cohort.horizon,
    }


def _structure_key(transform: ParamTransform, horizon: int, emission_floor: float):
    hz0, em0 = transform.template.hazard, transform.template.emission
    return (
        hz0.family,
        em0.form,
        em0.constraint_late_ge_early,
        transform.free_baseline_late,
        float(transform.template.baseline_late_fraction),
        transform.dim,
        hz0.n_coef,
        hz0.horizon,
        horizon,
        float(emission_floor),
    )


_OBJECTIVE_CACHE: dict = {}


def _objective_fn(transform: ParamTransform, horizon: int, emission_floor: float = 0.0):
    """Jit-compiled (value, grad) of the per-record mean log-likelihood.

    One compiled function per parameter structure; cohorts enter as traced
    arguments so replications with matching shapes reuse the compilation.
    """
    key = _structure_key(transform, horizon, emission_floor)
    cached = _OBJECTIVE_CACHE.get(key)
    if cached is not None:
        return cached

    jax, jnp = _jax()
    coef_sl, haz_sl, em_sl, late_ix, prog_ix, bl_ix, _ = transform._blocks
    hz0, em0 = transform.template.hazard, transform.template.emission
    family, form = hz0.family, em0.form
    constrained = em0.constraint_late_ge_early
    hazard_horizon = hz0.horizon
    bl_fixed = float(transform.template.baseline_late_fraction)
    free_bl = transform.free_baseline_late

    def mean_loglik(u, z, a, r_all, live, anchors):
        lin = z @ u[coef_sl]
        t = jnp.arange(1, horizon + 1, dtype=jnp.float64)
        if family == WEIBULL:
            scale = jnp.exp(u[haz_sl][0])
            shape = jnp.exp(u[haz_sl][1])
            base = scale * shape * (t / hazard_horizon) ** (shape - 1.0)
        else:
            base = jnp.exp(u[haz_sl])[:horizon]
        hz = jnp.clip(jnp.exp(lin)[:, None] * base[None, :], None, 1.0 - EPS_HAZARD)

        if form == GROUP_RATES:
            r4 = jnp.clip(jax.nn.sigmoid(u[em_sl]), EPS_RATE, 1.0 - EPS_RATE)
            level = a[:, 0] > 0.5
            e0 = jnp.where(level, r4[1], r4[0])
            e1 = jnp.where(level, r4[3], r4[2])
            max_early = jnp.max(r4)
        else:
            beta = u[em_sl]
            b = jnp.clip(jax.nn.sigmoid(beta[0] + a @ beta[1:]), EPS_RATE, 1.0 - EPS_RATE)
            e0 = b
            e1 = b
            max_early = jnp.max(jax.nn.sigmoid(beta[0] + anchors @ beta[1:]))
        if constrained:
            e2 = max_early + (1.0 - max_early) * jax.nn.sigmoid(u[late_ix])
        else:
            e2 = jnp.clip(jax.nn.sigmoid(u[late_ix]), EPS_RATE, 1.0 - EPS_RATE)
        e2 = e2 * jnp.ones_like(e0)

        prog = jnp.clip(jax.nn.sigmoid(u[prog_ix]), EPS_RATE, 1.0 - EPS_RATE)
        bl = jax.nn.sigmoid(u[bl_ix]) if free_bl else bl_fixed

        s0 = 1.0 - hz[:, 0]
        s1 = (1.0 - bl) * hz[:, 0]
        s2 = bl * hz[:, 0]
        logp = jnp.zeros(z.shape[0])
        for ti in range(horizon):
            total = s0 + s1 + s2
            q0 = e0 * s0 + emission_floor * (total - s0)
            q1 = e1 * s1 + emission_floor * (total - s1)
            q2 = e2 * s2 + emission_floor * (total - s2)
            q3 = (1.0 - e0) * s0 + (1.0 - e1) * s1 + (1.0 - e2) * s2
            probs = jnp.stack([q0, q1, q2, q3], axis=1)
            rt = r_all[:, ti]
            step = jnp.take_along_axis(probs, rt[:, None], axis=1)[:, 0]
            logp = logp + jnp.where(live[:, ti], jnp.log(step), 0.0)

            if ti + 1 < horizon:
                no_test = rt == 3
                g0 = jnp.where(rt == 0, e0, jnp.where(no_test, 1.0 - e0, emission_floor))
                g1 = jnp.where(rt == 1, e1, jnp.where(no_test, 1.0 - e1, emission_floor))
                g2 = jnp.where(rt == 2, e2, jnp.where(no_test, 1.0 - e2, emission_floor))
                p0 = g0 * s0 / step
                p1 = g1 * s1 / step
                p2 = g2 * s2 / step
                h = hz[:, ti + 1]
                s0 = (1.0 - h) * p0
                s1 = h * p0 + (1.0 - prog) * p1
                s2 = prog * p1 + p2
        return logp.sum() / z.shape[0]

    fn = jax.jit(jax.value_and_grad(mean_loglik))
    _OBJECTIVE_CACHE[key] = fn
    return fn


def _value_and_grad(u_np, transform, tensors, emission_floor: float = 0.0):
    _, jnp = _jax()
    fn = _objective_fn(transform, tensors["horizon"], emission_floor)
    anchors = transform.anchors
    if anchors is None:
        anchors = np.zeros((1, tensors["a"].shape[1]))
    val, grad = fn(
        jnp.asarray(np.asarray(u_np, dtype=np.float64)),
        tensors["z"], tensors["a"], tensors["r"], tensors["live"], jnp.asarray(anchors),
    )
    val = float(val)
    if not np.isfinite(val):
        # NaN/inf can appear at extreme line-search trial points (e.g. an
        # overflowing shape parameter); callers decide whether to back off
        # or raise.
        return val, np.zeros_like(np.asarray(u_np))
    return val, np.asarray(grad)


def log_likelihood_gradient(transform: ParamTransform, u, cohort: Cohort) -> np.ndarray:
    """Gradient of the summed log-likelihood at unconstrained vector u."""
    value, grad = _value_and_grad(np.asarray(u, dtype=np.float64), transform, _cohort_tensors(cohort))
    if not np.isfinite(value):
        raise FitError("log-likelihood is not finite at the requested point")
    grad = grad * cohort.n
    bad = ~np.isfinite(grad)
    if np.any(bad):
        raise FitError(f"non-finite gradient component at index {int(np.flatnonzero(bad)[0])}")
    return grad


# ---------------------------------------------------------------------------
# Fitting


@dataclass(frozen=True)
class FitOptions:
    """Quasi-Newton settings.

    ``tol_g`` bounds the max-norm of the gradient of the per-record mean
    log-likelihood; ``memory`` is the number of stored correction pairs.
    ``n_starts`` > 1 adds jittered restarts of the initial vector (spread
    ``jitter`` in unconstrained space) and keeps the best final value.
    A positive ``emission_floor`` lets fitting tolerate test results the
    perfect-test structure cannot produce (see forward_pass); zero keeps
    the strict impossible-observation error.
    """

    tol_g: float = 1e-6
    max_iter: int = 10_000
    memory: int = 10
    free_baseline_late: bool = True
    n_starts: int = 1
    jitter: float = 0.5
    restarts: int = 2
    keep_trace: bool = False
    seed: int = 0
    emission_floor: float = 0.0


@dataclass(frozen=True, eq=False)
class FitResult:
    theta_hat: HmmParams
    log_likelihood: float
    iterations: int
    gradient_norm: float
    converged: bool
    n_records: int
    trace: list | None = None
    diagnostic: str = ""


def default_init(cohort: Cohort, emission_form: str = GROUP_RATES,
                 hazard_family: str = WEIBULL, constraint_late_ge_early: bool = False,
                 baseline_late_fraction: float = 0.1) -> HmmParams:
    """Documented mid-range starting point: testing rates 0.05, progression
    0.1, hazard coefficients 0, scale 0.01, shape 1."""
    from .model import EmissionModel, HazardModel

    n_coef = cohort.x.shape[1] + cohort.a.shape[1]
    if hazard_family == WEIBULL:
        hz = HazardModel(WEIBULL, np.zeros(n_coef), cohort.horizon, scale=0.01, shape=1.0)
    else:
        hz = HazardModel("PiecewiseBaseline", np.zeros(n_coef), cohort.horizon,
                         baseline=np.full(cohort.horizon, 0.01))
    if emission_form == GROUP_RATES:
        em = EmissionModel(GROUP_RATES, rate_late=0.1 if constraint_late_ge_early else 0.05,
                           rates_stage0=np.array([0.05, 0.05]), rates_stage1=np.array([0.05, 0.05]),
                           constraint_late_ge_early=constraint_late_ge_early)
    else:
        from scipy.special import logit as _logit

        coef = np.zeros(cohort.a.shape[1] + 1)
        coef[0] = _logit(0.05)
        em = EmissionModel("LogisticShared", rate_late=0.1 if constraint_late_ge_early else 0.05,
                           coefficients=coef, constraint_late_ge_early=constraint_late_ge_early)
    return HmmParams(hz, em, progression=0.1, baseline_late_fraction=baseline_late_fraction)


def _minimize_from(u0, transform, tensors, opts: FitOptions, trace):
    state = {"last": None, "best": (-np.inf, np.asarray(u0, dtype=np.float64))}

    def objective(u):
        val, grad = _value_and_grad(u, transform, tensors, opts.emission_floor)
        if not np.isfinite(val):  # extreme line-search excursion: back off
            return 1e30, np.zeros_like(u)
        if val > state["best"][0]:
            state["best"] = (val, np.array(u))
        state["last"] = (-val, -grad)
        return -val, -grad

    iterations = 0
    u = np.asarray(u0, dtype=np.float64)
    for attempt in range(opts.restarts + 1):
        def callback(xk):
            if trace is not None and state["last"] is not None:
                f, g = state["last"]
                trace.append((len(trace) + 1, -f * tensors["n"], float(np.abs(g).max())))

        res = scipy.optimize.minimize(
            objective,
            u,
            jac=True,
            method="L-BFGS-B",
            callback=callback if trace is not None else None,
            options={
                "maxcor": opts.memory,
                "maxiter": opts.max_iter - iterations,
                "gtol": opts.tol_g,
                "ftol": 1e-16,
                "maxls": 60,
            },
        )
        iterations += max(res.nit, 1)
        u = res.x
        if not np.all(np.isfinite(u)):
            # the solver ended on a rejected excursion; resume from the best
            # finite point seen so far
            u = state["best"][1]
        value, grad = _value_and_grad(u, transform, tensors, opts.emission_floor)
        gnorm = float(np.abs(grad).max()) if np.isfinite(value) else np.inf
        if gnorm <= opts.tol_g or iterations >= opts.max_iter:
            break
    return u, value, gnorm, iterations, str(res.message)


def fit_mle(cohort: Cohort, init: HmmParams, opts: FitOptions = FitOptions()) -> FitResult:
    """Maximize the cohort log-likelihood from ``init``.

    Deterministic given (cohort, init, opts); record order is irrelevant
    because cohorts store rows sorted by id.
    """
    cohort.validate()
    if init.hazard.horizon != cohort.horizon:
        raise DataError(
            f"init hazard horizon {init.hazard.horizon} != cohort horizon {cohort.horizon}"
        )
    anchors = None
    if init.emission.form != GROUP_RATES and init.emission.constraint_late_ge_early:
        anchors = np.unique(cohort.a, axis=0)
    transform = ParamTransform(init, free_baseline_late=opts.free_baseline_late, anchors=anchors)

    # Surfaces impossible observations with a per-record error before the
    # optimizer touches anything, and cross-checks the two implementations.
    ref = float(forward_pass(init, cohort, opts.emission_floor).step_logprob.sum())
    tensors = _cohort_tensors(cohort)
    u0 = transform.to_vector(init)
    val0, _ = _value_and_grad(u0, transform, tensors, opts.emission_floor)
    if not np.isfinite(val0):
        raise FitError("log-likelihood is not finite at the initial point")
    if abs(val0 * cohort.n - ref) > 1e-6 * (1.0 + abs(ref)):
        raise FitError(
            f"forward implementations disagree at the initial point: {val0 * cohort.n} vs {ref}"
        )

    starts = [u0]
    if opts.n_starts > 1:
        rng = np.random.default_rng(np.random.SeedSequence((opts.seed, 0x5EED)))
        starts += [u0 + opts.jitter * rng.standard_normal(u0.shape)
                   for _ in range(opts.n_starts - 1)]

    best = None
    trace = [] if opts.keep_trace else None
    for u_start in starts:
        u, value, gnorm, iters, message = _minimize_from(u_start, transform, tensors, opts, trace)
        if best is None or value > best[1]:
            best = (u, value, gnorm, iters, message)
    u, value, gnorm, iters, message = best
    if not np.isfinite(value):
        raise FitError(f"optimizer ended at a non-finite log-likelihood: {message}")
    converged = gnorm <= opts.tol_g
    return FitResult(
        theta_hat=transform.from_vector(u),
        log_likelihood=value * cohort.n,
        iterations=iters,
        gradient_norm=gnorm,
        converged=converged,
        n_records=cohort.n,
        trace=trace,
        diagnostic="" if converged else f"gradient max-norm {gnorm:.3e} > tol after restarts: {message}",
    )


def save_fit(fit: FitResult, path) -> None:
    payload = {
        "params": params_to_dict(fit.theta_hat),
        "log_likelihood": fit.log_likelihood,
        "iterations": fit.iterations,
        "gradient_norm": fit.gradient_norm,
        "converged": fit.converged,
        "n_records": fit.n_records,
        "diagnostic": fit.diagnostic,
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2)


def load_fit(path) -> FitResult:
    with open(path) as fh:
        d = json.load(fh)
    return FitResult(
        theta_hat=params_from_dict(d["params"]),
        log_likelihood=d["log_likelihood"],
        iterations=d["iterations"],
        gradient_norm=d["gradient_norm"],
        converged=d["converged"],
        n_records=d["n_records"],
        diagnostic=d.get("diagnostic", ""),
    )
