import json

import numpy as np
import pytest

from underdx.errors import DataError, DimensionError
from underdx.model import (
    EPS_HAZARD,
    GROUP_RATES,
    LOGISTIC_SHARED,
    PIECEWISE,
    WEIBULL,
    EmissionModel,
    HazardModel,
    HmmParams,
    ParamTransform,
    emission_matrix,
    hazard,
    initial_state,
    params_from_dict,
    params_to_dict,
    transition_matrix,
)

from conftest import random_params


def scenario_params():
    hz = HazardModel(WEIBULL, np.array([0.5, -0.25, 0.25]), 10, scale=0.005, shape=1.5)
    em = EmissionModel(GROUP_RATES, rate_late=0.3, rates_stage0=np.array([0.025, 0.01]),
                       rates_stage1=np.array([0.1, 0.05]))
    return HmmParams(hz, em, progression=0.1, baseline_late_fraction=0.0)


class TestHazard:
    def test_weibull_at_final_timepoint(self):
        p = scenario_params()
        assert hazard(p, [0.0, 0.0], [0.0], 10) == pytest.approx(0.0075, abs=1e-15)

    def test_weibull_with_covariates(self):
        p = scenario_params()
        expected = 0.0075 * np.exp(0.5 - 0.125 + 0.25)
        assert hazard(p, [1.0, 0.5], [1.0], 10) == pytest.approx(expected, rel=1e-14)

    def test_clamped_below_one(self):
        hz = HazardModel(WEIBULL, np.array([5.0, 5.0, 5.0]), 10, scale=0.5, shape=1.5)
        p = HmmParams(hz, scenario_params().emission, progression=0.1)
        assert hazard(p, [3.0, 3.0], [1.0], 10) == 1.0 - EPS_HAZARD

    def test_piecewise_uses_per_timepoint_baseline(self):
        base = np.linspace(0.01, 0.1, 10)
        hz = HazardModel(PIECEWISE, np.array([0.3]), 10, baseline=base)
        p = HmmParams(hz, scenario_params().emission, progression=0.1)
        for t in (1, 5, 10):
            assert hazard(p, [], [1.0], t) == pytest.approx(base[t - 1] * np.exp(0.3))

    def test_dimension_mismatch_names_lengths(self):
        p = scenario_params()
        with pytest.raises(DimensionError, match="coefficient"):
            hazard(p, [1.0], [0.0], 3)

    def test_monotone_in_positive_coefficient_covariate(self, rng):
        for _ in range(200):
            p = random_params(rng)
            x = rng.normal(size=2)
            a = np.array([float(rng.integers(0, 2))])
            t = int(rng.integers(1, 11))
            k = int(rng.integers(0, 2))
            sign = np.sign(p.hazard.coefficients[k])
            if sign == 0:
                continue
            x_hi = x.copy()
            x_hi[k] += 0.5 * sign
            assert hazard(p, x_hi, a, t) >= hazard(p, x, a, t)


class TestTransition:
    def test_pattern(self):
        hz = HazardModel(WEIBULL, np.zeros(2), 10, scale=0.3 / (0.3 * 1.0), shape=1.0)
        # scale*shape*(t/T)^0 = scale, so pick scale to make h = 0.3
        hz = HazardModel(WEIBULL, np.zeros(2), 10, scale=0.3, shape=1.0)
        p = HmmParams(hz, scenario_params().emission, progression=0.1)
        q = transition_matrix(p, [0.0, 0.0], [], 4)
        expected = np.array([[0.7, 0.3, 0.0], [0.0, 0.9, 0.1], [0.0, 0.0, 1.0]])
        np.testing.assert_allclose(q, expected, atol=1e-15)

    def test_zero_hazard_keeps_stage_zero(self):
        hz = HazardModel(WEIBULL, np.zeros(2), 10, scale=1e-300, shape=1.0)
        p = HmmParams(hz, scenario_params().emission, progression=0.1)
        q = transition_matrix(p, [0.0, 0.0], [], 1)
        np.testing.assert_allclose(q[0], [1.0, 0.0, 0.0], atol=1e-290)

    def test_rows_stochastic_and_zero_pattern(self, rng):
        for _ in range(100):
            p = random_params(rng)
            q = transition_matrix(p, rng.normal(size=2), [float(rng.integers(0, 2))],
                                  int(rng.integers(1, 11)))
            np.testing.assert_allclose(q.sum(axis=1), 1.0, atol=1e-12)
            assert np.all(q >= 0.0)
            assert q[1, 0] == 0.0 and q[2, 0] == 0.0 and q[2, 1] == 0.0


class TestEmission:
    def test_scenario_rates_pattern(self):
        g = emission_matrix(scenario_params(), [0.0])
        expected = np.array(
            [[0.025, 0, 0, 0.975], [0, 0.1, 0, 0.9], [0, 0, 0.3, 0.7]]
        )
        np.testing.assert_allclose(g, expected, atol=1e-15)

    def test_logistic_zero_coefficients_give_half(self):
        em = EmissionModel(LOGISTIC_SHARED, rate_late=0.6, coefficients=np.zeros(3))
        p = HmmParams(scenario_params().hazard, em, progression=0.1)
        g = emission_matrix(p, [0.0, 1.0])
        assert g[0, 0] == pytest.approx(0.5)
        assert g[1, 1] == pytest.approx(0.5)

    def test_rows_stochastic_and_zero_pattern(self, rng):
        for _ in range(100):
            form = GROUP_RATES if rng.integers(0, 2) else LOGISTIC_SHARED
            p = random_params(rng, form=form, n_a=1 if form == GROUP_RATES else 3)
            n_a = 1 if form == GROUP_RATES else 3
            g = emission_matrix(p, rng.integers(0, 2, size=n_a).astype(float))
            np.testing.assert_allclose(g.sum(axis=1), 1.0, atol=1e-12)
            assert np.all(g >= 0.0)
            off = [(0, 1), (0, 2), (1, 0), (1, 2), (2, 0), (2, 1)]
            assert all(g[i, j] == 0.0 for i, j in off)

    def test_group_rates_reject_multi_attribute(self):
        with pytest.raises(DimensionError):
            scenario_params().emission.stage_rates(np.array([[0.0, 1.0]]))


class TestInitialState:
    def test_zero_late_fraction(self):
        hz = HazardModel(WEIBULL, np.zeros(2), 10, scale=0.0075 / (0.1 ** 0.5) / 1.5, shape=1.5)
        p = HmmParams(hz, scenario_params().emission, progression=0.1)
        h1 = hazard(p, [0.0, 0.0], [], 1)
        pi = initial_state(p, [0.0, 0.0], [])
        np.testing.assert_allclose(pi, [1 - h1, h1, 0.0], atol=1e-15)

    def test_late_fraction_split(self):
        hz = HazardModel(WEIBULL, np.zeros(2), 10, scale=0.02, shape=1.0)
        p = HmmParams(hz, scenario_params().emission, progression=0.1,
                      baseline_late_fraction=0.289)
        pi = initial_state(p, [0.0, 0.0], [])
        np.testing.assert_allclose(pi, [0.98, 0.711 * 0.02, 0.289 * 0.02], rtol=1e-12)

    def test_sums_to_one(self, rng):
        for _ in range(100):
            p = random_params(rng)
            pi = initial_state(p, rng.normal(size=2), [float(rng.integers(0, 2))])
            assert pi.sum() == pytest.approx(1.0, abs=1e-12)
            assert np.all(pi >= 0.0)


class TestParamTransform:
    def test_logit_fixed_points(self):
        p = scenario_params()
        tr = ParamTransform(p, free_baseline_late=False)
        u = tr.to_vector(p)
        # scale slot follows the hazard coefficients
        assert u[3] == pytest.approx(np.log(0.005))
        em = EmissionModel(GROUP_RATES, rate_late=0.5, rates_stage0=np.array([0.5, 0.5]),
                           rates_stage1=np.array([0.5, 0.5]))
        p_half = HmmParams(p.hazard, em, progression=0.5)
        u = ParamTransform(p_half, free_baseline_late=False).to_vector(p_half)
        np.testing.assert_allclose(u[5:11], 0.0, atol=1e-15)

    @pytest.mark.parametrize("form", [GROUP_RATES, LOGISTIC_SHARED])
    @pytest.mark.parametrize("family", [WEIBULL, PIECEWISE])
    @pytest.mark.parametrize("constraint", [False, True])
    def test_round_trip(self, rng, form, family, constraint):
        n_a = 1 if form == GROUP_RATES else 3
        anchors = np.array([[0.0] * n_a, [1.0] * n_a, [1.0] + [0.0] * (n_a - 1)])
        for _ in range(100):
            p = random_params(rng, form=form, family=family, n_a=n_a, constraint=constraint,
                              baseline_late=float(rng.uniform(0.05, 0.5)))
            tr = ParamTransform(p, free_baseline_late=True,
                                anchors=anchors if (form == LOGISTIC_SHARED and constraint) else None)
            q = tr.from_vector(tr.to_vector(p))
            assert q.progression == pytest.approx(p.progression, rel=1e-12)
            assert q.baseline_late_fraction == pytest.approx(p.baseline_late_fraction, rel=1e-12)
            assert q.emission.rate_late == pytest.approx(p.emission.rate_late, rel=1e-12)
            np.testing.assert_allclose(q.hazard.coefficients, p.hazard.coefficients, rtol=1e-12)
            if family == WEIBULL:
                assert q.hazard.scale == pytest.approx(p.hazard.scale, rel=1e-12)
                assert q.hazard.shape == pytest.approx(p.hazard.shape, rel=1e-12)
            else:
                np.testing.assert_allclose(q.hazard.baseline, p.hazard.baseline, rtol=1e-12)
            if form == GROUP_RATES:
                np.testing.assert_allclose(q.emission.rates_stage0, p.emission.rates_stage0,
                                           rtol=1e-12)
                np.testing.assert_allclose(q.emission.rates_stage1, p.emission.rates_stage1,
                                           rtol=1e-12)
            else:
                np.testing.assert_allclose(q.emission.coefficients, p.emission.coefficients,
                                           rtol=1e-12)

    def test_constraint_holds_by_construction(self, rng):
        p = random_params(rng, constraint=True)
        tr = ParamTransform(p, free_baseline_late=True)
        for _ in range(200):
            u = rng.normal(0.0, 3.0, size=tr.dim)
            q = tr.from_vector(u)
            assert q.emission.rate_late >= q.emission.max_early_rate()

    def test_fixed_baseline_late_not_in_vector(self):
        p = scenario_params()
        free = ParamTransform(p, free_baseline_late=True)
        # baseline_late_fraction of 0 cannot be encoded as a logit
        with pytest.raises(DataError):
            free.to_vector(p)
        fixed = ParamTransform(p, free_baseline_late=False)
        assert fixed.dim == free.dim - 1
        assert fixed.from_vector(fixed.to_vector(p)).baseline_late_fraction == 0.0

    def test_non_finite_vector_rejected(self):
        p = scenario_params()
        tr = ParamTransform(p, free_baseline_late=False)
        u = tr.to_vector(p)
        u[0] = np.nan
        with pytest.raises(DataError, match="non-finite"):
            tr.from_vector(u)


class TestSerialization:
    def test_round_trip_group(self, tmp_path):
        p = scenario_params()
        d = params_to_dict(p)
        q = params_from_dict(json.loads(json.dumps(d)))
        assert q.progression == p.progression
        np.testing.assert_array_equal(q.hazard.coefficients, p.hazard.coefficients)
        np.testing.assert_array_equal(q.emission.rates_stage0, p.emission.rates_stage0)

    def test_round_trip_logistic_piecewise(self, rng):
        p = random_params(rng, form=LOGISTIC_SHARED, family=PIECEWISE, n_a=4)
        q = params_from_dict(params_to_dict(p))
        np.testing.assert_allclose(q.hazard.baseline, p.hazard.baseline)
        np.testing.assert_allclose(q.emission.coefficients, p.emission.coefficients)
        assert q.emission.rate_late == p.emission.rate_late

    def test_missing_field_is_error(self):
        with pytest.raises(DataError, match="missing field"):
            params_from_dict({"hazard": {"family": WEIBULL}})


class TestValidation:
    def test_rejects_bad_probability_fields(self):
        p = scenario_params()
        with pytest.raises(DataError):
            HmmParams(p.hazard, p.emission, progression=1.0)
        with pytest.raises(DataError):
            HmmParams(p.hazard, p.emission, progression=0.1, baseline_late_fraction=1.0)
        with pytest.raises(DataError):
            EmissionModel(GROUP_RATES, rate_late=0.3, rates_stage0=np.array([0.0, 0.5]),
                          rates_stage1=np.array([0.1, 0.1]))
        with pytest.raises(DataError):
            HazardModel(WEIBULL, np.zeros(2), 10, scale=-1.0, shape=1.0)
        with pytest.raises(DimensionError):
            HazardModel(PIECEWISE, np.zeros(2), 10, baseline=np.full(9, 0.01))
