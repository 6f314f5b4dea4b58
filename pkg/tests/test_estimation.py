"""Tests of the estimation machinery: objectives and their gradients, the
optimizer steps, metrics, and the sensitivity diagnostic."""

import math

import numpy as np
import pytest

from chokefit import data, estimation, nnet, physics
from chokefit.estimation import (
    AdamState,
    FitConfig,
    Metrics,
    PriorSpec,
    RegularizationConfig,
    adam_step,
    map_objective,
    metrics,
    mle_objective,
    sensitivity_matrix,
    sgd_step,
)
from chokefit.exceptions import ConfigError
from chokefit.physics import AreaSpec, PhysicalParams, TRUE_PARAMS


def small_dataset(n=40, seed=0, noise=0.0):
    cfg = data.SyntheticConfig(n_points=n, seed=seed, noise_sigma=noise)
    return data.generate_synthetic(cfg)


def perturbed_params(rng, hm_mode=False):
    priors = PriorSpec.default()
    vec = priors.means + priors.sigmas * rng.normal(0.0, 0.6, size=6)
    vec = np.clip(vec, [500, 900, 1.15, 0.005, 0.35, 0.3], [1100, 1200, 1.6, 0.06, 0.8, 1.8])
    return PhysicalParams.from_vector(vec[:5] if hm_mode else vec, hm_mode=hm_mode)


class TestMleObjective:
    def test_zero_at_generating_parameters(self):
        ds = small_dataset()
        out = mle_objective(ds, TRUE_PARAMS, "mm")
        assert out.loss == pytest.approx(0.0, abs=1e-18)
        assert np.allclose(out.grad_phi, 0.0, atol=1e-9)

    def test_single_row_constant_model(self):
        ds = small_dataset(n=1)
        # force a zero prediction by closing the choke
        ds = data.Dataset(p1=ds.p1, p2=ds.p2, t1=ds.t1, u=np.array([0.0]),
                          eta_g=ds.eta_g, eta_o=ds.eta_o, y=np.array([3.0]),
                          provenance="synthetic")
        out = mle_objective(ds, TRUE_PARAMS, "mm")
        assert out.loss == pytest.approx(9.0)

    def test_gradient_matches_finite_differences_mm(self):
        rng = np.random.default_rng(1)
        ds = small_dataset(n=25, seed=3)
        for _ in range(5):
            phi = perturbed_params(rng)
            vec = phi.to_vector()
            out = mle_objective(ds, phi, "mm")
            for i in range(6):
                h = 1e-6 * vec[i]
                vp, vm = vec.copy(), vec.copy()
                vp[i] += h
                vm[i] -= h
                lp = mle_objective(ds, PhysicalParams.from_vector(vp), "mm").loss
                lm = mle_objective(ds, PhysicalParams.from_vector(vm), "mm").loss
                fd = (lp - lm) / (2.0 * h)
                if abs(fd) < 1e-10:
                    continue
                assert out.grad_phi[i] == pytest.approx(fd, rel=1e-4)

    def test_gradient_matches_finite_differences_hm(self):
        rng = np.random.default_rng(2)
        ds = small_dataset(n=15, seed=4)
        phi = perturbed_params(rng, hm_mode=True)
        mlp = nnet.he_init(5, sizes=(1, 8, 6, 1))
        out = mle_objective(ds, phi, "hm", mlp=mlp)

        vec = phi.to_vector()
        for i in range(5):
            h = 1e-6 * vec[i]
            vp, vm = vec.copy(), vec.copy()
            vp[i] += h
            vm[i] -= h
            lp = mle_objective(ds, PhysicalParams.from_vector(vp, hm_mode=True),
                               "hm", mlp=mlp).loss
            lm = mle_objective(ds, PhysicalParams.from_vector(vm, hm_mode=True),
                               "hm", mlp=mlp).loss
            fd = (lp - lm) / (2.0 * h)
            if abs(fd) < 1e-10:
                continue
            assert out.grad_phi[i] == pytest.approx(fd, rel=1e-4)

        flat = nnet.flatten(mlp)
        h = 1e-6
        for i in rng.choice(len(flat), size=40, replace=False):
            fp, fm = flat.copy(), flat.copy()
            fp[i] += h
            fm[i] -= h
            lp = mle_objective(ds, phi, "hm",
                               mlp=nnet.unflatten(fp, mlp.sizes, mlp.area_scale)).loss
            lm = mle_objective(ds, phi, "hm",
                               mlp=nnet.unflatten(fm, mlp.sizes, mlp.area_scale)).loss
            fd = (lp - lm) / (2.0 * h)
            if abs(fd) < 1e-8:
                continue
            assert out.grad_mlp[i] == pytest.approx(fd, rel=1e-4)

    def test_mode_mismatch_rejected(self):
        ds = small_dataset(n=5)
        with pytest.raises(ConfigError):
            mle_objective(ds, TRUE_PARAMS, "hm")
        with pytest.raises(ConfigError):
            mle_objective(ds, TRUE_PARAMS, "mm", mlp=nnet.he_init(0, sizes=(1, 4, 1)))


class TestMapObjective:
    def test_zero_at_prior_means_on_perfect_data(self):
        priors = PriorSpec.default()
        phi = PhysicalParams.from_vector(priors.means)
        cfg = data.SyntheticConfig(n_points=30, seed=9, true_params=phi)
        ds = data.generate_synthetic(cfg)
        out = map_objective(ds, phi, priors, RegularizationConfig(sigma_eps=2.0), "mm")
        assert out.loss == pytest.approx(0.0, abs=1e-18)

    def test_disabled_equals_mle_bitwise(self):
        rng = np.random.default_rng(6)
        ds = small_dataset(n=20, seed=7)
        phi = perturbed_params(rng)
        reg = RegularizationConfig(sigma_eps=1.0, lam=0.1, enabled=False)
        a = map_objective(ds, phi, PriorSpec.default(), reg, "mm")
        b = mle_objective(ds, phi, "mm")
        assert a.loss == b.loss
        assert np.array_equal(a.grad_phi, b.grad_phi)

    def test_one_sigma_offset_costs_sigma_eps_squared(self):
        priors = PriorSpec.default()
        vec = priors.means.copy()
        vec[0] += priors.sigmas[0]  # +1 sigma on the oil density
        phi = PhysicalParams.from_vector(vec)
        # zero the data term by fitting data generated at phi itself
        ds = data.generate_synthetic(data.SyntheticConfig(n_points=10, seed=1,
                                                          true_params=phi))
        sigma_eps = 0.7
        out = map_objective(ds, phi, priors, RegularizationConfig(sigma_eps=sigma_eps), "mm")
        assert out.loss == pytest.approx(sigma_eps ** 2, rel=1e-12)

    def test_lambda_term_on_network(self):
        ds = small_dataset(n=5, seed=2)
        phi = PhysicalParams.from_vector(PriorSpec.default().means[:5], hm_mode=True)
        mlp = nnet.he_init(11, sizes=(1, 6, 1))
        reg = RegularizationConfig(sigma_eps=1e-9, lam=0.5)
        with_reg = map_objective(ds, phi, PriorSpec.default(), reg, "hm", mlp=mlp)
        without = mle_objective(ds, phi, "hm", mlp=mlp)
        assert with_reg.loss - without.loss == pytest.approx(
            0.5 * nnet.l2_norm_sq(mlp), rel=1e-6)


class TestOptimizerSteps:
    def test_adam_zero_gradient_identity(self):
        params = np.array([1.0, -2.0, 3.0])
        state = AdamState.zeros(3)
        new, state2 = adam_step(params, np.zeros(3), state, 0.1)
        assert np.array_equal(new, params)
        assert state2.t == 1

    def test_adam_constant_gradient_step_approaches_alpha(self):
        params = np.zeros(1)
        state = AdamState.zeros(1)
        g = np.array([0.37])
        prev = params.copy()
        for _ in range(500):
            prev = params.copy()
            params, state = adam_step(params, g, state, 0.01)
        assert abs(params[0] - prev[0]) == pytest.approx(0.01, rel=1e-3)

    def test_adam_matches_transcription_on_quadratic(self):
        # hand transcription of the update rule, 10 steps on (x-3)^2 from 0,
        # alpha=0.1: x10 = 0.9858115903830454
        x = np.zeros(1)
        state = AdamState.zeros(1)
        for _ in range(10):
            g = 2.0 * (x - 3.0)
            x, state = adam_step(x, g, state, 0.1)
        assert x[0] == pytest.approx(0.9858115903830454, rel=1e-12)

    def test_adam_rejects_non_finite(self):
        with pytest.raises(ValueError):
            adam_step(np.zeros(2), np.array([1.0, np.nan]), AdamState.zeros(2), 0.1)

    def test_sgd_identity_on_zero_gradient(self):
        p = np.array([5.0, 6.0])
        assert np.array_equal(sgd_step(p, np.zeros(2), 0.5), p)

    def test_sgd_exact_subtraction(self):
        p = np.array([1.0, 2.0])
        g = np.array([0.25, -0.5])
        assert np.array_equal(sgd_step(p, g, 1.0), p - g)

    def test_sgd_two_parameter_hand_example(self):
        p = np.array([2.0, -1.0])
        out = sgd_step(p, np.array([4.0, 2.0]), 0.1)
        assert np.allclose(out, [1.6, -1.2])


class TestMetrics:
    def test_perfect_prediction(self):
        m = metrics(np.array([1.0, 2.0]), np.array([1.0, 2.0]))
        assert m == Metrics(0.0, 0.0, 0)

    def test_single_row(self):
        m = metrics(np.array([10.0]), np.array([9.0]))
        assert m.mae == pytest.approx(1.0)
        assert m.mape == pytest.approx(10.0)

    def test_two_rows_hand_arithmetic(self):
        m = metrics(np.array([10.0, 20.0]), np.array([9.0, 22.0]))
        assert m.mae == pytest.approx(1.5)
        assert m.mape == pytest.approx(10.0)

    def test_mape_floor_exclusion(self):
        m = metrics(np.array([1e-9, 10.0]), np.array([1.0, 9.0]))
        assert m.n_mape_excluded == 1
        assert m.mape == pytest.approx(10.0)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            metrics(np.array([]), np.array([]))


class TestSensitivity:
    def test_closed_choke_collapses_rank(self):
        cfg = data.SyntheticConfig(n_points=30, seed=5)
        ds = data.generate_synthetic(cfg)
        ds = data.Dataset(p1=ds.p1, p2=ds.p2, t1=ds.t1, u=np.zeros(len(ds)),
                          eta_g=ds.eta_g, eta_o=ds.eta_o, y=np.zeros(len(ds)),
                          provenance="synthetic")
        report = sensitivity_matrix(ds, TRUE_PARAMS, "mm")
        assert report.numerical_rank < 6
        assert not report.identifiable

    def test_jacobian_rows_equal_param_gradients(self):
        ds = small_dataset(n=12, seed=8)
        report = sensitivity_matrix(ds, TRUE_PARAMS, "mm")
        for i in range(len(ds)):
            _, x, _ = ds.row(i)
            g = physics.mm_param_gradient(x, TRUE_PARAMS)
            assert np.allclose(report.jacobian[i], g, rtol=1e-12, atol=1e-15)

    def test_reproducible(self):
        ds = small_dataset(n=50, seed=10)
        a = sensitivity_matrix(ds, TRUE_PARAMS, "mm")
        b = sensitivity_matrix(ds, TRUE_PARAMS, "mm")
        assert np.array_equal(a.singular_values, b.singular_values)
        assert a.numerical_rank == b.numerical_rank

    def test_hm_mode_includes_network_columns(self):
        ds = small_dataset(n=10, seed=11)
        phi = PhysicalParams.from_vector(TRUE_PARAMS.to_vector()[:5], hm_mode=True)
        mlp = nnet.he_init(1, sizes=(1, 6, 4, 1))
        report = sensitivity_matrix(ds, phi, "hm", mlp=mlp)
        assert report.jacobian.shape == (10, 5 + mlp.n_params)
        # more columns than rows can never be full rank
        assert not report.identifiable

    def test_singular_values_sorted_nonnegative(self):
        ds = small_dataset(n=40, seed=12)
        report = sensitivity_matrix(ds, TRUE_PARAMS, "mm")
        sv = report.singular_values
        assert np.all(sv >= 0.0)
        assert np.all(np.diff(sv) <= 0.0)


class TestConfigs:
    def test_fit_config_validation(self):
        with pytest.raises(ConfigError):
            FitConfig(optimizer="lbfgs")
        with pytest.raises(ConfigError):
            FitConfig(learning_rate=1.5)
        with pytest.raises(ConfigError):
            FitConfig(restarts=0)
        with pytest.raises(ConfigError):
            FitConfig(mode="hm", fixed_params={"c_d": 1.0})
        FitConfig(mode="mm", fixed_params={"c_d": 1.0})  # valid

    def test_priors_round_trip(self):
        p = PriorSpec.default()
        q = PriorSpec.from_dict(p.as_dict())
        assert np.array_equal(p.means, q.means)
        assert np.array_equal(p.sigmas, q.sigmas)
        with pytest.raises(ConfigError):
            PriorSpec.from_dict({"bogus": [0, 1]})

    def test_regularization_pi(self):
        reg = RegularizationConfig(sigma_eps=2.0)
        pi = reg.pi_diag(PriorSpec.default(), hm_mode=False)
        assert pi[0] == pytest.approx((2.0 / 33.3) ** 2)
        off = RegularizationConfig(sigma_eps=2.0, enabled=False)
        assert np.all(off.pi_diag(PriorSpec.default(), False) == 0.0)
