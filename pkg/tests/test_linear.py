"""Closed-form linear solutions and their equivalence with the iterative
optimizer (the one setting with an exact oracle)."""

import numpy as np
import pytest

from chokefit.estimation import (
    fit_linear_iterative,
    linear_map_closed_form,
    linear_mle_closed_form,
)
from chokefit.exceptions import SingularMatrixError


def well_conditioned_system(rng, n=20, d=3):
    X = rng.normal(size=(n, d))
    phi_true = rng.normal(size=d)
    y = X @ phi_true + 0.1 * rng.normal(size=n)
    return X, y


class TestLinearMle:
    def test_identity_design(self):
        y = np.array([3.0, -1.0, 7.0])
        assert np.allclose(linear_mle_closed_form(np.eye(3), y), y)

    def test_duplicated_column_is_singular(self):
        rng = np.random.default_rng(0)
        X = rng.normal(size=(20, 3))
        X = np.column_stack([X, X[:, 1]])
        with pytest.raises(SingularMatrixError):
            linear_mle_closed_form(X, rng.normal(size=20))

    def test_matches_independent_least_squares(self):
        rng = np.random.default_rng(1)
        for _ in range(10):
            X, y = well_conditioned_system(rng)
            ours = linear_mle_closed_form(X, y)
            oracle, *_ = np.linalg.lstsq(X, y, rcond=None)
            assert np.allclose(ours, oracle, atol=1e-10)


class TestLinearMap:
    def test_zero_pi_reduces_to_mle(self):
        rng = np.random.default_rng(2)
        X, y = well_conditioned_system(rng)
        mle = linear_mle_closed_form(X, y)
        mapped = linear_map_closed_form(X, y, np.zeros(3), np.zeros(3))
        assert np.allclose(mle, mapped, atol=1e-12)

    def test_huge_pi_returns_prior_mean(self):
        rng = np.random.default_rng(3)
        X, y = well_conditioned_system(rng)
        mu = np.array([1.5, -2.0, 0.25])
        out = linear_map_closed_form(X, y, np.full(3, 1e12), mu)
        assert np.max(np.abs(out - mu)) < 1e-6

    def test_duplicated_column_solvable_with_identity_pi(self):
        rng = np.random.default_rng(4)
        X = rng.normal(size=(20, 3))
        X = np.column_stack([X, X[:, 1]])
        y = rng.normal(size=20)
        out = linear_map_closed_form(X, y, np.ones(4), np.zeros(4))
        assert np.all(np.isfinite(out))
        # verify optimality of the regularized objective at the solution
        grad = 2.0 * X.T @ (X @ out - y) + 2.0 * out
        assert np.max(np.abs(grad)) < 1e-9

    def test_shrinkage_monotone_in_pi(self):
        rng = np.random.default_rng(5)
        X, y = well_conditioned_system(rng, n=30, d=4)
        mu = rng.normal(size=4)
        prev = None
        for scale in [0.0, 0.1, 1.0, 10.0, 100.0, 1e4, 1e6]:
            sol = linear_map_closed_form(X, y, np.full(4, scale), mu)
            dist = float(np.linalg.norm(sol - mu))
            if prev is not None:
                assert dist <= prev + 1e-9
            prev = dist


class TestIterativeEquivalence:
    def test_gradient_descent_matches_closed_form(self):
        rng = np.random.default_rng(6)
        for _ in range(5):
            X, y = well_conditioned_system(rng, n=50, d=4)
            exact = linear_mle_closed_form(X, y)
            iterative = fit_linear_iterative(X, y)
            assert np.max(np.abs(iterative - exact)) < 1e-6
