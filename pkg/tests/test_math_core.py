"""Numeric primitives: validation, factorizations, features, losses."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedunroll.errors import (
    DimensionMismatch,
    EmptyData,
    NonFiniteInput,
    NotPD,
)
from fedunroll.math_core import (
    EPS,
    DiagPD,
    as_matrix,
    as_vector,
    chol_solve,
    clamp_positive,
    design_matrix,
    poly_features,
    rectify,
    rmse,
    spd_cholesky,
    spd_solve,
    sse_loss,
)


class TestValidation:
    def test_as_vector_accepts_list(self):
        v = as_vector([1, 2, 3], "v")
        assert v.dtype == np.float64
        assert v.shape == (3,)

    def test_as_vector_rejects_nan(self):
        with pytest.raises(NonFiniteInput):
            as_vector([1.0, np.nan], "v")

    def test_as_vector_rejects_inf(self):
        with pytest.raises(NonFiniteInput):
            as_vector([np.inf, 0.0], "v")

    def test_as_vector_rejects_matrix(self):
        with pytest.raises(DimensionMismatch):
            as_vector(np.zeros((2, 2)), "v")

    def test_as_matrix_rejects_vector(self):
        with pytest.raises(DimensionMismatch):
            as_matrix(np.zeros(3), "A")

    def test_as_matrix_rejects_nonfinite(self):
        with pytest.raises(NonFiniteInput):
            as_matrix([[1.0, np.inf]], "A")


class TestRectifierAndClamp:
    def test_rectify_negative_is_zero(self):
        assert rectify(np.array([-1.0]))[0] == 0.0

    def test_rectify_positive_passes(self):
        assert rectify(np.array([2.5]))[0] == 2.5

    def test_rectify_elementwise(self):
        out = rectify(np.array([-3.0, 0.0, 0.5]))
        assert np.array_equal(out, np.array([0.0, 0.0, 0.5]))

    def test_clamp_floor(self):
        out = clamp_positive(np.array([-5.0, 0.0, 1e-9, 2.0]))
        assert np.array_equal(out, np.array([EPS, EPS, EPS, 2.0]))

    def test_clamp_scalar(self):
        assert float(clamp_positive(0.5)) == 0.5
        assert float(clamp_positive(-0.5)) == EPS

    def test_diag_pd_effective(self):
        d = DiagPD(raw_diag=np.array([-1.0, 0.7]))
        assert np.array_equal(d.effective, np.array([0.0, 0.7]))


class TestCholesky:
    def test_rejects_asymmetric(self):
        A = np.array([[2.0, 1.0], [0.0, 2.0]])
        with pytest.raises(NotPD):
            spd_cholesky(A)

    def test_rejects_indefinite(self):
        A = np.array([[1.0, 0.0], [0.0, -1.0]])
        with pytest.raises(NotPD):
            spd_cholesky(A)

    def test_factor_reconstructs(self):
        rng = np.random.default_rng(0)
        B = rng.normal(size=(4, 4))
        A = B @ B.T + 4.0 * np.eye(4)
        L = spd_cholesky(A)
        assert np.allclose(L @ L.T, A, atol=1e-12)
        assert np.allclose(np.triu(L, 1), 0.0)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 6), st.integers(0, 1000))
    def test_solve_recovers_solution(self, k, seed):
        rng = np.random.default_rng(seed)
        B = rng.normal(size=(k, k))
        A = B @ B.T + k * np.eye(k)
        x = rng.normal(size=k)
        got = spd_solve(A, A @ x)
        assert np.allclose(got, x, atol=1e-8)

    def test_chol_solve_matches_direct(self):
        rng = np.random.default_rng(3)
        B = rng.normal(size=(5, 5))
        A = B @ B.T + 5 * np.eye(5)
        b = rng.normal(size=5)
        L = spd_cholesky(A)
        assert np.allclose(chol_solve(L, b), np.linalg.solve(A, b), atol=1e-10)

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            spd_solve(np.eye(3), np.ones(2))


class TestPolyFeatures:
    @settings(max_examples=100, deadline=None)
    @given(st.floats(-3, 3, allow_nan=False), st.integers(0, 8))
    def test_matches_powers(self, x, degree):
        got = poly_features(x, degree)
        want = np.array([x**d for d in range(degree + 1)])
        assert np.allclose(got, want, rtol=1e-12, atol=1e-12)

    def test_degree_zero(self):
        assert np.array_equal(poly_features(0.3, 0), np.array([1.0]))

    def test_rejects_nonfinite(self):
        with pytest.raises(NonFiniteInput):
            poly_features(float("nan"), 2)

    def test_rejects_negative_degree(self):
        with pytest.raises(DimensionMismatch):
            poly_features(1.0, -1)

    def test_design_matrix_rows(self):
        xs = np.array([-0.5, 0.0, 2.0])
        D = design_matrix(xs, 3)
        for i, x in enumerate(xs):
            assert np.array_equal(D[i], poly_features(x, 3))


class TestLosses:
    def test_sse_matches_manual(self):
        rng = np.random.default_rng(1)
        X = rng.normal(size=(7, 3))
        v = rng.normal(size=3)
        Y = rng.normal(size=7)
        r = X @ v - Y
        assert abs(sse_loss(X, v, Y) - float(np.sum(r * r))) < 1e-14

    def test_rmse_matches_manual(self):
        rng = np.random.default_rng(2)
        X = rng.normal(size=(9, 2))
        v = rng.normal(size=2)
        Y = rng.normal(size=9)
        want = float(np.sqrt(np.mean((X @ v - Y) ** 2)))
        assert abs(rmse(X, v, Y) - want) < 1e-14

    def test_rmse_zero_on_exact_fit(self):
        X = np.array([[1.0, 2.0], [1.0, 3.0]])
        v = np.array([0.5, -0.25])
        assert rmse(X, v, X @ v) == 0.0

    def test_rmse_empty_raises(self):
        with pytest.raises(EmptyData):
            rmse(np.zeros((0, 2)), np.zeros(2), np.zeros(0))

    def test_shape_mismatch_raises(self):
        with pytest.raises(DimensionMismatch):
            sse_loss(np.zeros((3, 2)), np.zeros(2), np.zeros(4))
