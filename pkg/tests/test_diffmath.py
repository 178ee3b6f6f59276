import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from partcf.diffmath import (
    NumericError,
    ParameterError,
    ShapeError,
    as_matrix,
    finite_diff_check,
    l2norm_rows,
    l2norm_rows_vjp,
    logsumexp_row,
    matmul,
    relative_error,
    softmax_rows,
    softmax_rows_vjp,
)

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


def triple_loop(a, b):
    n, m, p = a.shape[0], a.shape[1], b.shape[1]
    out = np.zeros((n, p))
    for i in range(n):
        for j in range(p):
            acc = 0.0
            for k in range(m):
                acc += a[i, k] * b[k, j]
            out[i, j] = acc
    return out


class TestMatmul:
    def test_identity(self, rng):
        M = rng.normal(size=(3, 4))
        assert np.array_equal(matmul(np.eye(3), M), M)

    def test_hand_case(self):
        assert matmul([[1, 2]], [[3], [4]]).tolist() == [[11.0]]

    def test_matches_triple_loop_exactly(self, rng):
        a, b = rng.normal(size=(4, 3)), rng.normal(size=(3, 5))
        assert np.array_equal(matmul(a, b), triple_loop(a, b))

    def test_transpose_b(self, rng):
        a, b = rng.normal(size=(2, 3)), rng.normal(size=(5, 3))
        assert np.array_equal(matmul(a, b, transpose_b=True), triple_loop(a, b.T))

    def test_shape_errors(self):
        with pytest.raises(ShapeError):
            matmul(np.ones((2, 3)), np.ones((2, 3)))
        with pytest.raises(ShapeError):
            matmul(np.ones(3), np.ones((3, 1)))

    def test_as_matrix_rejects_nonfinite(self):
        with pytest.raises(NumericError, match=r"\(0, 1\)"):
            as_matrix([[1.0, np.nan]])
        with pytest.raises(ShapeError):
            as_matrix([1.0, 2.0])


class TestSoftmax:
    def test_equal_values_uniform(self):
        for tau in (0.01, 1.0, 7.0):
            assert np.allclose(softmax_rows(np.full((2, 5), 3.3), tau), 0.2)

    def test_two_values(self):
        y = softmax_rows([[1.0, 0.0]], 1.0)[0]
        assert y == pytest.approx([math.e / (math.e + 1), 1 / (math.e + 1)], abs=1e-12)
        assert y == pytest.approx([0.7311, 0.2689], abs=1e-4)

    def test_low_temperature_argmax(self):
        assert softmax_rows([[1.0, 0.0]], 0.01)[0, 0] > 1 - 1e-9

    def test_rejects_bad_temperature(self):
        with pytest.raises(ParameterError):
            softmax_rows([[1.0]], 0.0)

    @given(arrays(np.float64, (3, 4), elements=finite), st.floats(0.05, 3.0))
    def test_rows_sum_to_one(self, m, tau):
        y = softmax_rows(m, tau)
        assert np.allclose(y.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(y >= 0)

    def test_vjp_matches_finite_differences(self, rng):
        x, w = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))

        def f(x):
            y = softmax_rows(x, 0.5)
            return float((w * y).sum()), [softmax_rows_vjp(y, w, 0.5)]

        assert finite_diff_check(f, [x], rel_tol=1e-6).passed


class TestL2Norm:
    def test_345(self):
        assert l2norm_rows([[3.0, 4.0]]).tolist() == [[0.6, 0.8]]

    def test_unit_row_unchanged(self):
        row = np.array([[0.6, 0.8]])
        assert np.allclose(l2norm_rows(row), row, atol=1e-15)

    def test_zero_row(self):
        assert l2norm_rows([[0.0, 0.0]]).tolist() == [[0.0, 0.0]]

    @given(arrays(np.float64, (4, 3), elements=finite))
    def test_nonzero_rows_unit(self, m):
        y = l2norm_rows(m)
        n = np.linalg.norm(m, axis=1)
        assert np.allclose(np.linalg.norm(y[n > 1e-3], axis=1), 1.0, atol=1e-12)

    def test_vjp(self, rng):
        x, w = rng.normal(size=(3, 5)), rng.normal(size=(3, 5))

        def f(x):
            return float((w * l2norm_rows(x)).sum()), [l2norm_rows_vjp(x, w)]

        assert finite_diff_check(f, [x], rel_tol=1e-6).passed


class TestLogSumExp:
    def test_constant(self):
        assert logsumexp_row([2.5, 2.5, 2.5]) == pytest.approx(2.5 + math.log(3), abs=1e-12)

    def test_single(self):
        assert logsumexp_row([-7.25]) == -7.25

    def test_no_overflow(self):
        # 100 + log(1 + e^-100) in exact arithmetic is 100 to double precision
        assert logsumexp_row([0.0, 100.0]) == pytest.approx(100.0, abs=1e-12)
        assert logsumexp_row([0.0, 1000.0]) == pytest.approx(1000.0)

    def test_temperature(self):
        assert logsumexp_row([1.0, 1.0], 0.5) == pytest.approx(1.0 + 0.5 * math.log(2))

    def test_empty(self):
        with pytest.raises(ParameterError):
            logsumexp_row([])


class TestFiniteDiffCheck:
    def test_sum(self, rng):
        x = rng.normal(size=(3, 4))
        rep = finite_diff_check(lambda x: (x.sum(), [np.ones_like(x)]), [x])
        assert rep.passed and rep.max_rel_err < 1e-8

    def test_square_norm(self, rng):
        x = rng.normal(size=(5,))
        rep = finite_diff_check(lambda x: (float(x @ x), [2 * x]), [x])
        assert rep.passed

    def test_detects_wrong_gradient(self, rng):
        x = rng.normal(size=(2, 2))
        rep = finite_diff_check(lambda x: (float((x**2).sum()), [x]), [x])
        assert not rep.passed
        assert rep.worst_input == 0 and len(rep.worst_index) == 2
        assert "FAIL" in str(rep)

    def test_extrapolation_removes_truncation(self):
        x = np.array([0.3])
        f = lambda x: (float(np.exp(40 * x[0])), [np.array([40 * np.exp(40 * x[0])])])
        assert not finite_diff_check(f, [x], step=1e-3).passed
        assert finite_diff_check(f, [x], step=1e-3, extrapolate=True).passed
        assert finite_diff_check(f, [x], step=1e-3, extrapolate="auto").passed

    def test_auto_extrapolation_still_fails_wrong_gradient(self, rng):
        x = rng.normal(size=4)
        rep = finite_diff_check(lambda x: (float((x**3).sum()), [3 * x**2 + 1e-2]), [x], extrapolate="auto")
        assert not rep.passed

    def test_value_fn_used_for_probes(self, rng):
        calls = []
        x = rng.normal(size=3)

        def value(x):
            calls.append(1)
            return float((x**2).sum())

        rep = finite_diff_check(lambda x: (value(x), [2 * x]), [x], value_fn=value)
        assert rep.passed and len(calls) == 1 + 6

    def test_reports_worst_input(self, rng):
        a, b = rng.normal(size=3), rng.normal(size=3)
        rep = finite_diff_check(lambda a, b: (float(a.sum() + (b**2).sum()), [np.ones(3), b]), [a, b])
        assert rep.worst_input == 1
        assert rep.per_input_max[0] < 1e-8

    def test_nonfinite_probe(self):
        f = lambda x: (float(np.log(x).sum()), [1 / x])
        with pytest.raises(NumericError), np.errstate(invalid="ignore"):
            finite_diff_check(f, [np.array([1e-5])], step=1e-4)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            finite_diff_check(lambda x: (0.0, [np.zeros(2)]), [np.zeros(3)])

    def test_relative_error_floor(self):
        assert relative_error(np.array([1e-9]), np.array([0.0]))[0] == pytest.approx(1e-3)
