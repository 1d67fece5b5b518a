"""Numeric kernels against naive-loop oracles plus contract errors."""

import numpy as np
import pytest

from rewirenet import tensor as T
from rewirenet.exceptions import NumericalError, ShapeError

from conftest import naive_conv2d, naive_matmul


def test_matmul_matches_naive_loops():
    rng = np.random.default_rng(7)
    for _ in range(20):
        n, k, m = rng.integers(1, 9, size=3)
        a = rng.standard_normal((n, k))
        b = rng.standard_normal((k, m))
        np.testing.assert_allclose(T.matmul(a, b), naive_matmul(a, b), rtol=1e-12)


def test_matmul_rejects_bad_ranks():
    with pytest.raises(ShapeError):
        T.matmul(np.ones((2, 3, 4)), np.ones((4, 2)))
    with pytest.raises(ShapeError):
        T.matmul(np.ones((2, 3)), np.ones((4, 2)))


def test_conv2d_matches_naive_loops():
    rng = np.random.default_rng(11)
    cases = []
    for _ in range(20):
        kh = int(rng.integers(1, 4))
        stride = int(rng.integers(1, 3))
        padding = int(rng.integers(0, 3))
        h = int(rng.integers(kh, kh + 5))
        # keep only stride-compatible sizes
        h += (-(h + 2 * padding - kh)) % stride
        cases.append((int(rng.integers(1, 3)), int(rng.integers(1, 4)),
                      int(rng.integers(1, 4)), h, kh, stride, padding))
    for n, c, m, h, kh, stride, padding in cases:
        x = rng.standard_normal((n, c, h, h)).astype(np.float32)
        w = rng.standard_normal((m, c, kh, kh)).astype(np.float32)
        got = T.conv2d(x, w, stride=stride, padding=padding)
        want = naive_conv2d(x, w, stride=stride, padding=padding)
        np.testing.assert_allclose(got, want, rtol=1e-4, atol=1e-5)


def test_conv2d_known_values():
    # single 3x3 window: output = sum of elementwise products
    x = np.arange(9, dtype=np.float32).reshape(1, 1, 3, 3)
    w = np.ones((1, 1, 3, 3), dtype=np.float32)
    assert T.conv2d(x, w).item() == 36.0
    w2 = np.zeros((1, 1, 3, 3), dtype=np.float32)
    w2[0, 0, 1, 1] = 2.0  # center tap only
    assert T.conv2d(x, w2).item() == 8.0


def test_conv_output_hw_rejects_non_integer_geometry():
    assert T.conv_output_hw(5, 5, 3, 3, 1, 0) == (3, 3)
    with pytest.raises(ShapeError):
        T.conv_output_hw(6, 6, 3, 3, 2, 0)  # (6-3)/2 not whole
    with pytest.raises(ShapeError):
        T.conv_output_hw(2, 2, 3, 3, 1, 0)  # kernel larger than input


def test_im2col_col2im_adjoint():
    # <im2col(x), c> == <x, col2im(c)> defines the exact adjoint pair
    rng = np.random.default_rng(3)
    for _ in range(10):
        x = rng.standard_normal((2, 3, 6, 6))
        cols = T.im2col(x, 3, 3, stride=1, padding=1)
        c = rng.standard_normal(cols.shape)
        lhs = float(np.vdot(cols, c))
        rhs = float(np.vdot(x, T.col2im(c, x.shape, 3, 3, stride=1, padding=1)))
        assert abs(lhs - rhs) < 1e-9 * max(abs(lhs), 1.0)


def test_im2col_column_order():
    # columns enumerate (channel, kh, kw) row-major
    x = np.arange(2 * 4, dtype=np.float64).reshape(1, 2, 2, 2)
    cols = T.im2col(x, 2, 2)
    np.testing.assert_array_equal(cols[0, :, 0], x.ravel())


def test_sign_zero_is_zero():
    out = T.sign(np.array([-3.0, -0.0, 0.0, 5.0]))
    np.testing.assert_array_equal(out, [-1.0, 0.0, 0.0, 1.0])


def test_clamp_and_maximum():
    x = np.array([-1.0, 0.25, 2.0])
    np.testing.assert_array_equal(T.clamp(x, 0.0, 1.0), [0.0, 0.25, 1.0])
    np.testing.assert_array_equal(T.maximum(x, np.zeros(3)), [0.0, 0.25, 2.0])
    with pytest.raises(ValueError):
        T.clamp(x, 1.0, 0.0)


def test_argmax_ties_take_lowest_index():
    x = np.array([[1.0, 3.0, 3.0], [2.0, 2.0, 1.0]])
    np.testing.assert_array_equal(T.argmax(x, axis=1), [1, 0])


def test_reductions():
    x = np.arange(6, dtype=np.float64).reshape(2, 3)
    assert T.reduce_sum(x) == 15.0
    assert T.reduce_mean(x) == 2.5
    assert T.reduce_max(x) == 5.0
    np.testing.assert_array_equal(T.reduce_sum(x, axis=0), [3.0, 5.0, 7.0])
    assert T.l2_norm_sq(x) == 55.0
    assert abs(T.l2_norm(x) - np.sqrt(55.0)) < 1e-12


def test_non_finite_inputs_raise():
    bad = np.array([1.0, np.inf])
    nan = np.array([np.nan, 0.0])
    with pytest.raises(NumericalError):
        T.add(bad, bad)
    with pytest.raises(NumericalError):
        T.mul(nan, nan)
    with pytest.raises(NumericalError):
        T.sign(nan)


def test_shape_mismatch_raises():
    with pytest.raises(ShapeError):
        T.add(np.ones(3), np.ones(4))
    with pytest.raises(ShapeError):
        T.sub(np.ones((2, 2)), np.ones((2, 3)))


def test_zero_size_rejected():
    with pytest.raises(ShapeError):
        T.reduce_sum(np.zeros((0, 3)))


def test_scalar_broadcast_allowed():
    np.testing.assert_array_equal(T.add(np.ones(3), 2.0), [3.0, 3.0, 3.0])
    np.testing.assert_array_equal(T.mul(np.ones(3), 0.5), [0.5, 0.5, 0.5])


def test_ops_do_not_mutate_inputs():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((2, 2, 4, 4))
    w = rng.standard_normal((3, 2, 3, 3))
    x0, w0 = x.copy(), w.copy()
    T.conv2d(x, w, padding=1)
    T.im2col(x, 3, 3, padding=1)
    T.clamp(x, -0.5, 0.5)
    np.testing.assert_array_equal(x, x0)
    np.testing.assert_array_equal(w, w0)
