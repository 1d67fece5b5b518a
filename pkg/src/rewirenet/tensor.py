"""Dense tensor kernels on NCHW numpy arrays.

Every public function is pure: inputs are never modified, outputs are fresh
arrays, and any NaN/Inf in a result raises NumericalError. Binary elementwise
ops accept equal shapes or a scalar on one side; there is no implicit
broadcasting beyond that. Convolution is im2col + matmul; the readable
nested-loop reference implementation lives in the test suite as the oracle.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import NumericalError, ShapeError

DEFAULT_DTYPE = np.float32


def as_tensor(data, dtype=None) -> np.ndarray:
    """Coerce data to a float ndarray, rejecting empty and non-finite input."""
    arr = np.asarray(data, dtype=dtype if dtype is not None else None)
    if arr.dtype.kind not in "fiu":
        raise ShapeError(f"non-numeric dtype {arr.dtype}")
    if arr.dtype.kind != "f":
        arr = arr.astype(DEFAULT_DTYPE)
    if arr.size == 0:
        raise ShapeError(f"zero-size tensor with shape {arr.shape}")
    _require_finite(arr, "as_tensor")
    return arr


def _require_finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NumericalError(f"{op} produced non-finite values")
    return arr


def _check_binary(a: np.ndarray, b: np.ndarray, op: str):
    # scalar (0-d or python number) may pair with any shape
    if np.ndim(a) == 0 or np.ndim(b) == 0:
        return
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _check_nonempty(arr, op: str):
    if np.size(arr) == 0:
        raise ShapeError(f"{op}: zero-size operand")


def add(a, b) -> np.ndarray:
    _check_binary(a, b, "add")
    return _require_finite(np.add(a, b), "add")


def sub(a, b) -> np.ndarray:
    _check_binary(a, b, "sub")
    return _require_finite(np.subtract(a, b), "sub")


def mul(a, b) -> np.ndarray:
    _check_binary(a, b, "mul")
    return _require_finite(np.multiply(a, b), "mul")


def maximum(a, b) -> np.ndarray:
    _check_binary(a, b, "maximum")
    return _require_finite(np.maximum(a, b), "maximum")


def sign(x) -> np.ndarray:
    """Elementwise sign with sign(0) == 0."""
    return _require_finite(np.sign(x), "sign")


def absolute(x) -> np.ndarray:
    return _require_finite(np.abs(x), "absolute")


def clamp(x, lo, hi) -> np.ndarray:
    """Clip x into [lo, hi]; bounds may be scalars or arrays of x's shape."""
    if np.ndim(lo) == 0 and np.ndim(hi) == 0 and lo > hi:
        raise ShapeError(f"clamp: lo {lo} > hi {hi}")
    _check_binary(x, lo, "clamp")
    _check_binary(x, hi, "clamp")
    return _require_finite(np.clip(x, lo, hi), "clamp")


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Rank-2 matrix product."""
    if np.ndim(a) != 2 or np.ndim(b) != 2:
        raise ShapeError(f"matmul: need rank-2 operands, got {np.shape(a)} @ {np.shape(b)}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    return _require_finite(a @ b, "matmul")


def conv_output_hw(h: int, w: int, kh: int, kw: int, stride: int, padding: int):
    """Output spatial dims; the window must tile the padded input exactly."""
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv: bad stride/padding {stride}/{padding}")
    eh, ew = h + 2 * padding - kh, w + 2 * padding - kw
    if eh < 0 or ew < 0:
        raise ShapeError(f"conv: kernel {kh}x{kw} exceeds padded input {h + 2 * padding}x{w + 2 * padding}")
    if eh % stride or ew % stride:
        raise ShapeError(f"conv: non-integer output size for input {h}x{w}, kernel {kh}x{kw}, stride {stride}, padding {padding}")
    return eh // stride + 1, ew // stride + 1


def im2col(x: np.ndarray, kh: int, kw: int, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Unfold (N, C, H, W) into patch columns (N, C*kh*kw, out_h*out_w).

    Column k-ordering is (C, kh, kw) row-major so that a weight tensor
    reshaped to (M, C*kh*kw) lines up for the matmul.
    """
    if x.ndim != 4:
        raise ShapeError(f"im2col: expected NCHW input, got shape {x.shape}")
    n, c, h, w = x.shape
    oh, ow = conv_output_hw(h, w, kh, kw, stride, padding)
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # (N, C, oh, ow, kh, kw) -> (N, C, kh, kw, oh, ow) -> columns
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, oh * ow)
    return np.ascontiguousarray(cols)


def col2im(cols: np.ndarray, x_shape, kh: int, kw: int, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Fold patch columns back onto the input grid, summing overlaps.

    Adjoint of im2col; used for the convolution input gradient.
    """
    n, c, h, w = x_shape
    oh, ow = conv_output_hw(h, w, kh, kw, stride, padding)
    if cols.shape != (n, c * kh * kw, oh * ow):
        raise ShapeError(f"col2im: columns {cols.shape} do not match {x_shape} with {kh}x{kw}/{stride}/{padding}")
    blocks = cols.reshape(n, c, kh, kw, oh, ow)
    out = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += blocks[:, :, i, j]
    if padding:
        out = out[:, :, padding:padding + h, padding:padding + w]
    return np.ascontiguousarray(out)


def conv2d(x: np.ndarray, weight: np.ndarray, stride: int = 1, padding: int = 0) -> np.ndarray:
    """2-d cross-correlation of (N, C, H, W) with filters (M, C, kh, kw)."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d: need 4-d input and weight, got {np.shape(x)} and {np.shape(weight)}")
    n, c, h, w = x.shape
    m, cw, kh, kw = weight.shape
    if c != cw:
        raise ShapeError(f"conv2d: input has {c} channels, weight expects {cw}")
    oh, ow = conv_output_hw(h, w, kh, kw, stride, padding)
    cols = im2col(x, kh, kw, stride, padding)
    out = np.matmul(weight.reshape(m, c * kh * kw), cols)
    return _require_finite(out.reshape(n, m, oh, ow), "conv2d")


def reduce_sum(x, axis=None) -> np.ndarray:
    _check_nonempty(x, "reduce_sum")
    return _require_finite(np.sum(x, axis=axis), "reduce_sum")


def reduce_mean(x, axis=None) -> np.ndarray:
    _check_nonempty(x, "reduce_mean")
    return _require_finite(np.mean(x, axis=axis), "reduce_mean")


def reduce_max(x, axis=None) -> np.ndarray:
    _check_nonempty(x, "reduce_max")
    return _require_finite(np.max(x, axis=axis), "reduce_max")


def argmax(x, axis=None) -> np.ndarray:
    """Index of the max; ties resolve to the lowest index."""
    _check_nonempty(x, "argmax")
    return np.argmax(x, axis=axis)


def l2_norm_sq(x, axis=None) -> np.ndarray:
    _check_nonempty(x, "l2_norm_sq")
    return _require_finite(np.sum(np.square(x), axis=axis), "l2_norm_sq")


def l2_norm(x, axis=None) -> np.ndarray:
    return np.sqrt(l2_norm_sq(x, axis=axis))
