"""Tape-based reverse-mode differentiation over the tensor kernels.

The graph is rebuilt on every forward pass: each op returns a Node holding
its value, its parent Nodes, and a vjp closure mapping the output gradient
to per-parent gradients. backward() walks the tape in reverse topological
order, so gradient accumulation order is fixed and bit-reproducible for a
given graph. Gradients flow only into Nodes with requires_grad; masks and
other constants enter through constant() and contribute no gradient.
"""

import numpy as np

from . import tensor as T
from .exceptions import NumericalError, ShapeError

BN_EPS = 1e-5


class Node:
    """One tape entry: a value plus the recipe for its parent gradients."""

    __slots__ = ("value", "parents", "vjp", "requires_grad", "op")

    def __init__(self, value, parents=(), vjp=None, requires_grad=False, op="leaf"):
        self.value = np.asarray(value)
        self.parents = tuple(parents)
        self.vjp = vjp
        self.requires_grad = requires_grad or any(p.requires_grad for p in self.parents)
        self.op = op

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(op={self.op}, shape={self.value.shape}, grad={self.requires_grad})"


def leaf(value, op="leaf") -> Node:
    """A differentiable graph input (weights, or images under attack)."""
    return Node(T.as_tensor(value), requires_grad=True, op=op)


def constant(value, op="constant") -> Node:
    """A graph input that never receives a gradient (masks, labels, inputs)."""
    return Node(np.asarray(value), requires_grad=False, op=op)


def _unary(x: Node, value, vjp, op: str) -> Node:
    return Node(value, (x,), vjp, op=op)


def add(a: Node, b: Node) -> Node:
    val = T.add(a.value, b.value)
    return Node(val, (a, b), lambda g: (g, g), op="add")


def sub(a: Node, b: Node) -> Node:
    val = T.sub(a.value, b.value)
    return Node(val, (a, b), lambda g: (g, -g), op="sub")


def mul(a: Node, b: Node) -> Node:
    """Elementwise product of same-shape nodes (theta * mask lives here)."""
    val = T.mul(a.value, b.value)
    if a.value.shape != b.value.shape:
        raise ShapeError(f"mul: shape mismatch {a.value.shape} vs {b.value.shape}")
    return Node(val, (a, b), lambda g: (g * b.value, g * a.value), op="mul")


def scale(x: Node, s: float) -> Node:
    """Multiply by a python scalar."""
    s = float(s)
    return _unary(x, T.mul(x.value, np.asarray(s, dtype=x.value.dtype)), lambda g: (g * s,), "scale")


def square(x: Node) -> Node:
    return _unary(x, T.mul(x.value, x.value), lambda g: (2.0 * x.value * g,), "square")


def relu(x: Node) -> Node:
    val = T.maximum(x.value, np.asarray(0.0, dtype=x.value.dtype))
    return _unary(x, val, lambda g: (g * (x.value > 0), ), "relu")


def reshape(x: Node, shape) -> Node:
    return _unary(x, x.value.reshape(shape), lambda g: (g.reshape(x.value.shape),), "reshape")


def flatten(x: Node) -> Node:
    n = x.value.shape[0]
    return reshape(x, (n, -1))


def matmul(a: Node, b: Node) -> Node:
    val = T.matmul(a.value, b.value)

    def vjp(g):
        ga = g @ b.value.T if a.requires_grad else None
        gb = a.value.T @ g if b.requires_grad else None
        return ga, gb

    return Node(val, (a, b), vjp, op="matmul")


def add_bias(x: Node, b: Node) -> Node:
    """(N, K) + (K,) row bias."""
    if x.value.ndim != 2 or b.value.shape != (x.value.shape[1],):
        raise ShapeError(f"add_bias: got {x.value.shape} + {b.value.shape}")
    return Node(x.value + b.value, (x, b), lambda g: (g, g.sum(axis=0)), op="add_bias")


def conv2d(x: Node, w: Node, stride: int = 1, padding: int = 0) -> Node:
    """Cross-correlation via im2col; columns are cached for the backward pass."""
    n, c, h, wd = x.value.shape
    m, _, kh, kw = w.value.shape
    cols = T.im2col(x.value, kh, kw, stride, padding)
    w2d = w.value.reshape(m, -1)
    oh, ow = T.conv_output_hw(h, wd, kh, kw, stride, padding)
    val = np.matmul(w2d, cols).reshape(n, m, oh, ow)
    T._require_finite(val, "conv2d")

    def vjp(g):
        gmat = g.reshape(n, m, oh * ow)
        gx = gw = None
        if x.requires_grad:
            dcols = np.matmul(w2d.T, gmat)
            gx = T.col2im(dcols, x.value.shape, kh, kw, stride, padding)
        if w.requires_grad:
            gw = np.einsum("nml,nkl->mk", gmat, cols, optimize=True).reshape(w.value.shape)
        return gx, gw

    return Node(val, (x, w), vjp, op="conv2d")


def maxpool2x2(x: Node) -> Node:
    """2x2 max pooling with stride 2; ties route the gradient to the
    lowest window index (row-major top-left first)."""
    n, c, h, w = x.value.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2x2: odd spatial dims {h}x{w}")
    oh, ow = h // 2, w // 2
    win = x.value.reshape(n, c, oh, 2, ow, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh, ow, 4)
    idx = np.argmax(win, axis=-1)
    val = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def vjp(g):
        g4 = (np.arange(4) == idx[..., None]) * g[..., None]
        gx = g4.reshape(n, c, oh, ow, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (np.ascontiguousarray(gx),)

    return _unary(x, val, vjp, "maxpool2x2")


def mean_spatial(x: Node) -> Node:
    """(N, C, H, W) -> (N, C) global average pool."""
    n, c, h, w = x.value.shape
    val = T.reduce_mean(x.value, axis=(2, 3))

    def vjp(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.value.shape).astype(g.dtype, copy=True),)

    return _unary(x, val, vjp, "mean_spatial")


def sum_all(x: Node) -> Node:
    val = np.asarray(T.reduce_sum(x.value))
    return _unary(x, val, lambda g: (np.full(x.value.shape, g, dtype=x.value.dtype),), "sum_all")


def batchnorm_train(x: Node, gamma: Node, beta: Node, eps: float = BN_EPS):
    """Batch normalization over (N, H, W) per channel, training statistics.

    Returns (node, batch_mean, batch_var); the caller owns the running-stat
    update. Requires batch size >= 2 so the variance is informative.
    """
    if x.value.shape[0] < 2:
        raise ShapeError("batchnorm_train: batch size < 2")
    axes = (0, 2, 3)
    m = x.value.shape[0] * x.value.shape[2] * x.value.shape[3]
    mean = x.value.mean(axis=axes)
    var = x.value.var(axis=axes)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.value - mean[None, :, None, None]) * inv_std[None, :, None, None]
    val = gamma.value[None, :, None, None] * xhat + beta.value[None, :, None, None]
    T._require_finite(val, "batchnorm_train")

    def vjp(g):
        dgamma = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        dbeta = g.sum(axis=axes) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * gamma.value[None, :, None, None]
            s1 = dxhat.sum(axis=axes)
            s2 = (dxhat * xhat).sum(axis=axes)
            gx = (inv_std[None, :, None, None] / m) * (m * dxhat - s1[None, :, None, None] - xhat * s2[None, :, None, None])
            gx = gx.astype(x.value.dtype, copy=False)
        return gx, dgamma, dbeta

    return Node(val, (x, gamma, beta), vjp, op="batchnorm_train"), mean, var


def batchnorm_eval(x: Node, gamma: Node, beta: Node, running_mean, running_var, eps: float = BN_EPS) -> Node:
    """Batch normalization using stored running statistics (constants)."""
    inv_std = (1.0 / np.sqrt(running_var + eps)).astype(x.value.dtype)
    shift = running_mean.astype(x.value.dtype)
    xhat = (x.value - shift[None, :, None, None]) * inv_std[None, :, None, None]
    val = gamma.value[None, :, None, None] * xhat + beta.value[None, :, None, None]
    T._require_finite(val, "batchnorm_eval")
    axes = (0, 2, 3)

    def vjp(g):
        dgamma = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        dbeta = g.sum(axis=axes) if beta.requires_grad else None
        gx = g * (gamma.value * inv_std)[None, :, None, None] if x.requires_grad else None
        return gx, dgamma, dbeta

    return Node(val, (x, gamma, beta), vjp, op="batchnorm_eval")


def softmax_cross_entropy(logits: Node, labels) -> Node:
    """Mean cross-entropy of (N, K) logits against integer labels (N,).

    Softmax and log fuse through the log-sum-exp form, so the graph never
    materializes probabilities on the forward path.
    """
    z = logits.value
    if z.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: logits must be (N, K), got {z.shape}")
    t = np.asarray(labels)
    if t.shape != (z.shape[0],):
        raise ShapeError(f"softmax_cross_entropy: labels {t.shape} for logits {z.shape}")
    if t.min() < 0 or t.max() >= z.shape[1]:
        raise ShapeError("softmax_cross_entropy: label out of range")
    n = z.shape[0]
    zmax = z.max(axis=1, keepdims=True)
    shifted = z - zmax
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True)) + zmax
    losses = lse[:, 0] - z[np.arange(n), t]
    val = np.asarray(losses.mean(), dtype=z.dtype)
    T._require_finite(val, "softmax_cross_entropy")

    def vjp(g):
        p = np.exp(shifted - (lse - zmax))
        p[np.arange(n), t] -= 1.0
        return ((g * p / n).astype(z.dtype, copy=False),)

    return _unary(logits, val, vjp, "softmax_cross_entropy")


def topo_order(root: Node) -> list:
    """All reachable nodes, parents before children; deterministic."""
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node.parents):
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Node, retain_interior: bool = False) -> dict:
    """Reverse sweep from a scalar loss; returns {leaf Node: gradient}.

    Interior gradients are freed as soon as they have been consumed unless
    retain_interior is set (tests use that to probe intermediate vjps).
    """
    if loss.value.shape != ():
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.value.shape}")
    if not np.isfinite(loss.value):
        raise NumericalError("backward: loss is not finite")
    order = topo_order(loss)
    grads = {loss: np.ones((), dtype=loss.value.dtype)}
    kept = {}
    for node in reversed(order):
        g = grads.pop(node, None)
        if g is None or not node.requires_grad:
            continue
        if node.vjp is None or retain_interior:
            kept[node] = g
        if node.vjp is not None:
            parent_grads = node.vjp(g)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if not np.isfinite(pg).all():
                    raise NumericalError(f"backward: non-finite gradient out of {node.op}")
                if parent in grads:
                    grads[parent] = grads[parent] + pg
                else:
                    grads[parent] = pg
    return kept


def grad_wrt_input(loss: Node, x: Node) -> np.ndarray:
    """Gradient of the loss with respect to one designated input node."""
    grads = backward(loss)
    if x not in grads:
        raise ValueError("grad_wrt_input: node does not feed the loss (or does not require grad)")
    return grads[x]


def gradcheck(build, params, h: float = 1e-5, rtol: float = 1e-4) -> float:
    """Compare analytic gradients of build(params) against central differences.

    build maps a list of float64 leaf Nodes to a scalar loss Node. Returns the
    worst relative error over all coordinates and raises NumericalError if it
    exceeds rtol. Finite differences are taken in 64-bit.
    """
    leaves = [leaf(np.asarray(p, dtype=np.float64)) for p in params]
    grads = backward(build(leaves))
    worst = 0.0
    for ln in leaves:
        analytic = grads.get(ln)
        if analytic is None:
            raise ValueError("gradcheck: a parameter does not reach the loss")
        base = ln.value
        num = np.zeros_like(base)
        flat = base.reshape(-1)
        nflat = num.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            hi = float(build(leaves).value)
            flat[i] = orig - h
            lo = float(build(leaves).value)
            flat[i] = orig
            nflat[i] = (hi - lo) / (2 * h)
        denom = np.maximum(np.abs(num), np.abs(analytic))
        err = np.abs(analytic - num) / np.maximum(denom, 1e-8)
        worst = max(worst, float(err.max()))
    if worst > rtol:
        raise NumericalError(f"gradcheck: relative error {worst:.3e} exceeds {rtol:.1e}")
    return worst
