"""Shared independent oracles.

Everything here is written the slow, obvious way (explicit python loops,
central differences) so test expectations never share code with the package
under test.
"""

import numpy as np
import pytest


def naive_matmul(a, b):
    n, k = a.shape
    k2, m = b.shape
    assert k == k2
    out = np.zeros((n, m), dtype=np.result_type(a, b))
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for t in range(k):
                acc += float(a[i, t]) * float(b[t, j])
            out[i, j] = acc
    return out


def naive_conv2d(x, w, stride=1, padding=0):
    """Six explicit loops; cross-correlation, zero padding."""
    n, c, h, ww = x.shape
    m, c2, kh, kw = w.shape
    assert c == c2
    if padding:
        xp = np.zeros((n, c, h + 2 * padding, ww + 2 * padding), dtype=x.dtype)
        xp[:, :, padding:padding + h, padding:padding + ww] = x
        x = xp
        h, ww = h + 2 * padding, ww + 2 * padding
    oh = (h - kh) // stride + 1
    ow = (ww - kw) // stride + 1
    out = np.zeros((n, m, oh, ow), dtype=np.float64)
    for b in range(n):
        for f in range(m):
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0
                    for ch in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                acc += float(x[b, ch, i * stride + u, j * stride + v]) * float(w[f, ch, u, v])
                    out[b, f, i, j] = acc
    return out


def fd_gradient(f, x, h=1e-5):
    """Central differences, one coordinate at a time, in float64."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.ravel()
    gf = g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * h)
    return g


def rel_err(got, want):
    denom = max(np.abs(want).max(), 1e-12)
    return np.abs(got - want).max() / denom


def apportion_reference(quotas, total):
    """Independent largest-remainder apportionment: floors, then one seat at
    a time to the largest remainder, ties to the lowest index."""
    quotas = [float(q) for q in quotas]
    floors = [int(np.floor(q)) for q in quotas]
    left = total - sum(floors)
    rems = [(q - f) for q, f in zip(quotas, floors)]
    order = sorted(range(len(quotas)), key=lambda i: (-rems[i], i))
    out = list(floors)
    for i in order[:left]:
        out[i] += 1
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
