"""Tour of the tensor ops and the reverse-mode graph.

Builds a few graphs by hand, checks a gradient against finite differences,
and fits a two-layer net on synthetic blobs with nothing but the autodiff
module and plain SGD updates.
"""

import numpy as np

from rewirenet import autodiff as ad
from rewirenet import tensor as T
from rewirenet.data import synth_blobs

# --- raw tensor ops -------------------------------------------------------
x = np.arange(12, dtype=np.float32).reshape(3, 4)
w = np.ones((4, 2), dtype=np.float32)
print("matmul:\n", T.matmul(x, w))

img = np.ones((1, 1, 4, 4), dtype=np.float32)
k = np.full((1, 1, 3, 3), 2.0, dtype=np.float32)
print("conv2d (padding 1) center:", T.conv2d(img, k, stride=1, padding=1)[0, 0, 1, 1])

# --- a graph and its gradients --------------------------------------------
a = ad.leaf(np.array([[1.0, -2.0], [3.0, 0.5]]))
loss = ad.sum_all(ad.square(ad.relu(a)))
grads = ad.backward(loss)
print("d/da sum(relu(a)^2):\n", grads[a])  # 2a where a > 0, else 0

# the built-in checker compares against central differences
err = ad.gradcheck(lambda p: ad.sum_all(ad.square(ad.relu(p[0]))),
                   [np.random.default_rng(0).standard_normal((3, 3))])
print(f"gradcheck max rel err: {err:.2e}")

# --- train a tiny net directly on the graph -------------------------------
ds = synth_blobs(512, seed=0)
xv = ds.images.reshape(len(ds), -1)
rng = np.random.default_rng(1)
w1 = rng.standard_normal((64, 32)).astype(np.float32) * 0.2
w2 = rng.standard_normal((32, 10)).astype(np.float32) * 0.2

for step in range(200):
    idx = rng.integers(0, len(ds), 64)
    xb, yb = xv[idx], ds.labels[idx]
    n1, n2 = ad.leaf(w1), ad.leaf(w2)
    logits = ad.matmul(ad.relu(ad.matmul(ad.constant(xb), n1)), n2)
    loss = ad.softmax_cross_entropy(logits, yb)
    g = ad.backward(loss)
    w1 -= 0.5 * g[n1]
    w2 -= 0.5 * g[n2]
    if step % 50 == 0:
        print(f"step {step:3d}  loss {float(loss.value):.3f}")

pred = T.argmax(T.matmul(np.maximum(T.matmul(xv, w1), 0), w2), axis=1)
print("train accuracy:", float((pred == ds.labels).mean()))
