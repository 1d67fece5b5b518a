"""End-to-end acceptance gate.

One test per numbered criterion; each emits exactly one
"[criterion NN] <name>: PASS/FAIL (<detail>)" line. Failures collect into
that line instead of stopping at the first broken sub-assertion, so a red
run still reports every criterion's verdict. Training-based criteria run on
fixed seeds over deterministic synthetic data; the stated runtime limits are
asserted, not aspirational.
"""

import inspect
import math
import time

import numpy as np
import pytest

from rewirenet import autodiff as ad
from rewirenet.attacks import AttackConfig, fgsm, pgd
from rewirenet.data import batches, load_dataset
from rewirenet.harness import (ExperimentConfig, RngStreams, attack_sweep,
                               evaluate, run_training)
from rewirenet.layers import build_model, compact_channels, flop_count
from rewirenet.optim import SGD, lr_at_epoch
from rewirenet.rewiring import (HybridLossConfig, SparsityState,
                                channels_present, epoch_rewire, hybrid_loss,
                                init_masks, momentum_redistribution)

from conftest import apportion_reference, fd_gradient, rel_err
from test_rewiring import _hand_fixture

RTOL, H = 1e-4, 1e-5


def _verdict(num, name, problems, detail=""):
    ok = not problems
    tail = detail if ok else "; ".join(problems[:3])
    print(f"[criterion {num:02d}] {name}: {'PASS' if ok else 'FAIL'}"
          + (f" ({tail})" if tail else ""))
    assert ok, f"criterion {num:02d} {name}: {problems[:5]}"


# ---------------------------------------------------------------------------
# criterion 1: every differentiable op and the full training loss agree with
# central finite differences (64-bit, h = 1e-5) within 1e-4 relative error on
# >= 20 random instances per op


def _fd_op(build, x0, problems, tag):
    """build(x: Node) -> scalar Node; compare reverse-mode grad with fd."""
    x0 = np.asarray(x0, dtype=np.float64)
    x = ad.leaf(x0)
    got = ad.backward(build(x))[x]

    def f(v):
        return float(build(ad.constant(np.asarray(v, dtype=np.float64))).value)

    err = rel_err(got, fd_gradient(f, x0, h=H))
    if err > RTOL:
        problems.append(f"{tag}: rel err {err:.2e}")
    return err


def _wsum(rng, shape):
    """Fixed random weighting that reduces an op output to a scalar loss."""
    w = rng.standard_normal(shape)
    return lambda n: ad.sum_all(ad.mul(n, ad.constant(w)))


def _nudge(a, gap=0.08):
    """Move entries away from zero so relu kinks sit outside the fd step."""
    a = a.copy()
    small = np.abs(a) < gap
    a[small] += np.sign(a[small] + 0.5) * 2 * gap
    return a


def _check_add(rng, p):
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
    s = _wsum(rng, (3, 4))
    _fd_op(lambda x: s(ad.add(x, ad.constant(b))), a, p, "add/lhs")
    _fd_op(lambda x: s(ad.add(ad.constant(b), x)), a, p, "add/rhs")


def _check_sub(rng, p):
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
    s = _wsum(rng, (3, 4))
    _fd_op(lambda x: s(ad.sub(x, ad.constant(b))), a, p, "sub/lhs")
    _fd_op(lambda x: s(ad.sub(ad.constant(b), x)), a, p, "sub/rhs")


def _check_mul(rng, p):
    a, b = rng.standard_normal((2, 5)), rng.standard_normal((2, 5))
    s = _wsum(rng, (2, 5))
    _fd_op(lambda x: s(ad.mul(x, ad.constant(b))), a, p, "mul/lhs")
    _fd_op(lambda x: s(ad.mul(ad.constant(b), x)), a, p, "mul/rhs")


def _check_scale(rng, p):
    a = rng.standard_normal((3, 3))
    c = float(rng.uniform(0.3, 2.5))
    s = _wsum(rng, (3, 3))
    _fd_op(lambda x: s(ad.scale(x, c)), a, p, "scale")


def _check_square(rng, p):
    a = rng.standard_normal((4, 3))
    s = _wsum(rng, (4, 3))
    _fd_op(lambda x: s(ad.square(x)), a, p, "square")


def _check_relu(rng, p):
    a = _nudge(rng.standard_normal((3, 6)))
    s = _wsum(rng, (3, 6))
    _fd_op(lambda x: s(ad.relu(x)), a, p, "relu")


def _check_reshape(rng, p):
    a = rng.standard_normal((2, 6))
    s = _wsum(rng, (3, 4))
    _fd_op(lambda x: s(ad.reshape(x, (3, 4))), a, p, "reshape")


def _check_flatten(rng, p):
    a = rng.standard_normal((2, 3, 2, 2))
    s = _wsum(rng, (2, 12))
    _fd_op(lambda x: s(ad.flatten(x)), a, p, "flatten")


def _check_matmul(rng, p):
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 5))
    s = _wsum(rng, (3, 5))
    _fd_op(lambda x: s(ad.matmul(x, ad.constant(b))), a, p, "matmul/lhs")
    _fd_op(lambda x: s(ad.matmul(ad.constant(a), x)), b, p, "matmul/rhs")


def _check_add_bias(rng, p):
    a, b = rng.standard_normal((4, 5)), rng.standard_normal(5)
    s = _wsum(rng, (4, 5))
    _fd_op(lambda x: s(ad.add_bias(x, ad.constant(b))), a, p, "add_bias/x")
    _fd_op(lambda x: s(ad.add_bias(ad.constant(a), x)), b, p, "add_bias/b")


def _check_conv2d(rng, p):
    stride = int(rng.integers(1, 3))
    padding = int(rng.integers(0, 2))
    x = rng.standard_normal((2, 2, 5, 5))
    w = rng.standard_normal((3, 2, 3, 3))
    oh = (5 + 2 * padding - 3) // stride + 1
    s = _wsum(rng, (2, 3, oh, oh))
    _fd_op(lambda v: s(ad.conv2d(v, ad.constant(w), stride, padding)), x, p, "conv2d/x")
    _fd_op(lambda v: s(ad.conv2d(ad.constant(x), v, stride, padding)), w, p, "conv2d/w")


def _check_maxpool2x2(rng, p):
    # distinct entries keep the argmax stable across the fd step
    x = rng.permutation(2 * 2 * 4 * 4).reshape(2, 2, 4, 4) * 0.37 \
        + rng.standard_normal((2, 2, 4, 4)) * 1e-3
    s = _wsum(rng, (2, 2, 2, 2))
    _fd_op(lambda v: s(ad.maxpool2x2(v)), x, p, "maxpool2x2")


def _check_mean_spatial(rng, p):
    x = rng.standard_normal((2, 3, 4, 4))
    s = _wsum(rng, (2, 3))
    _fd_op(lambda v: s(ad.mean_spatial(v)), x, p, "mean_spatial")


def _check_sum_all(rng, p):
    x = rng.standard_normal((3, 4))
    _fd_op(lambda v: ad.sum_all(ad.square(v)), x, p, "sum_all")


def _check_batchnorm_train(rng, p):
    x = rng.standard_normal((4, 3, 2, 2)) * 1.5
    gamma = rng.uniform(0.5, 1.5, 3)
    beta = rng.standard_normal(3)
    s = _wsum(rng, (4, 3, 2, 2))

    def wrt_x(v):
        return s(ad.batchnorm_train(v, ad.constant(gamma), ad.constant(beta))[0])

    def wrt_gamma(v):
        return s(ad.batchnorm_train(ad.constant(x), v, ad.constant(beta))[0])

    def wrt_beta(v):
        return s(ad.batchnorm_train(ad.constant(x), ad.constant(gamma), v)[0])

    _fd_op(wrt_x, x, p, "batchnorm_train/x")
    _fd_op(wrt_gamma, gamma, p, "batchnorm_train/gamma")
    _fd_op(wrt_beta, beta, p, "batchnorm_train/beta")


def _check_batchnorm_eval(rng, p):
    x = rng.standard_normal((3, 3, 2, 2))
    gamma = rng.uniform(0.5, 1.5, 3)
    beta = rng.standard_normal(3)
    rm = rng.standard_normal(3) * 0.3
    rv = rng.uniform(0.5, 2.0, 3)
    s = _wsum(rng, (3, 3, 2, 2))
    _fd_op(lambda v: s(ad.batchnorm_eval(v, ad.constant(gamma), ad.constant(beta), rm, rv)),
           x, p, "batchnorm_eval/x")
    _fd_op(lambda v: s(ad.batchnorm_eval(ad.constant(x), v, ad.constant(beta), rm, rv)),
           gamma, p, "batchnorm_eval/gamma")


def _check_softmax_cross_entropy(rng, p):
    z = rng.standard_normal((4, 6)) * 2
    y = rng.integers(0, 6, size=4)
    _fd_op(lambda v: ad.softmax_cross_entropy(v, y), z, p, "softmax_cross_entropy")


_OP_CHECKS = {
    "add": _check_add, "sub": _check_sub, "mul": _check_mul,
    "scale": _check_scale, "square": _check_square, "relu": _check_relu,
    "reshape": _check_reshape, "flatten": _check_flatten,
    "matmul": _check_matmul, "add_bias": _check_add_bias,
    "conv2d": _check_conv2d, "maxpool2x2": _check_maxpool2x2,
    "mean_spatial": _check_mean_spatial, "sum_all": _check_sum_all,
    "batchnorm_train": _check_batchnorm_train,
    "batchnorm_eval": _check_batchnorm_eval,
    "softmax_cross_entropy": _check_softmax_cross_entropy,
}

_GRAPH_UTILS = {"leaf", "constant", "topo_order", "backward",
                "grad_wrt_input", "gradcheck"}


def _module_ops():
    """All public graph-building functions of the autodiff module."""
    return {name for name, obj in vars(ad).items()
            if inspect.isfunction(obj) and not name.startswith("_")
            and name not in _GRAPH_UTILS}


def _check_full_hybrid_loss(problems):
    """Coordinate-sampled fd on the assembled training objective: sparse
    conv net with batchnorm, clean + adversarial branches, drift
    regularizer."""
    rng = np.random.default_rng(77)
    model = build_model("vgg-mini", (1, 8, 8), 10, rng, dtype=np.float64)
    state = SparsityState(density=0.25, prune_type="irregular",
                          prune_rate=0.5, total_epochs=5)
    init_masks(model, state)
    x = rng.uniform(0.0, 1.0, (3, 1, 8, 8))
    x_adv = np.clip(x + rng.uniform(-0.08, 0.08, x.shape), 0.0, 1.0)
    y = rng.integers(0, 10, size=3)
    cfg = HybridLossConfig(beta=0.5, rho=1e-4, warmup_epochs=0)
    model.train()

    def build():
        leaves = model.make_leaves()
        return hybrid_loss(model, leaves, x, y, x_adv, cfg), leaves

    loss, leaves = build()
    grads = ad.backward(loss)
    by_name = {name: grads[node] for name, node in leaves.items()}

    checked = 0
    for name, slot in model.slots.items():
        flat = slot.theta.reshape(-1)
        live = (np.flatnonzero(slot.mask.reshape(-1) > 0)
                if slot.prunable else np.arange(flat.size))
        for c in rng.choice(live, size=min(2, live.size), replace=False):
            orig = flat[c]
            flat[c] = orig + H
            hi = float(build()[0].value)
            flat[c] = orig - H
            lo = float(build()[0].value)
            flat[c] = orig
            want = (hi - lo) / (2 * H)
            got = float(by_name[name].reshape(-1)[c])
            err = abs(got - want) / max(abs(got), abs(want), 1e-8)
            if err > RTOL:
                problems.append(f"hybrid loss {name}[{c}]: rel err {err:.2e}")
            checked += 1
    if checked < 20:
        problems.append(f"hybrid loss: only {checked} coordinates sampled")


def test_criterion_01_gradient_correctness():
    t0 = time.monotonic()
    problems = []
    missing = _module_ops() - set(_OP_CHECKS)
    if missing:
        problems.append(f"ops without fd coverage: {sorted(missing)}")
    for idx, name in enumerate(sorted(_OP_CHECKS)):
        before = len(problems)
        for i in range(20):
            _OP_CHECKS[name](np.random.default_rng([idx, i]), problems)
            if len(problems) > before:
                break
    _check_full_hybrid_loss(problems)
    elapsed = time.monotonic() - t0
    if elapsed >= 120:
        problems.append(f"over time budget: {elapsed:.1f}s")
    _verdict(1, "gradient-correctness", problems,
             f"{len(_OP_CHECKS)} ops x 20 instances + full loss, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# criterion 2: global nonzero count equals round(d * total) exactly after
# every epoch-end rewire, 30 epochs, three densities, both prune modes


def test_criterion_02_cardinality_conservation():
    t0 = time.monotonic()
    problems = []
    for mode in ("irregular", "channel"):
        for d in (0.05, 0.1, 0.5):
            seen = []

            def cb(model, state, epoch, row, mode=mode, d=d, seen=seen):
                live = sum(s.nonzeros() for s in model.prunable_slots())
                total = sum(s.size for s in model.prunable_slots())
                expect = int(math.floor(d * total + 0.5))
                seen.append(epoch)
                if live != expect:
                    problems.append(f"{mode} d={d} epoch {epoch}: {live} != {expect}")

            run_training(ExperimentConfig(
                arch="conv-tiny", dataset="synth-blobs", train_samples=256,
                test_samples=64, eval_samples=32, batch_size=32, epochs=30,
                beta=1.0, rho=1e-4, warmup_epochs=0, density=d,
                prune_type=mode, seed=11, eval_epsilon=0.0), epoch_callback=cb)
            if len(seen) != 30:
                problems.append(f"{mode} d={d}: {len(seen)} epochs observed")
    elapsed = time.monotonic() - t0
    if elapsed >= 600:
        problems.append(f"over time budget: {elapsed:.1f}s")
    _verdict(2, "cardinality-conservation", problems,
             f"2 modes x 3 densities x 30 epochs, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# criterion 3: 10,000 fuzzed attack outputs stay inside the epsilon ball and
# [0, 1]; single-step pgd with alpha >= epsilon is bitwise fgsm


def test_criterion_03_attack_contracts():
    t0 = time.monotonic()
    problems = []
    rng = np.random.default_rng(303)
    model = build_model("conv-tiny", (1, 8, 8), 10, np.random.default_rng(5))
    model.eval()

    outputs = 0
    for _ in range(100):
        eps = float(rng.uniform(0.001, 0.3))
        alpha = min(float(rng.uniform(0.2, 2.0)) * eps, 2 * eps)
        k = int(rng.integers(1, 6))
        x = rng.uniform(0.0, 1.0, (50, 1, 8, 8)).astype(np.float32)
        y = rng.integers(0, 10, size=50)
        cfg = AttackConfig(eps, alpha, k)
        for tag, adv in (("fgsm", fgsm(model, x, y, cfg)),
                         ("pgd", pgd(model, x, y, cfg))):
            gap = float(np.max(np.abs(adv.astype(np.float64) - x)))
            if gap > eps + 1e-7:
                problems.append(f"{tag}: linf {gap:.8f} > eps {eps:.8f}")
            if float(adv.min()) < 0.0 or float(adv.max()) > 1.0:
                problems.append(f"{tag}: output outside [0, 1]")
            outputs += adv.shape[0]
        if problems:
            break
    if outputs < 10000 and not problems:
        problems.append(f"only {outputs} outputs fuzzed")

    for i in range(20):
        eps = float(rng.uniform(0.01, 0.3))
        cfg = AttackConfig(eps, eps * float(rng.uniform(1.0, 2.0)), 1)
        x = rng.uniform(0.0, 1.0, (20, 1, 8, 8)).astype(np.float32)
        y = rng.integers(0, 10, size=20)
        if not np.array_equal(fgsm(model, x, y, cfg), pgd(model, x, y, cfg)):
            problems.append(f"pgd(k=1, alpha>=eps) != fgsm bitwise (trial {i})")
            break
    elapsed = time.monotonic() - t0
    if elapsed >= 120:
        problems.append(f"over time budget: {elapsed:.1f}s")
    _verdict(3, "attack-contracts", problems,
             f"{outputs} fuzzed outputs + 20 bitwise identities, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# criterion 4: reduction identities


def test_criterion_04_reduction_identities():
    problems = []

    # (a) full engine at density 1, beta 1, rho 0 is bit-identical to an
    # independent plain training loop with no sparsity machinery at all
    # (vgg-mini, so running batchnorm statistics are part of the identity)
    cfg = ExperimentConfig(arch="vgg-mini", dataset="synth-blobs",
                           train_samples=128, test_samples=32, eval_samples=32,
                           batch_size=16, epochs=3, density=1.0, beta=1.0,
                           rho=0.0, warmup_epochs=0, seed=42, eval_epsilon=0.0)
    engine = run_training(cfg)["model"]

    rngs = RngStreams(cfg.seed)
    train_ds = load_dataset("synth-blobs", "train", num_samples=128, seed=0)
    base = build_model("vgg-mini", train_ds.images.shape[1:],
                       train_ds.num_classes, rngs.init)
    opt = SGD(base, cfg.lr, cfg.momentum, cfg.weight_decay)
    for epoch in range(cfg.epochs):
        opt.lr = lr_at_epoch(cfg.lr, cfg.lr_milestones, cfg.lr_factor, epoch)
        base.train()
        for x, y in batches(train_ds, cfg.batch_size, rngs.shuffle):
            leaves = base.make_leaves()
            loss = ad.softmax_cross_entropy(base.forward(ad.constant(x), leaves), y)
            grads = ad.backward(loss)
            opt.step({n: grads[node] for n, node in leaves.items()})
    for name, slot in engine.slots.items():
        if not np.array_equal(slot.theta, base.slots[name].theta):
            problems.append(f"(a) theta differs: {name}")
        if not np.array_equal(slot.momentum, base.slots[name].momentum):
            problems.append(f"(a) momentum differs: {name}")
    for ours, theirs in zip(engine.bn_layers(), base.bn_layers()):
        if not (np.array_equal(ours.running_mean, theirs.running_mean)
                and np.array_equal(ours.running_var, theirs.running_var)):
            problems.append(f"(a) batchnorm stats differ: {ours.name}")

    # (b) beta = 1 drops the adversarial branch from the loss graph itself
    m = build_model("conv-tiny", (1, 8, 8), 10, np.random.default_rng(1))
    init_masks(m, SparsityState(density=0.25, prune_type="irregular",
                                prune_rate=0.5, total_epochs=5))
    gen = np.random.default_rng(2)
    x = gen.uniform(0.0, 1.0, (4, 1, 8, 8)).astype(np.float32)
    y = gen.integers(0, 10, size=4)
    m.train()
    clean_only = hybrid_loss(m, m.make_leaves(), x, y, None,
                             HybridLossConfig(beta=1.0, rho=1e-4, warmup_epochs=0))
    ops = [n.op for n in ad.topo_order(clean_only)]
    if ops.count("softmax_cross_entropy") != 1:
        problems.append(f"(b) beta=1 graph has {ops.count('softmax_cross_entropy')} ce nodes")
    if "dup" not in ops:
        problems.append("(b) rho>0 graph lacks the drift regularizer")
    x_adv = np.clip(x + 0.05, 0.0, 1.0)
    both = hybrid_loss(m, m.make_leaves(), x, y, x_adv,
                       HybridLossConfig(beta=0.5, rho=1e-4, warmup_epochs=0))
    if [n.op for n in ad.topo_order(both)].count("softmax_cross_entropy") != 2:
        problems.append("(b) control graph at beta=0.5 lacks two ce nodes")

    # (c) the drift regularizer is exactly zero at every epoch start
    def reg_value(model):
        return sum(float(np.sum((s.theta * s.mask - s.dup) ** 2))
                   for s in model.prunable_slots())

    fresh = run_training(ExperimentConfig(
        arch="conv-tiny", dataset="synth-blobs", train_samples=64,
        test_samples=32, eval_samples=32, batch_size=16, epochs=0,
        density=0.25, beta=1.0, rho=1e-4, warmup_epochs=0, seed=5,
        eval_epsilon=0.0))["model"]
    if reg_value(fresh) != 0.0:
        problems.append("(c) regularizer nonzero after mask init")

    nonzero_at = []

    def cb(model, state, epoch, row):
        if reg_value(model) != 0.0:
            nonzero_at.append(epoch)

    run_training(ExperimentConfig(
        arch="conv-tiny", dataset="synth-blobs", train_samples=64,
        test_samples=32, eval_samples=32, batch_size=16, epochs=4,
        density=0.25, beta=1.0, rho=1e-4, warmup_epochs=0, seed=5,
        eval_epsilon=0.0), epoch_callback=cb)
    if nonzero_at:
        problems.append(f"(c) regularizer nonzero entering epochs {nonzero_at}")

    _verdict(4, "reduction-identities", problems,
             "dense bit-identity, graph inspection, zero drift at epoch starts")


# ---------------------------------------------------------------------------
# criterion 5: physically removing dead channels preserves logits within
# 1e-6 and cuts measured dense-forward flops in proportion


def test_criterion_05_channel_compaction():
    problems = []
    res = run_training(ExperimentConfig(
        arch="conv-tiny", dataset="synth-digits", train_samples=2000,
        test_samples=1000, eval_samples=128, batch_size=128, epochs=6,
        lr_milestones=(4,), density=0.1, prune_type="channel", beta=1.0,
        rho=1e-4, warmup_epochs=2, seed=3, eval_epsilon=0.0, dtype="float64"))
    model = res["model"]
    model.eval()
    compact = compact_channels(model)
    compact.eval()

    xs = load_dataset("synth-digits", "test", num_samples=1000).images.astype(np.float64)
    worst = 0.0
    for i in range(0, 1000, 200):
        a = model.forward(ad.constant(xs[i:i + 200]), update_stats=False).value
        b = compact.forward(ad.constant(xs[i:i + 200]), update_stats=False).value
        worst = max(worst, float(np.max(np.abs(a - b))))
    if worst > 1e-6:
        problems.append(f"masked vs compacted logits differ by {worst:.3e} on 1000 inputs")

    # flops drop in proportion to the surviving channels: conv2 keeps k2 of
    # its 39 input channels, so conv1 keeps k2 of its 39 filters
    mask2 = model.slots["conv2.w"].mask
    k2 = int((mask2.reshape(39, 39, -1).sum(axis=(0, 2)) > 0).sum())
    expected = 2 * k2 * 1 * 9 * 784 + 2 * 39 * k2 * 9 * 196 + 2 * 1911 * 10
    got = flop_count(compact)
    dense = flop_count(model)
    if got != expected:
        problems.append(f"compacted flops {got} != per-channel expectation {expected}")
    if compact.slots["conv1.w"].theta.shape[0] != k2:
        problems.append("conv1 filters not sliced to the surviving channels")
    frac = channels_present(model)
    _verdict(5, "channel-compaction", problems,
             f"max logit diff {worst:.2e}, flops {dense} -> {got} "
             f"at channels-present {frac:.3f}")


# ---------------------------------------------------------------------------
# criterion 6: at 10x compression the clean-loss sparse run lands within 3
# percentage points of an identically budgeted dense baseline


_C6 = dict(arch="conv-tiny", dataset="synth-digits", train_samples=8000,
           test_samples=2000, eval_samples=256, batch_size=128, epochs=15,
           lr_milestones=(8, 12), beta=1.0, warmup_epochs=5, seed=0,
           eval_epsilon=0.0)


def test_criterion_06_desk_scale_clean_learning():
    t0 = time.monotonic()
    problems = []
    dense = run_training(ExperimentConfig(**_C6, sparsity_enabled=False, rho=0.0))
    sparse = run_training(ExperimentConfig(**_C6, density=0.1, rho=1e-4))
    test_full = load_dataset("synth-digits", "test", num_samples=2000)
    dense_acc = evaluate(dense["model"], test_full)["clean_acc"]
    sparse_acc = evaluate(sparse["model"], test_full)["clean_acc"]
    compression = sparse["metrics"][-1]["compression"]
    if sparse_acc < dense_acc - 0.03:
        problems.append(f"sparse {sparse_acc:.4f} more than 3pp below dense {dense_acc:.4f}")
    if abs(compression - 10.0) > 0.05:
        problems.append(f"compression {compression:.2f}x, wanted 10x")
    elapsed = time.monotonic() - t0
    if elapsed >= 1800:
        problems.append(f"over time budget: {elapsed:.1f}s")
    _verdict(6, "desk-scale-clean-learning", problems,
             f"dense {dense_acc:.4f}, sparse {sparse_acc:.4f} at "
             f"{compression:.1f}x, {elapsed:.0f}s")


# ---------------------------------------------------------------------------
# criteria 7 and 8 share one set of trained models


_C7 = dict(arch="conv-tiny", dataset="synth-digits", train_samples=2000,
           test_samples=1000, eval_samples=128, batch_size=128, epochs=10,
           lr_milestones=(6, 8), warmup_epochs=2, density=0.1,
           train_epsilon=0.1, train_alpha=0.025, train_iterations=7,
           eval_epsilon=0.0)
_C7_VARIANTS = {"hybrid": (0.5, 1e-4), "clean": (1.0, 1e-4), "no-reg": (0.5, 0.0)}
_C7_ATTACK = AttackConfig(0.1, 0.025, 7)


@pytest.fixture(scope="module")
def robustness_runs():
    test_ds = load_dataset("synth-digits", "test", num_samples=1000).take(512)
    out = {}
    for seed in (0, 1, 2):
        for tag, (beta, rho) in _C7_VARIANTS.items():
            res = run_training(ExperimentConfig(**_C7, seed=seed, beta=beta, rho=rho))
            scores = evaluate(res["model"], test_ds, _C7_ATTACK)
            out[(tag, seed)] = {"pgd": scores["pgd_acc"],
                                "clean": scores["clean_acc"],
                                "model": res["model"]}
    return out


def test_criterion_07_robustness_ordering(robustness_runs):
    problems = []
    for seed in (0, 1, 2):
        hybrid = robustness_runs[("hybrid", seed)]["pgd"]
        clean = robustness_runs[("clean", seed)]["pgd"]
        if not hybrid > clean:
            problems.append(f"seed {seed}: hybrid pgd {hybrid:.4f} <= clean-trained {clean:.4f}")
    # dropping the drift regularizer must not help robustness (quarter-point
    # band counts as a tie) on at least 2 of 3 seeds
    holds = sum(robustness_runs[("no-reg", s)]["pgd"]
                <= robustness_runs[("hybrid", s)]["pgd"] + 0.0025
                for s in (0, 1, 2))
    if holds < 2:
        problems.append(f"rho ablation ordering holds on {holds}/3 seeds")
    spread = ", ".join(
        f"s{s}: {robustness_runs[('hybrid', s)]['pgd']:.3f}/"
        f"{robustness_runs[('clean', s)]['pgd']:.3f}/"
        f"{robustness_runs[('no-reg', s)]['pgd']:.3f}" for s in (0, 1, 2))
    _verdict(7, "robustness-ordering", problems,
             f"pgd acc hybrid/clean-trained/no-reg per seed: {spread}")


def test_criterion_08_sweep_monotonicity(robustness_runs):
    problems = []
    model = robustness_runs[("hybrid", 0)]["model"]
    test_ds = load_dataset("synth-digits", "test", num_samples=1000).take(512)
    sweep = attack_sweep(model, test_ds,
                         epsilons=[0.0, 0.02, 0.05, 0.08, 0.1, 0.15],
                         iterations_list=list(range(1, 21)), alpha=0.025,
                         fixed_epsilon=0.1, fixed_iterations=7)
    tol = 0.01
    for key in ("fgsm", "pgd_epsilon", "pgd_iterations"):
        accs = [acc for _, acc in sweep[key]]
        floor_so_far = accs[0]
        for (knob, acc) in sweep[key][1:]:
            if acc > floor_so_far + tol:
                problems.append(f"{key} rises above running floor at {knob}: "
                                f"{acc:.4f} > {floor_so_far:.4f} + 1pp")
            floor_so_far = min(floor_so_far, acc)
    ends = {k: (sweep[k][0][1], sweep[k][-1][1]) for k in sweep}
    _verdict(8, "sweep-monotonicity", problems,
             "first->last: " + ", ".join(f"{k} {a:.3f}->{b:.3f}"
                                         for k, (a, b) in ends.items()))


# ---------------------------------------------------------------------------
# criterion 9: the regrow apportionment matches an independent
# largest-remainder implementation exactly


def test_criterion_09_redistribution_oracle():
    problems = []
    rng = np.random.default_rng(909)
    for i in range(1000):
        n = int(rng.integers(1, 11))
        masses = rng.uniform(0.0, 10.0, n)
        masses[rng.random(n) < 0.2] = 0.0
        budget = int(rng.integers(0, 60))
        got = momentum_redistribution(masses, budget)
        if masses.sum() > 0:
            want = apportion_reference(masses / masses.sum() * budget, budget)
        else:
            want = apportion_reference(np.full(n, budget / n), budget)
        if not np.array_equal(got, want):
            problems.append(f"instance {i}: {got.tolist()} != {want}")
            break
    _verdict(9, "redistribution-oracle", problems, "1000 fuzzed instances exact")


# ---------------------------------------------------------------------------
# criterion 10: one full rewire on the fixed 3-layer toy reproduces the
# hand-traced outcome (the arithmetic walk lives in test_rewiring)


def test_criterion_10_hand_trace_fixture():
    problems = []
    model, state, (la, lb, lc) = _hand_fixture()
    stats = epoch_rewire(model, state)
    if stats["pruned"] != {"la.w": 2, "lb.w": 4, "lc.w": 1}:
        problems.append(f"pruned {stats['pruned']}")
    if stats["regrown"] != {"la.w": 4, "lb.w": 2, "lc.w": 1}:
        problems.append(f"regrown {stats['regrown']}")
    if stats["shares"] != {"la.w": 0.5, "lb.w": 2.5 / 7.0, "lc.w": 1.0 / 7.0}:
        problems.append(f"shares {stats['shares']}")
    expected_masks = {
        "la.w": [1, 1, 1, 0, 1, 1, 0, 1],
        "lb.w": [1, 0, 0, 0, 1, 1, 1, 1, 1, 0, 0, 0, 0, 0, 0, 0],
        "lc.w": [1, 0, 0, 1],
    }
    for slot in (la, lb, lc):
        if not np.array_equal(slot.mask.reshape(-1), expected_masks[slot.name]):
            problems.append(f"{slot.name} mask {slot.mask.reshape(-1).astype(int).tolist()}")
    if sum(s.nonzeros() for s in (la, lb, lc)) != 14:
        problems.append("cardinality not conserved")
    _verdict(10, "hand-trace-fixture", problems,
             "3-layer rewire matches the worked trace")
