"""Experiment harness: flat config files, the training loop, evaluation,
attack sweeps, and weight-sensitivity scans.

A run is fully determined by an ExperimentConfig plus the package version:
one master seed fans out into four decoupled generator streams (weight
init, batch shuffling, augmentation, attack random starts), so consuming
one stream never shifts the others. Artifacts land in output_dir:
config.txt, metrics.csv (one row per epoch), rewire_log.csv (one row per
prunable slot per epoch), checkpoint_final.ckpt and checkpoint_best.ckpt
(best clean accuracy on the held-out subset). An empty output_dir writes
nothing, which keeps tests filesystem-free.
"""

import csv
import os
from dataclasses import dataclass, fields

import numpy as np

from . import autodiff as ad
from .attacks import AttackConfig, fgsm, pgd
from .data import DATASET_NAMES, Dataset, augment, batches, load_dataset
from .exceptions import ConfigError
from .layers import ARCH_NAMES, Model, build_model, save_checkpoint
from .optim import SGD, lr_at_epoch
from .rewiring import (HybridLossConfig, SparsityState, channels_present,
                       compression_ratio, epoch_rewire, hybrid_loss, init_masks)

_DTYPES = {"float32": np.float32, "float64": np.float64}
_BN_MODES = ("current", "train", "eval")

METRIC_COLUMNS = ("epoch", "train_loss", "clean_acc", "fgsm_acc", "pgd_acc",
                  "compression", "channels_present", "lr", "prune_rate")
REWIRE_COLUMNS = ("epoch", "slot", "share", "pruned", "regrown", "nonzeros")


class RngStreams:
    """Independent child generators fanned out from one master seed."""

    def __init__(self, seed: int):
        streams = np.random.SeedSequence(seed).spawn(4)
        self.init, self.shuffle, self.augment, self.attack = (
            np.random.default_rng(s) for s in streams)


@dataclass
class ExperimentConfig:
    """Everything that defines a run. Persists as flat `key = value` lines;
    eval_* attack fields of -1 inherit the train-attack value."""

    arch: str = "conv-tiny"
    dataset: str = "synth-digits"
    data_dir: str = ""
    train_samples: int = 8000
    test_samples: int = 2000
    data_seed: int = 0
    batch_size: int = 128
    epochs: int = 10
    seed: int = 0
    lr: float = 0.1
    lr_milestones: tuple = (80, 120, 160)
    lr_factor: float = 0.2
    momentum: float = 0.9
    weight_decay: float = 5e-4
    augment: bool = False
    sparsity_enabled: bool = True
    density: float = 0.1
    prune_type: str = "irregular"
    prune_rate: float = 0.5
    min_layer_floor: int = 1
    redistribution: str = "sum"
    random_init_mask: bool = False
    prune_linear: bool = False
    beta: float = 0.5
    rho: float = 1e-4
    warmup_epochs: int = 5
    train_epsilon: float = 8.0 / 255.0
    train_alpha: float = 0.01
    train_iterations: int = 7
    eval_epsilon: float = -1.0
    eval_alpha: float = -1.0
    eval_iterations: int = -1
    clip_min: float = 0.0
    clip_max: float = 1.0
    random_start: bool = False
    attack_bn_mode: str = "current"
    eval_samples: int = 1000
    dtype: str = "float32"
    output_dir: str = ""

    def __post_init__(self):
        if self.arch not in ARCH_NAMES:
            raise ConfigError(f"unknown arch {self.arch!r}; expected one of {ARCH_NAMES}")
        if self.dataset not in DATASET_NAMES:
            raise ConfigError(f"unknown dataset {self.dataset!r}; expected one of {DATASET_NAMES}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 2:
            # batch statistics need at least two samples
            raise ConfigError(f"batch_size must be >= 2, got {self.batch_size}")
        if not 0.0 < self.density <= 1.0:
            raise ConfigError(f"density must be in (0, 1], got {self.density}")
        if self.prune_type not in ("irregular", "channel"):
            raise ConfigError(f"prune_type must be irregular or channel, got {self.prune_type!r}")
        if not 0.0 <= self.prune_rate < 1.0:
            raise ConfigError(f"prune_rate must be in [0, 1), got {self.prune_rate}")
        if self.redistribution not in ("sum", "mean"):
            raise ConfigError(f"redistribution must be sum or mean, got {self.redistribution!r}")
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigError(f"beta must be in [0, 1], got {self.beta}")
        if self.rho < 0.0:
            raise ConfigError(f"rho must be >= 0, got {self.rho}")
        if self.warmup_epochs < 0:
            raise ConfigError(f"warmup_epochs must be >= 0, got {self.warmup_epochs}")
        if self.lr <= 0.0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.attack_bn_mode not in _BN_MODES:
            raise ConfigError(f"attack_bn_mode must be one of {_BN_MODES}, got {self.attack_bn_mode!r}")
        if self.dtype not in _DTYPES:
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        self.lr_milestones = tuple(int(m) for m in self.lr_milestones)

    def train_attack(self) -> AttackConfig:
        return AttackConfig(self.train_epsilon, self.train_alpha, self.train_iterations,
                            self.clip_min, self.clip_max, self.random_start)

    def eval_attack(self) -> AttackConfig:
        eps = self.train_epsilon if self.eval_epsilon < 0 else self.eval_epsilon
        alpha = self.train_alpha if self.eval_alpha < 0 else self.eval_alpha
        iters = self.train_iterations if self.eval_iterations < 0 else self.eval_iterations
        return AttackConfig(eps, alpha, iters, self.clip_min, self.clip_max, False)

    def to_file(self, path: str):
        with open(path, "w") as f:
            for fld in fields(self):
                val = getattr(self, fld.name)
                if isinstance(val, tuple):
                    val = ",".join(str(v) for v in val)
                elif isinstance(val, bool):
                    val = "true" if val else "false"
                f.write(f"{fld.name} = {val}\n")

    @classmethod
    def from_file(cls, path: str) -> "ExperimentConfig":
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        kwargs = {}
        known = {f.name: f for f in fields(cls)}
        with open(path) as f:
            for lineno, line in enumerate(f, 1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
                key, _, raw = line.partition("=")
                key, raw = key.strip(), raw.strip()
                if key not in known:
                    raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
                kwargs[key] = _parse_value(raw, getattr(cls, key), f"{path}:{lineno}: {key}")
        return cls(**kwargs)


def _parse_value(raw: str, default, where: str):
    try:
        if isinstance(default, bool):
            if raw not in ("true", "false"):
                raise ValueError(raw)
            return raw == "true"
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(v) for v in raw.split(",")) if raw else ()
        return raw
    except ValueError as exc:
        raise ConfigError(f"{where}: cannot parse {raw!r}") from exc


# ---------------------------------------------------------------------------
# evaluation

def _attacked(model: Model, x, y, cfg: AttackConfig, bn_mode: str = "current",
              rng=None) -> np.ndarray:
    """Craft adversarial inputs under the requested batchnorm mode, then
    restore the model's own mode."""
    saved = model.training
    if bn_mode == "train":
        model.train()
    elif bn_mode == "eval":
        model.eval()
    try:
        return pgd(model, x, y, cfg, rng=rng)
    finally:
        model.training = saved


def _clean_logits(model: Model, x: np.ndarray) -> np.ndarray:
    return model.forward(ad.constant(x), update_stats=False).value


def evaluate(model: Model, dataset: Dataset, attack: AttackConfig | None = None,
             batch_size: int = 256) -> dict:
    """Clean / FGSM / PGD accuracy over a dataset; attack=None skips attacks."""
    was_training = model.training
    model.eval()
    hits = np.zeros(3, dtype=np.int64)
    try:
        for x, y in batches(dataset, batch_size):
            hits[0] += int((_clean_logits(model, x).argmax(axis=1) == y).sum())
            if attack is not None and attack.epsilon > 0:
                x_f = fgsm(model, x, y, attack)
                hits[1] += int((_clean_logits(model, x_f).argmax(axis=1) == y).sum())
                x_p = pgd(model, x, y, attack)
                hits[2] += int((_clean_logits(model, x_p).argmax(axis=1) == y).sum())
    finally:
        model.training = was_training
    n = len(dataset)
    out = {"clean_acc": float(hits[0] / n)}
    if attack is not None and attack.epsilon > 0:
        out["fgsm_acc"] = float(hits[1] / n)
        out["pgd_acc"] = float(hits[2] / n)
    else:
        out["fgsm_acc"] = out["pgd_acc"] = out["clean_acc"]
    return out


def attack_sweep(model: Model, dataset: Dataset, epsilons, iterations_list,
                 alpha: float = 0.01, fixed_epsilon: float = 8.0 / 255.0,
                 fixed_iterations: int = 7, batch_size: int = 256) -> dict:
    """Accuracy under growing attack strength.

    Returns three curves: FGSM and PGD over the epsilon grid (PGD at
    fixed_iterations), and PGD over the iteration grid at fixed_epsilon.
    """
    rows = {"fgsm": [], "pgd_epsilon": [], "pgd_iterations": []}
    for eps in epsilons:
        if eps == 0:
            acc = evaluate(model, dataset, None, batch_size)["clean_acc"]
            rows["fgsm"].append((float(eps), acc))
            rows["pgd_epsilon"].append((float(eps), acc))
            continue
        cfg = AttackConfig(eps, min(alpha, 2 * eps), fixed_iterations)
        res = evaluate(model, dataset, cfg, batch_size)
        rows["fgsm"].append((float(eps), res["fgsm_acc"]))
        rows["pgd_epsilon"].append((float(eps), res["pgd_acc"]))
    for k in iterations_list:
        cfg = AttackConfig(fixed_epsilon, min(alpha, 2 * fixed_epsilon), int(k))
        res = evaluate(model, dataset, cfg, batch_size)
        rows["pgd_iterations"].append((int(k), res["pgd_acc"]))
    return rows


def sensitivity_scan(model: Model, dataset: Dataset, fractions=(0.1, 0.3, 0.5),
                     attack: AttackConfig | None = None, batch_size: int = 256) -> list:
    """Accuracy drop from pruning one slot at a time by the given fraction
    (smallest live magnitudes first) while every other slot stays untouched.

    Reports clean and PGD drops relative to the unpruned model; the slot is
    restored exactly after each measurement, so a fraction of 0 yields drops
    of exactly 0.0.
    """
    base = evaluate(model, dataset, attack, batch_size)
    rows = []
    for slot in model.prunable_slots():
        theta0, mask0 = slot.theta.copy(), slot.mask.copy()
        try:
            for frac in fractions:
                flat = np.abs(theta0.ravel())
                live = np.flatnonzero(mask0.ravel() > 0)
                cut = live[np.argsort(flat[live], kind="stable")[:int(round(frac * live.size))]]
                m = mask0.ravel().copy()
                m[cut] = 0.0
                slot.mask = m.reshape(mask0.shape)
                slot.theta = theta0 * slot.mask
                res = evaluate(model, dataset, attack, batch_size)
                rows.append({
                    "slot": slot.name, "fraction": float(frac),
                    "clean_acc": res["clean_acc"], "pgd_acc": res["pgd_acc"],
                    "clean_drop": base["clean_acc"] - res["clean_acc"],
                    "pgd_drop": base["pgd_acc"] - res["pgd_acc"],
                })
        finally:
            slot.theta, slot.mask = theta0, mask0
    return rows


# ---------------------------------------------------------------------------
# training

def run_training(cfg: ExperimentConfig, epoch_callback=None) -> dict:
    """Train one model end to end and return its artifacts in memory.

    epoch_callback(model, state, epoch, row) fires after each epoch's rewire
    and evaluation; the returned dict carries the model, sparsity state,
    metric rows, and rewire log rows.
    """
    rngs = RngStreams(cfg.seed)
    dtype = _DTYPES[cfg.dtype]
    train_ds = load_dataset(cfg.dataset, "train", cfg.data_dir, cfg.train_samples, cfg.data_seed)
    test_ds = load_dataset(cfg.dataset, "test", cfg.data_dir, cfg.test_samples, cfg.data_seed)
    eval_ds = test_ds.take(cfg.eval_samples) if cfg.eval_samples > 0 else test_ds

    model = build_model(cfg.arch, train_ds.images.shape[1:], train_ds.num_classes,
                        rngs.init, dtype=dtype, prune_linear=cfg.prune_linear)
    state = SparsityState(
        density=cfg.density if cfg.sparsity_enabled else 1.0,
        prune_type=cfg.prune_type, prune_rate=cfg.prune_rate,
        total_epochs=max(cfg.epochs, 1), min_layer_floor=cfg.min_layer_floor,
        redistribution=cfg.redistribution, random_init_mask=cfg.random_init_mask)
    init_masks(model, state, rng=rngs.init)
    loss_cfg = HybridLossConfig(beta=cfg.beta, rho=cfg.rho, warmup_epochs=cfg.warmup_epochs)
    opt = SGD(model, cfg.lr, cfg.momentum, cfg.weight_decay)
    train_atk, eval_atk = cfg.train_attack(), cfg.eval_attack()

    if cfg.output_dir:
        os.makedirs(cfg.output_dir, exist_ok=True)
        cfg.to_file(os.path.join(cfg.output_dir, "config.txt"))
    if train_ds.images.dtype != dtype:
        train_ds.images = train_ds.images.astype(dtype)
        eval_ds.images = eval_ds.images.astype(dtype)

    metrics, rewire_rows = [], []
    best_clean = -1.0
    for epoch in range(cfg.epochs):
        opt.lr = lr_at_epoch(cfg.lr, cfg.lr_milestones, cfg.lr_factor, epoch)
        warmup = epoch < cfg.warmup_epochs
        model.train()
        loss_sum, n_batches = 0.0, 0
        for x, y in batches(train_ds, cfg.batch_size, rngs.shuffle):
            if cfg.augment:
                x = augment(x, rngs.augment)
            x_adv = None
            if loss_cfg.beta < 1.0 and not warmup and train_atk.epsilon > 0:
                x_adv = _attacked(model, x, y, train_atk, cfg.attack_bn_mode, rngs.attack)
            leaves = model.make_leaves()
            loss = hybrid_loss(model, leaves, x, y, x_adv, loss_cfg, warmup=warmup)
            grads = ad.backward(loss)
            opt.step({name: grads[node] for name, node in leaves.items()})
            loss_sum += float(loss.value)
            n_batches += 1
        stats = epoch_rewire(model, state)
        scores = evaluate(model, eval_ds, eval_atk)
        row = {
            "epoch": epoch,
            "train_loss": loss_sum / max(n_batches, 1),
            "clean_acc": scores["clean_acc"],
            "fgsm_acc": scores["fgsm_acc"],
            "pgd_acc": scores["pgd_acc"],
            "compression": compression_ratio(model),
            "channels_present": channels_present(model),
            "lr": opt.lr,
            "prune_rate": stats["prune_rate"],
        }
        metrics.append(row)
        for name in stats["shares"]:
            rewire_rows.append({
                "epoch": epoch, "slot": name,
                "share": stats["shares"][name],
                "pruned": stats["pruned"].get(name, 0),
                "regrown": stats["regrown"].get(name, 0),
                "nonzeros": stats["nonzeros"].get(name, 0),
            })
        if row["clean_acc"] > best_clean:
            best_clean = row["clean_acc"]
            if cfg.output_dir:
                save_checkpoint(model, os.path.join(cfg.output_dir, "checkpoint_best.ckpt"))
        if epoch_callback is not None:
            epoch_callback(model, state, epoch, row)

    if cfg.output_dir:
        save_checkpoint(model, os.path.join(cfg.output_dir, "checkpoint_final.ckpt"))
        _write_csv(os.path.join(cfg.output_dir, "metrics.csv"), METRIC_COLUMNS, metrics)
        _write_csv(os.path.join(cfg.output_dir, "rewire_log.csv"), REWIRE_COLUMNS, rewire_rows)
    return {"model": model, "state": state, "metrics": metrics,
            "rewire_log": rewire_rows, "config": cfg}


def _write_csv(path: str, columns, rows):
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(columns))
        writer.writeheader()
        writer.writerows(rows)
