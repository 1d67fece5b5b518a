"""Momentum-guided sparse rewiring and the hybrid training loss.

A model is sparsified once at initialization to a global density d and then
keeps exactly round(d * total) nonzero weights for the whole run (in channel
mode: the nearest total reachable with whole channels). At the end of every
epoch a fraction p_i of the live weights is pruned by magnitude (channel
mode: whole input channels by Frobenius norm) and the freed budget is
regrown where the optimizer momentum says the network wants capacity, with
per-layer regrow counts apportioned by each layer's share of live momentum
mass. p_i decays linearly to zero over the run.

The training objective blends the clean cross-entropy, a proximal pull of
the masked weights toward their epoch-start snapshot, and the cross-entropy
on adversarial inputs:

    loss = beta * (ce_clean + rho/2 * sum_l ||theta_l*m_l - dup_l||^2)
         + (1 - beta) * ce_adv

beta = 1 drops the adversarial branch from the graph entirely; rho = 0
drops the pull term; warm-up epochs use the clean cross-entropy alone while
masks and rewiring stay active.
"""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .exceptions import ConfigError
from .layers import Model

__all__ = [
    "HybridLossConfig", "SparsityState", "init_masks", "update_duplicates",
    "regularizer", "hybrid_loss", "momentum_redistribution", "prune_irregular",
    "regrow_irregular", "channel_importance", "prune_channels", "regrow_channels",
    "epoch_rewire", "compression_ratio", "channels_present", "exact_channel_fill",
]


@dataclass
class HybridLossConfig:
    beta: float = 0.5
    rho: float = 1e-4
    warmup_epochs: int = 5

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigError(f"beta must be in [0, 1], got {self.beta}")
        if self.rho < 0:
            raise ConfigError(f"rho must be >= 0, got {self.rho}")
        if self.warmup_epochs < 0:
            raise ConfigError(f"warmup_epochs must be >= 0, got {self.warmup_epochs}")


@dataclass
class SparsityState:
    """Run-long sparsity bookkeeping for one model."""

    density: float
    prune_type: str = "irregular"
    prune_rate: float = 0.5
    total_epochs: int = 1
    min_layer_floor: int = 1
    redistribution: str = "sum"
    random_init_mask: bool = False
    current_prune_rate: float = field(init=False, default=0.0)
    target_nonzeros: int = field(init=False, default=0)
    epoch: int = field(init=False, default=0)
    history: list = field(init=False, default_factory=list)

    def __post_init__(self):
        if not 0.0 < self.density <= 1.0:
            raise ConfigError(f"density must be in (0, 1], got {self.density}")
        if self.prune_type not in ("irregular", "channel"):
            raise ConfigError(f"prune_type must be irregular|channel, got {self.prune_type!r}")
        if not 0.0 <= self.prune_rate < 1.0:
            raise ConfigError(f"prune_rate must be in [0, 1), got {self.prune_rate}")
        if self.total_epochs < 1:
            raise ConfigError(f"total_epochs must be >= 1, got {self.total_epochs}")
        if self.min_layer_floor < 1:
            raise ConfigError(f"min_layer_floor must be >= 1, got {self.min_layer_floor}")
        if self.redistribution not in ("sum", "mean"):
            raise ConfigError(f"redistribution must be sum|mean, got {self.redistribution!r}")
        self.current_prune_rate = self.prune_rate


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def _largest_remainder(quotas: np.ndarray, total: int) -> np.ndarray:
    """Integer apportionment of total by fractional quotas.

    Floors first, then hands the leftover units to the largest remainders,
    ties going to the lowest index. Zero quota mass falls back to uniform.
    """
    quotas = np.asarray(quotas, dtype=np.float64)
    if total == 0:
        return np.zeros(len(quotas), dtype=np.int64)
    s = quotas.sum()
    if s <= 0:
        quotas = np.ones_like(quotas)
        s = quotas.sum()
    shares = quotas * (total / s)
    base = np.floor(shares).astype(np.int64)
    leftover = int(total - base.sum())
    if leftover:
        rem = shares - base
        order = np.lexsort((np.arange(len(rem)), -rem))
        base[order[:leftover]] += 1
    return base


def momentum_redistribution(masses: np.ndarray, budget: int, capacities=None) -> np.ndarray:
    """Split an integer regrow budget across layers by momentum mass.

    masses are per-layer live momentum masses (any nonnegative weights);
    apportionment is largest-remainder with lowest-index tie-break. With
    capacities given, a layer's overflow is forwarded to the next-highest-
    mass layer that still has room.
    """
    masses = np.asarray(masses, dtype=np.float64)
    if (masses < 0).any():
        raise ValueError("momentum masses must be nonnegative")
    if budget < 0:
        raise ValueError(f"budget must be >= 0, got {budget}")
    alloc = _largest_remainder(masses, int(budget))
    if capacities is None:
        return alloc
    caps = np.asarray(capacities, dtype=np.int64)
    if caps.shape != alloc.shape or (caps < 0).any():
        raise ValueError("capacities must be nonnegative and match masses")
    if caps.sum() < budget:
        raise ValueError(f"total capacity {caps.sum()} < budget {budget}")
    order = np.lexsort((np.arange(len(masses)), -masses))
    excess = 0
    for i in order:
        if alloc[i] > caps[i]:
            excess += alloc[i] - caps[i]
            alloc[i] = caps[i]
    for i in order:
        if excess == 0:
            break
        room = caps[i] - alloc[i]
        take = min(room, excess)
        alloc[i] += take
        excess -= take
    return alloc


def exact_channel_fill(sizes, avail, target: int, prefs) -> np.ndarray:
    """Pick whole-channel counts per layer hitting a weight total exactly.

    sizes[l] is the weight cost of one channel of layer l, avail[l] the
    number of channels the layer can still accept, prefs[l] the desired
    weight allocation. Returns counts whose weighted sum is the reachable
    total closest to target (ties: the smaller total); within that, each
    layer's count stays as close as possible to its preference quota.
    """
    sizes = np.asarray(sizes, dtype=np.int64)
    avail = np.asarray(avail, dtype=np.int64)
    prefs = np.asarray(prefs, dtype=np.float64)
    n = len(sizes)
    if target < 0:
        raise ValueError("target must be >= 0")
    bound = int(target + (sizes.max() if n else 0) + 1)
    # prefix reachability: reach[l][s] == can layers 0..l-1 sum to s
    reach = [np.zeros(bound, dtype=bool) for _ in range(n + 1)]
    reach[0][0] = True
    for l in range(n):
        acc = reach[l].copy()
        step = int(sizes[l])
        shifted = reach[l]
        for _ in range(int(avail[l])):
            if step >= bound:
                break
            nxt = np.zeros(bound, dtype=bool)
            nxt[step:] = shifted[:bound - step]
            acc |= nxt
            shifted = nxt
            if not shifted.any():
                break
        reach[l + 1] = acc
    feasible = np.flatnonzero(reach[n])
    if len(feasible) == 0:
        raise ValueError("no feasible channel allocation")
    best = feasible[np.lexsort((feasible, np.abs(feasible - target)))[0]]
    # reconstruct, preferring counts near the preference quota per layer
    ps = prefs.sum()
    quotas = (prefs / ps * best / np.maximum(sizes, 1)) if ps > 0 else (np.full(n, best / n) / np.maximum(sizes, 1))
    counts = np.zeros(n, dtype=np.int64)
    remaining = int(best)
    for l in range(n - 1, -1, -1):
        cands = sorted(range(int(avail[l]) + 1), key=lambda c: (abs(c - quotas[l]), c))
        for c in cands:
            left = remaining - c * int(sizes[l])
            if 0 <= left < bound and reach[l][left]:
                counts[l] = c
                remaining = left
                break
        else:
            raise RuntimeError("channel fill reconstruction failed")
    if remaining != 0:
        raise RuntimeError("channel fill did not consume the target")
    return counts


# ---------------------------------------------------------------------------
# per-slot mask surgery

def prune_irregular(slot, count: int):
    """Mask out the count smallest-magnitude live weights (ties: lowest flat
    index). Weights go to exactly zero; velocity is kept so the position can
    still compete for regrowth."""
    if count == 0:
        return
    flat_mask = slot.mask.reshape(-1)
    live = np.flatnonzero(flat_mask)
    if count > len(live):
        raise ValueError(f"{slot.name}: cannot prune {count} of {len(live)} live weights")
    mags = np.abs(slot.theta.reshape(-1)[live])
    order = np.lexsort((live, mags))
    victims = live[order[:count]]
    flat_mask[victims] = 0.0
    slot.theta.reshape(-1)[victims] = 0.0


def regrow_irregular(slot, count: int) -> int:
    """Unmask the count masked positions with the largest |velocity| (ties:
    lowest flat index). Regrown weights start at zero with zero velocity.
    Returns the number actually grown (clamped to the masked population)."""
    if count == 0:
        return 0
    flat_mask = slot.mask.reshape(-1)
    dead = np.flatnonzero(flat_mask == 0)
    grown = min(count, len(dead))
    if grown == 0:
        return 0
    vel = np.abs(slot.momentum.reshape(-1)[dead])
    order = np.lexsort((dead, -vel))
    chosen = dead[order[:grown]]
    flat_mask[chosen] = 1.0
    slot.theta.reshape(-1)[chosen] = 0.0
    slot.momentum.reshape(-1)[chosen] = 0.0
    return grown


def channel_importance(slot) -> np.ndarray:
    """Squared Frobenius norm of the live weights feeding each input channel."""
    if slot.theta.ndim != 4:
        raise ValueError(f"{slot.name}: channel importance needs a conv weight")
    w = slot.theta * slot.mask
    return np.sum(np.square(w), axis=(0, 2, 3))


def _live_channels(slot) -> np.ndarray:
    m, c = slot.mask.shape[:2]
    return slot.mask.reshape(m, c, -1).any(axis=(0, 2))


def prune_channels(slot, count: int):
    """Mask out the count live input channels with the lowest squared
    Frobenius norm (ties: lowest channel index)."""
    if count == 0:
        return
    live = np.flatnonzero(_live_channels(slot))
    if count > len(live):
        raise ValueError(f"{slot.name}: cannot prune {count} of {len(live)} live channels")
    imp = channel_importance(slot)[live]
    order = np.lexsort((live, imp))
    victims = live[order[:count]]
    slot.mask[:, victims] = 0.0
    slot.theta[:, victims] = 0.0


def regrow_channels(slot, count: int) -> int:
    """Unmask the count dead channels with the largest momentum Frobenius
    norm (ties: lowest channel index); weights and velocity reset to zero."""
    if count == 0:
        return 0
    dead = np.flatnonzero(~_live_channels(slot))
    grown = min(count, len(dead))
    if grown == 0:
        return 0
    vel = np.sum(np.square(slot.momentum), axis=(0, 2, 3))[dead]
    order = np.lexsort((dead, -vel))
    chosen = dead[order[:grown]]
    slot.mask[:, chosen] = 1.0
    slot.theta[:, chosen] = 0.0
    slot.momentum[:, chosen] = 0.0
    return grown


# ---------------------------------------------------------------------------
# initialization

def init_masks(model: Model, state: SparsityState, rng: np.random.Generator | None = None):
    """Sparsify the model once to the run-long global cardinality target.

    Irregular mode keeps the largest-magnitude weights, with per-layer
    budgets apportioned from round(d * total) by largest remainder. Channel
    mode keeps whole input channels (highest Frobenius norm first) whose
    weight total is the reachable sum closest to round(d * total). With
    random_init_mask the kept positions/channels are drawn from rng instead.
    """
    slots = model.prunable_slots()
    if state.density >= 1.0:
        state.target_nonzeros = sum(s.size for s in slots)
        model.refresh_dups()
        return
    if not slots:
        raise ConfigError("no prunable slots: density < 1 requires conv layers or prune_linear")
    if state.random_init_mask and rng is None:
        raise ConfigError("random_init_mask requires an rng")
    total = sum(s.size for s in slots)
    target = _round_half_up(state.density * total)
    floor = state.min_layer_floor
    if state.prune_type == "irregular":
        sizes = np.array([s.size for s in slots], dtype=np.int64)
        counts = _largest_remainder(state.density * sizes, target)
        counts = np.minimum(counts, sizes)
        counts = _repair_floors(counts, np.minimum(floor, sizes), sizes, target)
        for slot, k in zip(slots, counts):
            flat = slot.theta.reshape(-1)
            if state.random_init_mask:
                keep = rng.permutation(slot.size)[: int(k)]
            else:
                order = np.lexsort((np.arange(slot.size), -np.abs(flat)))
                keep = order[: int(k)]
            slot.mask[...] = 0.0
            slot.mask.reshape(-1)[keep] = 1.0
    else:
        for slot in slots:
            if slot.theta.ndim != 4:
                raise ConfigError(f"{slot.name}: channel pruning requires conv slots only")
        chan_sizes = np.array([s.size // s.theta.shape[1] for s in slots], dtype=np.int64)
        nchan = np.array([s.theta.shape[1] for s in slots], dtype=np.int64)
        floors = np.minimum(floor, nchan)
        base_weights = int((floors * chan_sizes).sum())
        prefs = state.density * np.array([s.size for s in slots], dtype=np.float64)
        extra = exact_channel_fill(chan_sizes, nchan - floors, max(target - base_weights, 0), prefs)
        counts = floors + extra
        for slot, k in zip(slots, counts):
            n_ch = slot.theta.shape[1]
            if state.random_init_mask:
                keep = rng.permutation(n_ch)[: int(k)]
            else:
                imp = channel_importance_dense(slot)
                keep = np.lexsort((np.arange(n_ch), -imp))[: int(k)]
            slot.mask[...] = 0.0
            slot.mask[:, keep] = 1.0
    model.apply_masks()
    model.refresh_dups()
    # run-long target == what init realized: exactly round(d * total) in
    # irregular mode, the nearest whole-channel total in channel mode
    state.target_nonzeros = sum(s.nonzeros() for s in slots)


def channel_importance_dense(slot) -> np.ndarray:
    """Channel importance ignoring the mask (used before the first mask is set)."""
    return np.sum(np.square(slot.theta), axis=(0, 2, 3))


def _repair_floors(counts, floors, sizes, target) -> np.ndarray:
    """Raise below-floor layers to their floor, taking the difference from
    the layers with the most headroom (deterministic)."""
    counts = counts.astype(np.int64).copy()
    for i in range(len(counts)):
        while counts[i] < floors[i]:
            donors = np.flatnonzero(counts > floors)
            if len(donors) == 0:
                raise ConfigError("density too low to give every layer its floor")
            j = donors[np.argmax(counts[donors])]
            counts[j] -= 1
            counts[i] += 1
    if counts.sum() != target:
        raise ConfigError(f"floor repair broke the target: {counts.sum()} != {target}")
    return counts


def update_duplicates(model: Model):
    """Snapshot dup <- theta * mask on every prunable slot (epoch boundary)."""
    model.refresh_dups()


# ---------------------------------------------------------------------------
# loss graph

def regularizer(model: Model, leaves) -> ad.Node | None:
    """sum_l ||theta_l * m_l - dup_l||^2 over prunable slots, as a graph node."""
    total = None
    for slot in model.prunable_slots():
        masked = ad.mul(leaves[slot.name], ad.constant(slot.mask, op="mask"))
        diff = ad.sub(masked, ad.constant(slot.dup, op="dup"))
        term = ad.sum_all(ad.square(diff))
        total = term if total is None else ad.add(total, term)
    return total


def hybrid_loss(model: Model, leaves, x: np.ndarray, labels: np.ndarray,
                x_adv: np.ndarray | None, cfg: HybridLossConfig,
                warmup: bool = False) -> ad.Node:
    """Assemble the training objective for one batch.

    Warm-up returns the clean cross-entropy alone. Otherwise the clean term
    plus rho/2 * regularizer is blended with the adversarial cross-entropy
    by beta; beta = 1 never builds the adversarial branch and rho = 0 never
    builds the pull term, so reductions are visible in the graph itself.
    """
    logits = model.forward(ad.constant(x), leaves)
    clean = ad.softmax_cross_entropy(logits, labels)
    if warmup:
        return clean
    loss = clean
    if cfg.rho > 0:
        reg = regularizer(model, leaves)
        if reg is not None:
            loss = ad.add(loss, ad.scale(reg, 0.5 * cfg.rho))
    if cfg.beta < 1.0:
        if x_adv is None:
            raise ValueError("hybrid_loss: beta < 1 requires adversarial inputs")
        # running stats advance once per step, from the clean branch only
        adv_logits = model.forward(ad.constant(x_adv), leaves, update_stats=False)
        adv = ad.softmax_cross_entropy(adv_logits, labels)
        loss = ad.add(ad.scale(loss, cfg.beta), ad.scale(adv, 1.0 - cfg.beta))
    return loss


# ---------------------------------------------------------------------------
# epoch-end rewiring

def _momentum_masses(slots, mode: str) -> np.ndarray:
    masses = []
    for s in slots:
        live = s.mask > 0
        m = float(np.abs(s.momentum[live]).sum())
        if mode == "mean":
            m /= max(int(live.sum()), 1)
        masses.append(m)
    return np.asarray(masses, dtype=np.float64)


def epoch_rewire(model: Model, state: SparsityState) -> dict:
    """Prune by magnitude, regrow by momentum, refresh dup; exact global
    cardinality is asserted. Returns the per-layer log row for this epoch."""
    slots = model.prunable_slots()
    p = max(state.current_prune_rate, 0.0)
    stats = {
        "epoch": state.epoch,
        "prune_rate": p,
        "pruned": {},
        "regrown": {},
        "shares": {},
        "nonzeros": {},
    }
    if state.density >= 1.0 or not slots or p <= 0.0:
        _finish_epoch(model, state, slots, stats)
        return stats
    masses = _momentum_masses(slots, state.redistribution)
    total_mass = masses.sum()
    for s, m in zip(slots, masses):
        stats["shares"][s.name] = float(m / total_mass) if total_mass > 0 else 1.0 / len(slots)
    if state.prune_type == "irregular":
        _rewire_irregular(slots, state, p, masses, stats)
    else:
        _rewire_channel(slots, state, p, masses, stats)
    _finish_epoch(model, state, slots, stats)
    total = sum(s.nonzeros() for s in slots)
    if total != state.target_nonzeros:
        raise RuntimeError(f"cardinality drifted: {total} != target {state.target_nonzeros}")
    return stats


def _rewire_irregular(slots, state, p, masses, stats):
    live_counts = np.array([s.nonzeros() for s in slots], dtype=np.int64)
    total_live = int(live_counts.sum())
    budget = _round_half_up(p * total_live)
    floors = np.minimum(state.min_layer_floor, np.array([s.size for s in slots]))
    # global bottom-of-the-magnitude selection, honoring per-layer floors
    mags, layer_ids = [], []
    for li, s in enumerate(slots):
        flat = s.theta.reshape(-1)
        live = np.flatnonzero(s.mask.reshape(-1))
        mags.append(np.abs(flat[live]))
        layer_ids.append(np.full(len(live), li, dtype=np.int64))
    mags = np.concatenate(mags)
    layer_ids = np.concatenate(layer_ids)
    pos = np.concatenate([np.arange(c) for c in live_counts])
    order = np.lexsort((pos, layer_ids, mags))
    taken = np.zeros(len(slots), dtype=np.int64)
    chosen = 0
    for idx in order:
        if chosen == budget:
            break
        li = layer_ids[idx]
        if live_counts[li] - taken[li] > floors[li]:
            taken[li] += 1
            chosen += 1
    for s, c in zip(slots, taken):
        prune_irregular(s, int(c))
        stats["pruned"][s.name] = int(c)
    regrow_budget = int(taken.sum())
    caps = np.array([s.size - s.nonzeros() for s in slots], dtype=np.int64)
    alloc = momentum_redistribution(masses, regrow_budget, caps)
    for s, r in zip(slots, alloc):
        grown = regrow_irregular(s, int(r))
        stats["regrown"][s.name] = grown


def _rewire_channel(slots, state, p, masses, stats):
    live_ch = np.array([int(_live_channels(s).sum()) for s in slots], dtype=np.int64)
    chan_sizes = np.array([s.size // s.theta.shape[1] for s in slots], dtype=np.int64)
    floors = np.minimum(state.min_layer_floor, np.array([s.theta.shape[1] for s in slots]))
    budget_ch = _round_half_up(p * int(live_ch.sum()))
    caps = np.maximum(live_ch - floors, 0)
    budget_ch = min(budget_ch, int(caps.sum()))
    counts = momentum_redistribution(live_ch.astype(np.float64), budget_ch, caps)
    pooled = 0
    for s, c, size in zip(slots, counts, chan_sizes):
        prune_channels(s, int(c))
        stats["pruned"][s.name] = int(c)
        pooled += int(c) * int(size)
    avail = np.array([int((~_live_channels(s)).sum()) for s in slots], dtype=np.int64)
    prefs = masses if masses.sum() > 0 else np.ones(len(slots))
    regrow = exact_channel_fill(chan_sizes, avail, pooled, prefs)
    if int((regrow * chan_sizes).sum()) != pooled:
        raise RuntimeError("channel regrow budget mismatch")
    for s, r in zip(slots, regrow):
        grown = regrow_channels(s, int(r))
        stats["regrown"][s.name] = grown


def _finish_epoch(model, state, slots, stats):
    model.refresh_dups()
    for s in slots:
        stats["nonzeros"][s.name] = s.nonzeros()
    stats["total_nonzeros"] = sum(stats["nonzeros"].values())
    stats["compression"] = compression_ratio(model)
    stats["channels_present"] = channels_present(model)
    state.history.append(stats)
    state.epoch += 1
    state.current_prune_rate = max(0.0, state.current_prune_rate - state.prune_rate / state.total_epochs)


# ---------------------------------------------------------------------------
# reporting

def compression_ratio(model: Model) -> float:
    """Total prunable weights over live prunable weights (1.0 if dense)."""
    slots = model.prunable_slots()
    if not slots:
        return 1.0
    total = sum(s.size for s in slots)
    live = sum(s.nonzeros() for s in slots)
    if live == 0:
        raise ZeroDivisionError("model has zero live weights")
    return total / live


def channels_present(model: Model) -> float:
    """Fraction of conv input channels with at least one live weight."""
    total = live = 0
    for s in model.prunable_slots():
        if s.theta.ndim != 4:
            continue
        total += s.theta.shape[1]
        live += int(_live_channels(s).sum())
    return live / total if total else 1.0
