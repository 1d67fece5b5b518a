"""L-infinity adversarial example generation: FGSM and PGD.

Both attacks are pure with respect to the model: weights, masks, optimizer
state, and batchnorm running statistics are never touched (attack forwards
pass update_stats=False). Gradients are taken with the model in whatever
mode the caller set. PGD projects onto the epsilon ball around the clean
input first and clips to the valid pixel range second; with one iteration
and alpha >= epsilon it reproduces FGSM bit for bit.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .exceptions import ConfigError, ShapeError
from .layers import Model


@dataclass(frozen=True)
class AttackConfig:
    """Attack budget in input scale (images live in [clip_min, clip_max]).

    alpha is the per-iteration step size; iterations only applies to PGD.
    epsilon == 0 is allowed (the attack degenerates to the identity), in
    which case the alpha <= 2 * epsilon sanity bound is not enforced.
    """

    epsilon: float
    alpha: float
    iterations: int = 1
    clip_min: float = 0.0
    clip_max: float = 1.0
    random_start: bool = False

    def __post_init__(self):
        if self.epsilon < 0:
            raise ConfigError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.alpha <= 0:
            raise ConfigError(f"alpha must be > 0, got {self.alpha}")
        if self.iterations < 1:
            raise ConfigError(f"iterations must be >= 1, got {self.iterations}")
        if self.clip_min >= self.clip_max:
            raise ConfigError(f"clip_min {self.clip_min} >= clip_max {self.clip_max}")
        if self.epsilon > 0 and self.alpha > 2 * self.epsilon:
            raise ConfigError(f"alpha {self.alpha} > 2 * epsilon {2 * self.epsilon}: every step would project")


def project_linf(x_adv: np.ndarray, x: np.ndarray, epsilon: float) -> np.ndarray:
    """Project x_adv onto the L-inf ball of radius epsilon around x."""
    if x_adv.shape != x.shape:
        raise ShapeError(f"project_linf: {x_adv.shape} vs {x.shape}")
    return np.clip(x_adv, x - epsilon, x + epsilon)


def _input_gradient(model: Model, x: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Gradient of the mean cross-entropy at x, weights held constant."""
    x_node = ad.leaf(x)
    logits = model.forward(x_node, leaves=None, update_stats=False)
    loss = ad.softmax_cross_entropy(logits, labels)
    return ad.grad_wrt_input(loss, x_node)


def fgsm(model: Model, x: np.ndarray, labels: np.ndarray, cfg: AttackConfig) -> np.ndarray:
    """Single-step sign attack: x + epsilon * sign(grad), clipped to range."""
    g = _input_gradient(model, x, labels)
    x_adv = x + cfg.epsilon * np.sign(g)
    return np.clip(x_adv, cfg.clip_min, cfg.clip_max)


def pgd(model: Model, x: np.ndarray, labels: np.ndarray, cfg: AttackConfig,
        rng: np.random.Generator | None = None) -> np.ndarray:
    """Iterated sign attack with per-step projection onto the epsilon ball.

    The first iterate starts at the clean input unless random_start is set,
    in which case rng draws uniform noise inside the ball.
    """
    if cfg.random_start:
        if rng is None:
            raise ValueError("random_start requires an rng")
        x_adv = x + rng.uniform(-cfg.epsilon, cfg.epsilon, size=x.shape).astype(x.dtype)
        x_adv = np.clip(x_adv, cfg.clip_min, cfg.clip_max)
    else:
        x_adv = x
    for _ in range(cfg.iterations):
        g = _input_gradient(model, x_adv, labels)
        x_adv = x_adv + cfg.alpha * np.sign(g)
        x_adv = project_linf(x_adv, x, cfg.epsilon)
        x_adv = np.clip(x_adv, cfg.clip_min, cfg.clip_max)
    return x_adv
