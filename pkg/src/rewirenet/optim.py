"""SGD with momentum, coupled weight decay, and step-decay scheduling.

The velocity buffer lives on the ParamSlot and doubles as the rewiring
momentum: masked positions receive zero gradient, so their velocity only
decays geometrically until the position is regrown (which resets it).
Weight decay is added to the raw gradient before the momentum update, and
the mask is re-applied to the weights after every step so masked positions
stay exactly zero.
"""

import numpy as np

from .exceptions import NumericalError
from .layers import Model


class SGD:
    """v <- momentum * v + g + wd * theta;  theta <- theta - lr * v."""

    def __init__(self, model: Model, lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        if lr <= 0:
            raise ValueError(f"lr must be positive, got {lr}")
        if not 0.0 <= momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {momentum}")
        self.model = model
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay

    def step(self, grads: dict):
        """Apply one update from a {slot name: gradient} mapping."""
        for name, slot in self.model.slots.items():
            g = grads.get(name)
            if g is None:
                raise KeyError(f"no gradient for slot {name}")
            if g.shape != slot.theta.shape:
                raise ValueError(f"gradient shape {g.shape} != {slot.theta.shape} for {name}")
            if not np.isfinite(g).all():
                raise NumericalError(f"non-finite gradient for slot {name}")
            if self.weight_decay:
                g = g + self.weight_decay * slot.theta
            v = slot.momentum
            v *= self.momentum
            v += g
            slot.theta -= self.lr * v
            slot.apply_mask()


def lr_at_epoch(base_lr: float, milestones, factor: float, epoch: int) -> float:
    """Step decay: multiply by factor once for every milestone already passed
    (a milestone of 80 means epochs 0..79 run at the previous rate)."""
    passed = sum(1 for m in milestones if epoch >= m)
    return base_lr * factor ** passed
