"""Sparse training of convolutional networks that stay robust under
gradient-based input attacks.

Dense networks are pruned to a fixed global weight budget at initialization
and trained in a single run: every epoch drops the smallest-magnitude live
weights and regrows the same number at the positions with the largest
momentum, so connectivity is rewired on the fly while the total number of
live weights never changes. The training objective blends clean and
adversarial cross-entropy and pulls live weights toward a slowly-updated
copy of themselves. Supports unstructured masks and whole-channel masks
(the latter compactable into a physically smaller network).
"""

from . import autodiff, tensor
from .attacks import AttackConfig, fgsm, pgd, project_linf
from .data import (DATASET_NAMES, Dataset, augment, batches, load_cifar10,
                   load_dataset, load_mnist_idx, synth_blobs, synth_digits)
from .exceptions import ConfigError, DataError, NumericalError, ShapeError
from .harness import (ExperimentConfig, RngStreams, attack_sweep, evaluate,
                      run_training, sensitivity_scan)
from .layers import (ARCH_NAMES, Model, build_model, compact_channels,
                     flop_count, load_checkpoint, save_checkpoint)
from .optim import SGD, lr_at_epoch
from .rewiring import (HybridLossConfig, SparsityState, channels_present,
                       compression_ratio, epoch_rewire, hybrid_loss,
                       init_masks, momentum_redistribution)

__version__ = "0.1.0"

__all__ = [
    "ARCH_NAMES", "AttackConfig", "ConfigError", "DATASET_NAMES", "DataError",
    "Dataset", "ExperimentConfig", "HybridLossConfig", "Model",
    "NumericalError", "RngStreams", "SGD", "ShapeError", "SparsityState",
    "attack_sweep", "augment", "autodiff", "batches", "build_model",
    "channels_present", "compact_channels", "compression_ratio",
    "epoch_rewire", "evaluate", "fgsm", "flop_count", "hybrid_loss",
    "init_masks", "load_checkpoint", "load_cifar10", "load_dataset",
    "load_mnist_idx", "lr_at_epoch", "momentum_redistribution", "pgd",
    "project_linf", "run_training", "save_checkpoint", "sensitivity_scan",
    "synth_blobs", "synth_digits", "tensor",
]
