"""Dataset loading, desk-scale synthetic data, augmentation, and batching.

Images are float32 NCHW in [0, 1]; labels are int64. Pixel scaling is the
only normalization applied anywhere (no mean/std whitening), because attack
budgets are specified in raw input scale. Two file formats are supported:
the CIFAR-10 binary batches (1 label byte + 3072 pixel bytes per record)
and big-endian IDX (magic 0x00000803 for image files). Two synthetic
generators stand in when no real files are on disk: Gaussian class blobs
and rendered seven-segment digits shaped like MNIST.
"""

import os
from dataclasses import dataclass

import numpy as np
from PIL import Image, ImageDraw

from .exceptions import DataError

DATASET_NAMES = ("mnist", "cifar10", "synth-blobs", "synth-digits")


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str
    name: str

    def __post_init__(self):
        if self.images.ndim != 4:
            raise DataError(f"{self.name}: images must be NCHW, got {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise DataError(f"{self.name}: {self.images.shape[0]} images vs {self.labels.shape} labels")
        lo, hi = float(self.images.min()), float(self.images.max())
        if lo < 0.0 or hi > 1.0:
            raise DataError(f"{self.name}: pixel range [{lo}, {hi}] outside [0, 1]")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise DataError(f"{self.name}: label outside [0, {self.num_classes})")

    def __len__(self):
        return self.images.shape[0]

    def take(self, n: int) -> "Dataset":
        """First n samples (deterministic subset)."""
        if n <= 0 or n >= len(self):
            return self
        return Dataset(self.images[:n], self.labels[:n], self.num_classes, self.split, self.name)


# ---------------------------------------------------------------------------
# file formats

def _read_idx(path: str, expect_magic: int) -> np.ndarray:
    if not os.path.exists(path):
        raise DataError(f"missing data file {path}")
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 4:
        raise DataError(f"{path}: truncated header")
    magic = int.from_bytes(raw[:4], "big")
    if magic != expect_magic:
        raise DataError(f"{path}: bad magic 0x{magic:08x}, expected 0x{expect_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataError(f"{path}: truncated dimension header")
    dims = [int.from_bytes(raw[4 + 4 * i: 8 + 4 * i], "big") for i in range(ndim)]
    count = int(np.prod(dims))
    if len(raw) - header != count:
        raise DataError(f"{path}: expected {count} payload bytes, found {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_mnist_idx(data_dir: str, split: str = "train") -> Dataset:
    """Load an IDX image/label pair (train-* or t10k-* file names)."""
    prefix = "train" if split == "train" else "t10k"
    images = _read_idx(os.path.join(data_dir, f"{prefix}-images-idx3-ubyte"), 0x00000803)
    labels = _read_idx(os.path.join(data_dir, f"{prefix}-labels-idx1-ubyte"), 0x00000801)
    if images.shape[0] != labels.shape[0]:
        raise DataError(f"{data_dir}: {images.shape[0]} images vs {labels.shape[0]} labels")
    x = (images.astype(np.float32) / 255.0)[:, None, :, :]
    return Dataset(x, labels.astype(np.int64), 10, split, "mnist")


def load_cifar10(data_dir: str, split: str = "train") -> Dataset:
    """Load the binary-batch layout: each record is 1 label byte followed by
    3072 channel-major pixel bytes (32x32 RGB)."""
    names = [f"data_batch_{i}.bin" for i in range(1, 6)] if split == "train" else ["test_batch.bin"]
    chunks, labels = [], []
    for name in names:
        path = os.path.join(data_dir, name)
        if not os.path.exists(path):
            raise DataError(f"missing data file {path}")
        raw = np.fromfile(path, dtype=np.uint8)
        if raw.size == 0 or raw.size % 3073:
            raise DataError(f"{path}: size {raw.size} is not a whole number of 3073-byte records")
        rec = raw.reshape(-1, 3073)
        if rec[:, 0].max() > 9:
            raise DataError(f"{path}: label byte out of range")
        labels.append(rec[:, 0].astype(np.int64))
        chunks.append(rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0)
    return Dataset(np.concatenate(chunks), np.concatenate(labels), 10, split, "cifar10")


# ---------------------------------------------------------------------------
# synthetic data

def synth_blobs(num_samples: int, num_classes: int = 10, shape=(1, 8, 8),
                seed: int = 0, noise: float = 0.15, split: str = "train") -> Dataset:
    """Gaussian blobs: one mean image per class plus pixel noise."""
    rng = np.random.default_rng(seed)
    means = rng.uniform(0.25, 0.75, size=(num_classes,) + tuple(shape)).astype(np.float32)
    labels = np.arange(num_samples, dtype=np.int64) % num_classes
    rng.shuffle(labels)
    x = means[labels] + rng.normal(0.0, noise, size=(num_samples,) + tuple(shape)).astype(np.float32)
    return Dataset(np.clip(x, 0.0, 1.0), labels, num_classes, split, "synth-blobs")


# seven-segment endpoints in a unit box: (x0, y0) -> (x1, y1)
_SEG = {
    "A": ((0.22, 0.16), (0.78, 0.16)),
    "B": ((0.78, 0.16), (0.78, 0.50)),
    "C": ((0.78, 0.50), (0.78, 0.84)),
    "D": ((0.22, 0.84), (0.78, 0.84)),
    "E": ((0.22, 0.50), (0.22, 0.84)),
    "F": ((0.22, 0.16), (0.22, 0.50)),
    "G": ((0.22, 0.50), (0.78, 0.50)),
}
_DIGIT_SEGS = {
    0: "ABCDEF", 1: "BC", 2: "ABGED", 3: "ABGCD", 4: "FGBC",
    5: "AFGCD", 6: "AFGEDC", 7: "ABC", 8: "ABCDEFG", 9: "ABCDFG",
}


def synth_digits(num_samples: int, seed: int = 0, size: int = 28,
                 split: str = "train") -> Dataset:
    """Rendered seven-segment digits with affine jitter and pixel noise.

    White strokes on black, drawn at 2x resolution and downsampled, so the
    statistics resemble handwritten-digit data closely enough for desk-scale
    training runs. Fully deterministic in (num_samples, seed, size).
    """
    rng = np.random.default_rng(seed)
    labels = np.arange(num_samples, dtype=np.int64) % 10
    rng.shuffle(labels)
    canvas = size * 2
    images = np.empty((num_samples, 1, size, size), dtype=np.float32)
    for i, digit in enumerate(labels):
        angle = rng.uniform(-0.35, 0.35)
        scl = rng.uniform(0.55, 1.05) * canvas
        tx = canvas / 2 + rng.uniform(-0.12, 0.12) * canvas
        ty = canvas / 2 + rng.uniform(-0.12, 0.12) * canvas
        width = int(rng.integers(2, 7))
        shade = int(rng.integers(140, 256))
        ca, sa = np.cos(angle), np.sin(angle)
        img = Image.new("L", (canvas, canvas), 0)
        draw = ImageDraw.Draw(img)
        for seg in _DIGIT_SEGS[int(digit)]:
            pts = []
            for (ux, uy) in _SEG[seg]:
                jx = ux - 0.5 + rng.uniform(-0.06, 0.06)
                jy = uy - 0.5 + rng.uniform(-0.06, 0.06)
                pts.append((tx + scl * (ca * jx - sa * jy), ty + scl * (sa * jx + ca * jy)))
            # occasional dropped segment makes classes overlap like sloppy
            # handwriting (never on 1, which has only two strokes)
            if len(_DIGIT_SEGS[int(digit)]) > 3 and rng.random() < 0.08:
                continue
            draw.line(pts, fill=shade, width=width)
        small = img.resize((size, size), Image.LANCZOS)
        arr = np.asarray(small, dtype=np.float32) / 255.0
        arr += rng.normal(0.0, 0.12, size=arr.shape).astype(np.float32)
        images[i, 0] = arr
    np.clip(images, 0.0, 1.0, out=images)
    return Dataset(images, labels, 10, split, "synth-digits")


def load_dataset(name: str, split: str, data_dir: str = "", num_samples: int = 0,
                 seed: int = 0) -> Dataset:
    """Uniform entry point used by the harness; num_samples = 0 means all.

    Synthetic sets derive the test split from seed + 1 so train and test
    never share samples.
    """
    if name not in DATASET_NAMES:
        raise DataError(f"unknown dataset {name!r}; expected one of {DATASET_NAMES}")
    off = 0 if split == "train" else 1
    if name == "mnist":
        ds = load_mnist_idx(data_dir or os.environ.get("REWIRENET_MNIST_DIR", "data/mnist"), split)
        return ds.take(num_samples)
    if name == "cifar10":
        ds = load_cifar10(data_dir or os.environ.get("REWIRENET_CIFAR_DIR", "data/cifar10"), split)
        return ds.take(num_samples)
    n = num_samples if num_samples > 0 else (8000 if split == "train" else 2000)
    if name == "synth-blobs":
        return synth_blobs(n, seed=seed + off, split=split)
    return synth_digits(n, seed=seed + off, split=split)


# ---------------------------------------------------------------------------
# augmentation and batching

def augment(images: np.ndarray, rng: np.random.Generator, pad: int = 4) -> np.ndarray:
    """Per-image horizontal flip (p = 0.5) then a random crop from a
    reflection-padded copy. Draw order is flips first, then offsets, so a
    fixed rng seed pins the whole batch."""
    n, _, h, w = images.shape
    flips = rng.random(n) < 0.5
    out = images.copy()
    out[flips] = out[flips, :, :, ::-1]
    padded = np.pad(out, ((0, 0), (0, 0), (pad, pad), (pad, pad)), mode="reflect")
    offs = rng.integers(0, 2 * pad + 1, size=(n, 2))
    for i in range(n):
        dy, dx = offs[i]
        out[i] = padded[i, :, dy:dy + h, dx:dx + w]
    return out


def batches(dataset: Dataset, batch_size: int, rng: np.random.Generator | None = None):
    """Yield (images, labels) minibatches; a final partial batch is kept.

    Passing an rng shuffles with one permutation draw; omit it for
    evaluation order.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    n = len(dataset)
    idx = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        sel = idx[start:start + batch_size]
        yield dataset.images[sel], dataset.labels[sel]
