"""Layers, model container, desk-scale architectures, and checkpoints.

Every parameter tensor lives in a ParamSlot carrying its binary mask, the
epoch-start snapshot of the masked weights (dup), and the optimizer velocity
buffer that doubles as the rewiring momentum. Only convolution weights are
prunable by default; biases and batchnorm parameters never are. Forward
passes multiply prunable weights by their masks inside the autodiff graph,
so masked positions receive exactly zero gradient. A forward with all-ones
masks is bit-identical to a dense forward.
"""

import json
import os
import struct

import numpy as np

from . import autodiff as ad
from . import tensor as T
from .exceptions import DataError, ShapeError

CHECKPOINT_MAGIC = b"RWNETCK1"
BN_MOMENTUM = 0.1

ARCH_NAMES = ("mlp-tiny", "conv-tiny", "vgg-mini", "resnet-mini")


class ParamSlot:
    """One parameter tensor plus its sparsity and optimizer state.

    Attributes:
        theta: the weights, kept exactly zero wherever mask is zero.
        mask: float 0/1 array, same shape as theta.
        dup: epoch-start snapshot of theta * mask (prunable slots only);
            target of the proximal pull term in the hybrid loss.
        momentum: SGD velocity buffer, reused as the rewiring momentum.
        prunable: whether the rewiring engine may touch this slot.
        kind: "conv" | "linear" | "batchnorm".
    """

    def __init__(self, name: str, kind: str, theta: np.ndarray, prunable: bool):
        self.name = name
        self.kind = kind
        self.theta = theta
        self.mask = np.ones_like(theta)
        self.dup = theta.copy() if prunable else None
        self.momentum = np.zeros_like(theta)
        self.prunable = prunable

    def apply_mask(self):
        if self.prunable:
            np.multiply(self.theta, self.mask, out=self.theta)

    def refresh_dup(self):
        if self.prunable:
            np.multiply(self.theta, self.mask, out=self.dup)

    def nonzeros(self) -> int:
        return int(np.count_nonzero(self.mask))

    @property
    def size(self) -> int:
        return self.theta.size


class _Ctx:
    """Per-forward resolver mapping slots to (masked) weight nodes.

    Caching means the clean and adversarial branches of one loss share a
    single masked-weight node per slot, so their gradients accumulate on
    the same leaf.
    """

    def __init__(self, leaves, training: bool, update_stats: bool):
        self.leaves = leaves
        self.training = training
        self.update_stats = update_stats
        self._cache = {}

    def weight(self, slot: ParamSlot) -> ad.Node:
        node = self._cache.get(slot.name)
        if node is None:
            base = self.leaves[slot.name] if self.leaves is not None else ad.constant(slot.theta)
            node = ad.mul(base, ad.constant(slot.mask, op="mask")) if slot.prunable else base
            self._cache[slot.name] = node
        return node


class Conv2d:
    def __init__(self, name, in_ch, out_ch, ksize=3, stride=1, padding=1, prunable=True):
        self.name = name
        self.stride = stride
        self.padding = padding
        self.w = ParamSlot(f"{name}.w", "conv", np.zeros((out_ch, in_ch, ksize, ksize)), prunable)

    @property
    def slots(self):
        return [self.w]

    def forward(self, x, ctx):
        return ad.conv2d(x, ctx.weight(self.w), self.stride, self.padding)

    def out_shape(self, shape):
        c, h, w = shape
        m, cin, kh, kw = self.w.theta.shape
        if c != cin:
            raise ShapeError(f"{self.name}: expects {cin} channels, got {c}")
        oh, ow = T.conv_output_hw(h, w, kh, kw, self.stride, self.padding)
        return (m, oh, ow)

    def flops(self, shape):
        m, oh, ow = self.out_shape(shape)
        _, cin, kh, kw = self.w.theta.shape
        return 2 * m * cin * kh * kw * oh * ow


class Linear:
    def __init__(self, name, in_features, out_features, prunable=False):
        self.name = name
        self.w = ParamSlot(f"{name}.w", "linear", np.zeros((in_features, out_features)), prunable)
        self.b = ParamSlot(f"{name}.b", "linear", np.zeros(out_features), False)

    @property
    def slots(self):
        return [self.w, self.b]

    def forward(self, x, ctx):
        return ad.add_bias(ad.matmul(x, ctx.weight(self.w)), ctx.weight(self.b))

    def out_shape(self, shape):
        if shape != (self.w.theta.shape[0],):
            raise ShapeError(f"{self.name}: expects {self.w.theta.shape[0]} features, got {shape}")
        return (self.w.theta.shape[1],)

    def flops(self, shape):
        return 2 * self.w.theta.shape[0] * self.w.theta.shape[1]


class BatchNorm2d:
    def __init__(self, name, ch):
        self.name = name
        self.gamma = ParamSlot(f"{name}.gamma", "batchnorm", np.ones(ch), False)
        self.beta = ParamSlot(f"{name}.beta", "batchnorm", np.zeros(ch), False)
        self.running_mean = np.zeros(ch)
        self.running_var = np.ones(ch)

    @property
    def slots(self):
        return [self.gamma, self.beta]

    def forward(self, x, ctx):
        g, b = ctx.weight(self.gamma), ctx.weight(self.beta)
        if ctx.training:
            out, mean, var = ad.batchnorm_train(x, g, b)
            if ctx.update_stats:
                self.running_mean += BN_MOMENTUM * (mean - self.running_mean)
                self.running_var += BN_MOMENTUM * (var - self.running_var)
            return out
        return ad.batchnorm_eval(x, g, b, self.running_mean, self.running_var)

    def out_shape(self, shape):
        return shape

    def flops(self, shape):
        return 0


class ReLU:
    slots = []

    def __init__(self, name="relu"):
        self.name = name

    def forward(self, x, ctx):
        return ad.relu(x)

    def out_shape(self, shape):
        return shape

    def flops(self, shape):
        return 0


class MaxPool2x2:
    slots = []

    def __init__(self, name="pool"):
        self.name = name

    def forward(self, x, ctx):
        return ad.maxpool2x2(x)

    def out_shape(self, shape):
        c, h, w = shape
        if h % 2 or w % 2:
            raise ShapeError(f"{self.name}: odd spatial dims {h}x{w}")
        return (c, h // 2, w // 2)

    def flops(self, shape):
        return 0


class Flatten:
    slots = []

    def __init__(self, name="flatten"):
        self.name = name

    def forward(self, x, ctx):
        return ad.flatten(x)

    def out_shape(self, shape):
        return (int(np.prod(shape)),)

    def flops(self, shape):
        return 0


class GlobalAvgPool:
    slots = []

    def __init__(self, name="gap"):
        self.name = name

    def forward(self, x, ctx):
        return ad.mean_spatial(x)

    def out_shape(self, shape):
        return (shape[0],)

    def flops(self, shape):
        return 0


class BasicBlock:
    """Two 3x3 convs with batchnorm and a skip path; 1x1 conv on the skip
    when shape changes. Output is relu(branch + skip)."""

    def __init__(self, name, in_ch, out_ch, stride=1):
        self.name = name
        self.conv1 = Conv2d(f"{name}.conv1", in_ch, out_ch, stride=stride)
        self.bn1 = BatchNorm2d(f"{name}.bn1", out_ch)
        self.conv2 = Conv2d(f"{name}.conv2", out_ch, out_ch)
        self.bn2 = BatchNorm2d(f"{name}.bn2", out_ch)
        if stride != 1 or in_ch != out_ch:
            self.down_conv = Conv2d(f"{name}.down", in_ch, out_ch, ksize=1, stride=stride, padding=0)
            self.down_bn = BatchNorm2d(f"{name}.down_bn", out_ch)
        else:
            self.down_conv = None
            self.down_bn = None

    @property
    def slots(self):
        out = self.conv1.slots + self.bn1.slots + self.conv2.slots + self.bn2.slots
        if self.down_conv is not None:
            out += self.down_conv.slots + self.down_bn.slots
        return out

    def forward(self, x, ctx):
        h = ad.relu(self.bn1.forward(self.conv1.forward(x, ctx), ctx))
        h = self.bn2.forward(self.conv2.forward(h, ctx), ctx)
        skip = x if self.down_conv is None else self.down_bn.forward(self.down_conv.forward(x, ctx), ctx)
        return ad.relu(ad.add(h, skip))

    def out_shape(self, shape):
        return self.conv1.out_shape(shape)

    def flops(self, shape):
        total = self.conv1.flops(shape)
        mid = self.conv1.out_shape(shape)
        total += self.conv2.flops(mid)
        if self.down_conv is not None:
            total += self.down_conv.flops(shape)
        return total


class Model:
    """Ordered layer container with a flat slot registry."""

    def __init__(self, arch: str, layers, input_shape, num_classes: int, dtype=np.float32, prune_linear=False):
        self.arch = arch
        self.layers = layers
        self.input_shape = tuple(input_shape)
        self.num_classes = num_classes
        self.dtype = np.dtype(dtype)
        self.prune_linear = prune_linear
        self.training = True
        self.input_keep = None  # set by channel compaction when image channels drop
        self.slots = {}
        for layer in layers:
            for slot in layer.slots:
                if slot.name in self.slots:
                    raise ShapeError(f"duplicate slot name {slot.name}")
                self.slots[slot.name] = slot

    def train(self):
        self.training = True
        return self

    def eval(self):
        self.training = False
        return self

    def make_leaves(self):
        """Fresh differentiable leaf nodes for every slot (one tape)."""
        return {name: ad.leaf(slot.theta) for name, slot in self.slots.items()}

    def forward(self, x, leaves=None, update_stats=None):
        """Run the network; x is a Node of shape (N,) + input_shape.

        update_stats defaults to the training flag; attack generation passes
        False so batchnorm running statistics are never touched.
        """
        if update_stats is None:
            update_stats = self.training
        ctx = _Ctx(leaves, self.training, update_stats and self.training)
        if self.input_keep is not None:
            x = ad.constant(x.value[:, self.input_keep]) if not x.requires_grad else ad.Node(
                x.value[:, self.input_keep], (x,),
                _input_keep_vjp(x.value.shape, self.input_keep), op="channel_select")
        out = x
        for layer in self.layers:
            out = layer.forward(out, ctx)
        return out

    def prunable_slots(self):
        return [s for s in self.slots.values() if s.prunable]

    def bn_layers(self):
        out = []
        for layer in self.layers:
            if isinstance(layer, BatchNorm2d):
                out.append(layer)
            elif isinstance(layer, BasicBlock):
                out.extend(b for b in (layer.bn1, layer.bn2, layer.down_bn) if b is not None)
        return out

    def num_params(self) -> int:
        return sum(s.size for s in self.slots.values())

    def apply_masks(self):
        for s in self.slots.values():
            s.apply_mask()

    def refresh_dups(self):
        for s in self.slots.values():
            s.refresh_dup()


def _input_keep_vjp(full_shape, keep):
    def vjp(g):
        out = np.zeros(full_shape, dtype=g.dtype)
        out[:, keep] = g
        return (out,)
    return vjp


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _pooled_hw(input_shape, halvings, arch):
    _, h, w = input_shape
    div = 2 ** halvings
    if h % div or w % div:
        raise ShapeError(f"{arch}: input {h}x{w} not divisible by {div}")
    return h // div, w // div


def build_model(arch: str, input_shape, num_classes: int, rng: np.random.Generator,
                dtype=np.float32, prune_linear: bool = False) -> Model:
    """Construct one of the named desk-scale architectures.

    Weights draw Kaiming-uniform from rng in layer order, so a fixed seed
    pins the whole initialization. input_shape is (C, H, W); mlp-tiny
    flattens whatever it is given.
    """
    if arch not in ARCH_NAMES:
        raise ShapeError(f"unknown arch {arch!r}; expected one of {ARCH_NAMES}")
    cin = input_shape[0]
    if arch == "mlp-tiny":
        nin = int(np.prod(input_shape))
        layers = [
            Flatten(),
            Linear("fc1", nin, 64, prunable=prune_linear),
            ReLU(),
            Linear("fc2", 64, num_classes, prunable=prune_linear),
        ]
    elif arch == "conv-tiny":
        ph, pw = _pooled_hw(input_shape, 2, arch)
        layers = [
            Conv2d("conv1", cin, 39),
            ReLU(),
            MaxPool2x2(),
            Conv2d("conv2", 39, 39),
            ReLU(),
            MaxPool2x2(),
            Flatten(),
            Linear("fc", 39 * ph * pw, num_classes, prunable=prune_linear),
        ]
    elif arch == "vgg-mini":
        ph, pw = _pooled_hw(input_shape, 3, arch)
        widths = [(cin, 32), (32, 32), (32, 64), (64, 64), (64, 128), (128, 128)]
        layers = []
        for i, (a, b) in enumerate(widths, 1):
            layers += [Conv2d(f"conv{i}", a, b), BatchNorm2d(f"bn{i}", b), ReLU()]
            if i % 2 == 0:
                layers.append(MaxPool2x2())
        layers += [Flatten(), Linear("fc", 128 * ph * pw, num_classes, prunable=prune_linear)]
    else:  # resnet-mini
        # downsampling lives between blocks (pool halves exactly; stride-2
        # 3x3 convs do not tile even inputs and would violate the conv
        # geometry contract)
        layers = [
            Conv2d("stem", cin, 32),
            BatchNorm2d("stem_bn", 32),
            ReLU(),
            BasicBlock("block1", 32, 32),
            MaxPool2x2(),
            BasicBlock("block2", 32, 64),
            MaxPool2x2(),
            BasicBlock("block3", 64, 128),
            GlobalAvgPool(),
            Linear("fc", 128, num_classes, prunable=prune_linear),
        ]
    model = Model(arch, layers, input_shape, num_classes, dtype, prune_linear)
    for slot in model.slots.values():
        if slot.kind == "conv":
            m, c, kh, kw = slot.theta.shape
            slot.theta = kaiming_uniform(rng, slot.theta.shape, c * kh * kw, dtype)
        elif slot.kind == "linear" and slot.theta.ndim == 2:
            slot.theta = kaiming_uniform(rng, slot.theta.shape, slot.theta.shape[0], dtype)
        else:
            slot.theta = slot.theta.astype(dtype)
        slot.mask = np.ones_like(slot.theta)
        slot.momentum = np.zeros_like(slot.theta)
        slot.dup = (slot.theta * slot.mask) if slot.prunable else None
    for bn in model.bn_layers():
        bn.running_mean = bn.running_mean.astype(dtype)
        bn.running_var = bn.running_var.astype(dtype)
    # shape sanity: propagate through the stack once
    shape = tuple(input_shape)
    for layer in model.layers:
        shape = layer.out_shape(shape)
    if shape != (num_classes,):
        raise ShapeError(f"{arch}: output shape {shape} != ({num_classes},)")
    return model


def flop_count(model: Model) -> int:
    """Multiply-accumulate FLOPs (2 per MAC) of one dense forward per input;
    convolution and linear layers only."""
    shape = model.input_shape
    if model.input_keep is not None:
        shape = (len(model.input_keep),) + tuple(shape[1:])
    total = 0
    for layer in model.layers:
        total += layer.flops(shape)
        shape = layer.out_shape(shape)
    return total


# ---------------------------------------------------------------------------
# channel compaction

_SEQUENTIAL = (Conv2d, BatchNorm2d, ReLU, MaxPool2x2, Flatten, Linear, GlobalAvgPool)


def compact_channels(model: Model) -> Model:
    """Physically remove dead channels from a sequential model.

    An input channel of a conv is dead when its whole mask column is zero;
    the upstream filter producing that feature map (and any batchnorm state
    for it) is removed along with the column. Filters of the last conv feed
    the classifier and are always kept. The result is a plain dense model
    for inference; checkpoints of compacted models are not reloadable into
    named architectures.
    """
    for layer in model.layers:
        if not isinstance(layer, _SEQUENTIAL):
            raise ValueError("channel compaction supports sequential architectures only")
    convs = [l for l in model.layers if isinstance(l, Conv2d)]
    keep_in = {}  # conv name -> kept input channel indices
    for conv in convs:
        if conv.w.prunable:
            m, c = conv.w.mask.shape[:2]
            live = conv.w.mask.reshape(m, c, -1).any(axis=(0, 2))
            keep_in[conv.name] = np.flatnonzero(live)
        else:
            keep_in[conv.name] = np.arange(conv.w.theta.shape[1])
    # conv k keeps exactly the filters that conv k+1 still reads
    filter_keep = {}
    new_layers = []
    for a, b in zip(convs, convs[1:]):
        filter_keep[a.name] = keep_in[b.name]
    filter_keep[convs[-1].name] = np.arange(convs[-1].w.theta.shape[0])
    input_keep = keep_in[convs[0].name]
    chan_sel = None
    for layer in model.layers:
        if isinstance(layer, Conv2d):
            rows = filter_keep[layer.name]
            cols = keep_in[layer.name]
            w = (layer.w.theta * layer.w.mask)[np.ix_(rows, cols)]
            new = Conv2d(layer.name, len(cols), len(rows), ksize=layer.w.theta.shape[2],
                         stride=layer.stride, padding=layer.padding, prunable=False)
            new.w.theta = np.ascontiguousarray(w)
            new.w.mask = np.ones_like(new.w.theta)
            new.w.momentum = np.zeros_like(new.w.theta)
            chan_sel = rows
            new_layers.append(new)
        elif isinstance(layer, BatchNorm2d):
            new = BatchNorm2d(layer.name, len(chan_sel))
            new.gamma.theta = layer.gamma.theta[chan_sel].copy()
            new.beta.theta = layer.beta.theta[chan_sel].copy()
            new.running_mean = layer.running_mean[chan_sel].copy()
            new.running_var = layer.running_var[chan_sel].copy()
            new_layers.append(new)
        elif isinstance(layer, Linear):
            new = Linear(layer.name, layer.w.theta.shape[0], layer.w.theta.shape[1], prunable=False)
            new.w.theta = (layer.w.theta * layer.w.mask).copy()
            new.b.theta = layer.b.theta.copy()
            new_layers.append(new)
        else:
            new_layers.append(type(layer)(layer.name))
    out = Model(model.arch + "-compacted", new_layers, model.input_shape, model.num_classes, model.dtype)
    if len(input_keep) != model.input_shape[0]:
        out.input_keep = input_keep
    out.training = False
    return out


# ---------------------------------------------------------------------------
# checkpoints: magic, u32-LE header length, JSON header, little-endian f32 payload

def _checkpoint_tensors(model: Model):
    for name, slot in model.slots.items():
        yield f"{name}:theta", slot.theta
        yield f"{name}:mask", slot.mask
    for bn in model.bn_layers():
        yield f"{bn.name}:running_mean", bn.running_mean
        yield f"{bn.name}:running_var", bn.running_var


def save_checkpoint(model: Model, path: str):
    """Write arch metadata plus theta/mask/running stats as '<f4' payloads."""
    if model.arch not in ARCH_NAMES:
        raise ValueError(f"cannot checkpoint non-named architecture {model.arch!r}")
    names, arrays = [], []
    for name, arr in _checkpoint_tensors(model):
        names.append({"name": name, "shape": list(arr.shape)})
        arrays.append(np.ascontiguousarray(arr, dtype="<f4"))
    header = {
        "format": "rewirenet-checkpoint",
        "version": 1,
        "arch": model.arch,
        "input_shape": list(model.input_shape),
        "num_classes": model.num_classes,
        "dtype": str(model.dtype),
        "prune_linear": model.prune_linear,
        "tensors": names,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for arr in arrays:
            f.write(arr.tobytes())


def load_checkpoint(path: str) -> Model:
    """Rebuild the named architecture and restore theta, masks, and
    batchnorm running statistics. Velocity starts at zero; dup is refreshed
    to theta * mask."""
    if not os.path.exists(path):
        raise DataError(f"checkpoint not found: {path}")
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise DataError(f"{path}: bad checkpoint magic {magic!r}")
        raw = f.read(4)
        if len(raw) != 4:
            raise DataError(f"{path}: truncated header")
        (hlen,) = struct.unpack("<I", raw)
        try:
            header = json.loads(f.read(hlen).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise DataError(f"{path}: unreadable header: {exc}") from exc
        payload = f.read()
    model = build_model(header["arch"], tuple(header["input_shape"]), header["num_classes"],
                        np.random.default_rng(0), dtype=np.dtype(header["dtype"]),
                        prune_linear=header["prune_linear"])
    offset = 0
    tensors = {}
    for spec in header["tensors"]:
        shape = tuple(spec["shape"])
        n = int(np.prod(shape)) if shape else 1
        if offset + n * 4 > len(payload):
            raise DataError(f"{path}: truncated payload at tensor {spec['name']}")
        arr = np.frombuffer(payload, dtype="<f4", count=n, offset=offset).reshape(shape)
        offset += n * 4
        tensors[spec["name"]] = arr
    if offset != len(payload):
        raise DataError(f"{path}: payload length mismatch")
    dtype = model.dtype
    for name, slot in model.slots.items():
        slot.theta = tensors[f"{name}:theta"].astype(dtype)
        slot.mask = tensors[f"{name}:mask"].astype(dtype)
        slot.momentum = np.zeros_like(slot.theta)
        slot.dup = (slot.theta * slot.mask) if slot.prunable else None
    for bn in model.bn_layers():
        bn.running_mean = tensors[f"{bn.name}:running_mean"].astype(dtype)
        bn.running_var = tensors[f"{bn.name}:running_var"].astype(dtype)
    return model
