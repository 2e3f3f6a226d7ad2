"""Conv/batch-norm/ReLU blocks, pooling, the dense head, and loss functions.

All layers build their forward pass from autograd primitives, so backward
rules come from the tape and stay finite-difference checkable. Parameter
checkpoints use the "TPOW" binary format documented at `save_checkpoint`.
"""

import struct

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ContractError, FormatError, LengthError, ShapeError

CHECKPOINT_MAGIC = b"TPOW"


def _param(shape, dtype):
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def _uniform_fan_in(rng, shape, fan_in, dtype):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class BatchNorm:
    """Per-channel batch normalization over axis 1 of 2-D/4-D/5-D inputs.

    Train mode normalizes with batch statistics and folds new statistics
    into the running estimates (momentum weights the new value); eval mode
    is a pure function of the input using the running estimates.
    """

    def __init__(self, num_features, eps=1e-5, momentum=0.1, dtype=np.float32):
        self.num_features = num_features
        self.eps = float(eps)
        self.momentum = float(momentum)
        self.dtype = dtype
        self.gamma = _param((num_features,), dtype)
        self.beta = _param((num_features,), dtype)
        self.running_mean = np.zeros(num_features, dtype=dtype)
        self.running_var = np.ones(num_features, dtype=dtype)
        self.reset()

    def reset(self):
        self.gamma.data = np.ones(self.num_features, dtype=self.dtype)
        self.beta.data = np.zeros(self.num_features, dtype=self.dtype)
        self.running_mean = np.zeros(self.num_features, dtype=self.dtype)
        self.running_var = np.ones(self.num_features, dtype=self.dtype)

    def _channel_shape(self, ndim):
        return (1, self.num_features) + (1,) * (ndim - 2)

    def __call__(self, x, training):
        if x.ndim < 2 or x.shape[1] != self.num_features:
            raise ShapeError(f"batch norm over {self.num_features} channels got input {x.shape}")
        axes = (0,) + tuple(range(2, x.ndim))
        cshape = self._channel_shape(x.ndim)
        if training:
            mu = ag.mean(x, axes=axes, keepdims=True)
            xc = ag.sub(x, ag.broadcast_to(mu, x.shape))
            var = ag.mean(ag.mul(xc, xc), axes=axes, keepdims=True)
            if ag.is_grad_enabled():
                n = x.size // self.num_features
                batch_mean = mu.data.reshape(self.num_features)
                batch_var = var.data.reshape(self.num_features)
                if n > 1:
                    batch_var = batch_var * (n / (n - 1.0))
                m = self.momentum
                self.running_mean = ((1 - m) * self.running_mean + m * batch_mean).astype(self.dtype)
                self.running_var = ((1 - m) * self.running_var + m * batch_var).astype(self.dtype)
        else:
            mu = Tensor(self.running_mean.reshape(cshape))
            var = Tensor(self.running_var.reshape(cshape))
            xc = ag.sub(x, ag.broadcast_to(mu, x.shape))
        inv = ag.pow_scalar(ag.add_scalar(var, self.eps), -0.5)
        xhat = ag.mul(xc, ag.broadcast_to(inv, x.shape))
        scaled = ag.mul(xhat, ag.broadcast_to(ag.reshape(self.gamma, cshape), x.shape))
        return ag.add(scaled, ag.broadcast_to(ag.reshape(self.beta, cshape), x.shape))

    def parameters(self):
        return [self.gamma, self.beta]

    def init_params(self, rng):
        self.reset()

    def state_items(self):
        return [
            ("gamma", self.gamma.data),
            ("beta", self.beta.data),
            ("running_mean", self.running_mean),
            ("running_var", self.running_var),
        ]

    def load_state_items(self, items):
        self.gamma.data = items["gamma"].astype(self.dtype)
        self.beta.data = items["beta"].astype(self.dtype)
        self.running_mean = items["running_mean"].astype(self.dtype)
        self.running_var = items["running_var"].astype(self.dtype)


class BasicConv3d:
    """Pointwise 3-D convolution over the spectral axis, then BN, then ReLU."""

    def __init__(self, in_channels, out_channels, spectral_kernel, dtype=np.float32):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.spectral_kernel = spectral_kernel
        self.dtype = dtype
        self.weight = _param((out_channels, in_channels, spectral_kernel, 1, 1), dtype)
        self.bias = _param((out_channels,), dtype)
        self.bn = BatchNorm(out_channels, dtype=dtype)

    def __call__(self, x, training):
        y = ag.conv3d_pointwise(x, self.weight, self.bias)
        return ag.relu(self.bn(y, training))

    def parameters(self):
        return [self.weight, self.bias] + self.bn.parameters()

    def init_params(self, rng):
        fan_in = self.in_channels * self.spectral_kernel
        self.weight.data = _uniform_fan_in(rng, self.weight.shape, fan_in, self.dtype)
        self.bias.data = np.zeros(self.out_channels, dtype=self.dtype)
        self.bn.init_params(rng)

    def state_items(self):
        own = [("conv.weight", self.weight.data), ("conv.bias", self.bias.data)]
        return own + [("bn." + k, v) for k, v in self.bn.state_items()]

    def load_state_items(self, items):
        self.weight.data = items["conv.weight"].astype(self.dtype)
        self.bias.data = items["conv.bias"].astype(self.dtype)
        self.bn.load_state_items({k[3:]: v for k, v in items.items() if k.startswith("bn.")})


class BasicConv2d:
    """2-D convolution (stride 1) with fixed zero padding, then BN, then ReLU."""

    def __init__(self, in_channels, out_channels, kernel, padding, dtype=np.float32):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.padding = padding
        self.dtype = dtype
        self.weight = _param((out_channels, in_channels, kernel, kernel), dtype)
        self.bias = _param((out_channels,), dtype)
        self.bn = BatchNorm(out_channels, dtype=dtype)

    def __call__(self, x, training):
        y = ag.conv2d(x, self.weight, self.bias, stride=1, padding=self.padding)
        return ag.relu(self.bn(y, training))

    def parameters(self):
        return [self.weight, self.bias] + self.bn.parameters()

    def init_params(self, rng):
        fan_in = self.in_channels * self.kernel * self.kernel
        self.weight.data = _uniform_fan_in(rng, self.weight.shape, fan_in, self.dtype)
        self.bias.data = np.zeros(self.out_channels, dtype=self.dtype)
        self.bn.init_params(rng)

    def state_items(self):
        own = [("conv.weight", self.weight.data), ("conv.bias", self.bias.data)]
        return own + [("bn." + k, v) for k, v in self.bn.state_items()]

    def load_state_items(self, items):
        self.weight.data = items["conv.weight"].astype(self.dtype)
        self.bias.data = items["conv.bias"].astype(self.dtype)
        self.bn.load_state_items({k[3:]: v for k, v in items.items() if k.startswith("bn.")})


class AvgPool2d:
    """Stateless mean pooling; stride 1 + padding 1 keeps 3×3 output sizes."""

    def __init__(self, kernel, stride=1, padding=0):
        self.kernel = kernel
        self.stride = stride
        self.padding = padding

    def __call__(self, x, training=False):
        return ag.avg_pool2d(x, self.kernel, stride=self.stride, padding=self.padding)

    def parameters(self):
        return []

    def init_params(self, rng):
        pass

    def state_items(self):
        return []

    def load_state_items(self, items):
        pass


def adaptive_avg_pool_1x1(x):
    """Global spatial mean per channel: B×C×H×W -> B×C×1×1."""
    return ag.mean(x, axes=(2, 3), keepdims=True)


def softmax(logits, axis=1):
    shift = Tensor(logits.data.max(axis=axis, keepdims=True))
    z = ag.sub(logits, ag.broadcast_to(shift, logits.shape))
    e = ag.exp(z)
    total = ag.sum_(e, axes=axis, keepdims=True)
    return ag.mul(e, ag.broadcast_to(ag.pow_scalar(total, -1.0), logits.shape))


class DenseHead:
    """Affine map to class scores, 1-D batch norm, softmax."""

    def __init__(self, in_features, class_count, dtype=np.float32):
        self.in_features = in_features
        self.class_count = class_count
        self.dtype = dtype
        self.weight = _param((class_count, in_features), dtype)
        self.bias = _param((class_count,), dtype)
        self.bn = BatchNorm(class_count, dtype=dtype)

    def logits(self, a, training):
        if a.ndim != 2 or a.shape[1] != self.in_features:
            raise ShapeError(f"dense head expects B x {self.in_features}, got {a.shape}")
        z = ag.matmul(a, ag.transpose(self.weight, (1, 0)))
        z = ag.add(z, ag.broadcast_to(ag.reshape(self.bias, (1, self.class_count)), z.shape))
        return self.bn(z, training)

    def __call__(self, a, training):
        return softmax(self.logits(a, training))

    def parameters(self):
        return [self.weight, self.bias] + self.bn.parameters()

    def init_params(self, rng):
        self.weight.data = _uniform_fan_in(rng, self.weight.shape, self.in_features, self.dtype)
        self.bias.data = np.zeros(self.class_count, dtype=self.dtype)
        self.bn.init_params(rng)

    def state_items(self):
        own = [("fc.weight", self.weight.data), ("fc.bias", self.bias.data)]
        return own + [("bn." + k, v) for k, v in self.bn.state_items()]

    def load_state_items(self, items):
        self.weight.data = items["fc.weight"].astype(self.dtype)
        self.bias.data = items["fc.bias"].astype(self.dtype)
        self.bn.load_state_items({k[3:]: v for k, v in items.items() if k.startswith("bn.")})


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def one_hot(labels, class_count, dtype=np.float32):
    """Encode 1-based class ids as one-hot rows."""
    labels = np.asarray(labels)
    if np.any(labels < 1) or np.any(labels > class_count):
        raise ContractError(f"labels must lie in 1..{class_count}")
    out = np.zeros((labels.shape[0], class_count), dtype=dtype)
    out[np.arange(labels.shape[0]), labels - 1] = 1.0
    return out


def _check_one_hot(y):
    arr = y.data if isinstance(y, Tensor) else np.asarray(y)
    if arr.ndim != 2:
        raise ContractError(f"one-hot targets must be 2-D, got shape {arr.shape}")
    if not np.all((arr == 0) | (arr == 1)) or not np.all(arr.sum(axis=1) == 1):
        raise ContractError("targets must be exact one-hot rows")
    return arr


def cross_entropy(probs, targets):
    """Summed negative log-likelihood of one-hot targets under `probs`."""
    y = _check_one_hot(targets)
    if probs.shape != y.shape:
        raise ShapeError(f"probabilities {probs.shape} and targets {y.shape} differ")
    picked = ag.sum_(ag.mul(probs, Tensor(y.astype(probs.dtype))), axes=1)
    return ag.neg(ag.sum_(ag.log(picked)))


def cross_entropy_from_logits(logits, targets):
    """Same loss computed from raw scores via log-sum-exp; numerically safe."""
    y = _check_one_hot(targets)
    if logits.shape != y.shape:
        raise ShapeError(f"logits {logits.shape} and targets {y.shape} differ")
    shift = logits.data.max(axis=1, keepdims=True)
    z = ag.sub(logits, ag.broadcast_to(Tensor(shift), logits.shape))
    lse = ag.add(ag.log(ag.sum_(ag.exp(z), axes=1)), Tensor(shift[:, 0]))
    true_score = ag.sum_(ag.mul(logits, Tensor(y.astype(logits.dtype))), axes=1)
    return ag.sum_(ag.sub(lse, true_score))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, items):
    """Write named float32 arrays: magic "TPOW", u32 count, then per entry
    u32 name length + UTF-8 name, u32 rank, u32 extents, float32 payload,
    all little-endian."""
    items = list(items)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(items)))
        for name, arr in items:
            raw = name.encode("utf-8")
            arr = np.ascontiguousarray(arr, dtype="<f4")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}, expected {CHECKPOINT_MAGIC!r}")
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(blob):
            raise LengthError(f"{path}: truncated at byte {pos}")
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    items = []
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank)) if rank else ()
        size = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(take(4 * size), dtype="<f4").reshape(shape).astype(np.float32)
        items.append((name, arr))
    if pos != len(blob):
        raise LengthError(f"{path}: {len(blob) - pos} trailing bytes")
    return items
