"""The two multi-scale network variants and their band-reduction front end.

Both networks share the same skeleton: three pointwise 3-D conv stages shrink
the spectral axis, the view and band axes merge into one channel axis, a
multi-scale 2-D feature extractor pools to a flat vector, and a dense head
emits class probabilities. They differ only in how the multi-scale branches
are grouped (one four-branch bank vs. three two-branch banks).
"""

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ShapeError
from .layers import (
    AvgPool2d,
    BasicConv2d,
    BasicConv3d,
    DenseHead,
    adaptive_avg_pool_1x1,
    softmax,
)

VARIANTS = ("tpo_cnn1", "tpo_cnn2")


@dataclass(frozen=True)
class ModelSpec:
    """Declarative description of one network instance."""

    variant: str
    p: int
    q: int
    r: int
    input_bands: int
    patch_size: int
    class_count: int
    views: int = 9
    branch_channels: int = 32

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ShapeError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.views not in (1, 9):
            raise ShapeError(f"views must be 1 or 9, got {self.views}")
        if self.patch_size % 2 == 0 or self.patch_size < 1:
            raise ShapeError(f"patch_size must be odd, got {self.patch_size}")
        if self.branch_channels < 1:
            raise ShapeError("branch_channels must be >= 1")
        if self.class_count < 2:
            raise ShapeError("class_count must be >= 2")
        if self.reduced_bands < 1:
            raise ShapeError(
                f"band reduction ({self.p},{self.q},{self.r}) leaves "
                f"{self.reduced_bands} of {self.input_bands} bands"
            )

    @property
    def reduced_bands(self):
        return self.input_bands - (self.p - 1) - (self.q - 1) - (self.r - 1)

    @property
    def merged_channels(self):
        return self.views * self.reduced_bands

    @property
    def feature_length(self):
        return 4 * self.branch_channels if self.variant == "tpo_cnn1" else 6 * self.branch_channels

    def spectral_chain(self):
        """Spectral sizes after each reduction stage, starting from the input."""
        d = self.input_bands
        chain = [d]
        for kernel in (self.p, self.q, self.r):
            d = d - kernel + 1
            chain.append(d)
        return chain


class BandReductionBlock:
    """Three pointwise 3-D conv stages; channel width stays at the view count."""

    def __init__(self, spec, dtype=np.float32):
        v = spec.views
        self.spec = spec
        self.stages = [
            BasicConv3d(v, v, spec.p, dtype=dtype),
            BasicConv3d(v, v, spec.q, dtype=dtype),
            BasicConv3d(v, v, spec.r, dtype=dtype),
        ]

    def __call__(self, x, training):
        """B×V×D×k×k -> B×(V·D_r)×k×k with views and bands merged."""
        for stage in self.stages:
            x = stage(x, training)
        b, v, d, kh, kw = x.shape
        return ag.reshape(x, (b, v * d, kh, kw))

    def parameters(self):
        return [p for s in self.stages for p in s.parameters()]

    def init_params(self, rng):
        for s in self.stages:
            s.init_params(rng)

    def state_items(self):
        out = []
        for i, s in enumerate(self.stages, 1):
            out += [(f"stage{i}.{k}", v) for k, v in s.state_items()]
        return out

    def load_state_items(self, items):
        for i, s in enumerate(self.stages, 1):
            prefix = f"stage{i}."
            s.load_state_items({k[len(prefix):]: v for k, v in items.items() if k.startswith(prefix)})


class _BranchGroup:
    """A list of parallel branches (each a layer chain) concatenated on channels."""

    def __init__(self, branches):
        self.branches = branches

    def __call__(self, x, training):
        outs = []
        for chain in self.branches:
            y = x
            for layer in chain:
                y = layer(y, training)
            outs.append(y)
        return ag.concat(outs, axis=1)

    def layers(self):
        return [layer for chain in self.branches for layer in chain]


class _FeatureExtractorBase:
    def _layers(self):
        raise NotImplementedError

    def parameters(self):
        return [p for layer in self._layers() for p in layer.parameters()]

    def init_params(self, rng):
        for layer in self._layers():
            layer.init_params(rng)

    def state_items(self):
        out = []
        for i, layer in enumerate(self._layers()):
            out += [(f"layer{i}.{k}", v) for k, v in layer.state_items()]
        return out

    def load_state_items(self, items):
        for i, layer in enumerate(self._layers()):
            prefix = f"layer{i}."
            layer.load_state_items({k[len(prefix):]: v for k, v in items.items() if k.startswith(prefix)})


class FeatureExtractor1(_FeatureExtractorBase):
    """Four-branch multi-scale filter bank with a single global pooling."""

    def __init__(self, in_channels, branch_channels, dtype=np.float32):
        bc = branch_channels
        self.group = _BranchGroup([
            [BasicConv2d(in_channels, bc, 1, 0, dtype=dtype)],
            [BasicConv2d(in_channels, bc, 1, 0, dtype=dtype),
             BasicConv2d(bc, bc, 3, 1, dtype=dtype),
             BasicConv2d(bc, bc, 3, 1, dtype=dtype)],
            [BasicConv2d(in_channels, bc, 1, 0, dtype=dtype),
             BasicConv2d(bc, bc, 5, 2, dtype=dtype)],
            [AvgPool2d(3, stride=1, padding=1),
             BasicConv2d(in_channels, bc, 1, 0, dtype=dtype)],
        ])
        self.out_features = 4 * bc

    def __call__(self, x, training):
        pooled = adaptive_avg_pool_1x1(self.group(x, training))
        return ag.reshape(pooled, (x.shape[0], self.out_features))

    def _layers(self):
        return self.group.layers()


class FeatureExtractor2(_FeatureExtractorBase):
    """The same multi-scale branches regrouped into three two-branch banks.

    Every bank sees the full input, pools its own concatenation to 1×1, and
    the three pooled vectors concatenate into the final feature.
    """

    def __init__(self, in_channels, branch_channels, dtype=np.float32):
        bc = branch_channels
        self.groups = [
            _BranchGroup([
                [BasicConv2d(in_channels, bc, 1, 0, dtype=dtype)],
                [BasicConv2d(in_channels, bc, 1, 0, dtype=dtype),
                 BasicConv2d(bc, bc, 3, 1, dtype=dtype),
                 BasicConv2d(bc, bc, 3, 1, dtype=dtype)],
            ]),
            _BranchGroup([
                [BasicConv2d(in_channels, bc, 1, 0, dtype=dtype)],
                [BasicConv2d(in_channels, bc, 1, 0, dtype=dtype),
                 BasicConv2d(bc, bc, 5, 2, dtype=dtype)],
            ]),
            _BranchGroup([
                [BasicConv2d(in_channels, bc, 1, 0, dtype=dtype)],
                [AvgPool2d(3, stride=1, padding=1),
                 BasicConv2d(in_channels, bc, 1, 0, dtype=dtype)],
            ]),
        ]
        self.out_features = 6 * bc

    def __call__(self, x, training):
        pooled = []
        for group in self.groups:
            y = adaptive_avg_pool_1x1(group(x, training))
            pooled.append(ag.reshape(y, (x.shape[0], y.shape[1])))
        return ag.concat(pooled, axis=1)

    def _layers(self):
        return [layer for g in self.groups for layer in g.layers()]


class TpoCnn:
    """Band reduction -> multi-scale feature extraction -> dense head."""

    def __init__(self, spec, dtype=np.float32):
        self.spec = spec
        self.dtype = dtype
        self.training = True
        self.band_reduction = BandReductionBlock(spec, dtype=dtype)
        if spec.variant == "tpo_cnn1":
            self.features = FeatureExtractor1(spec.merged_channels, spec.branch_channels, dtype=dtype)
        else:
            self.features = FeatureExtractor2(spec.merged_channels, spec.branch_channels, dtype=dtype)
        self.head = DenseHead(self.features.out_features, spec.class_count, dtype=dtype)

    def train_mode(self):
        self.training = True
        return self

    def eval_mode(self):
        self.training = False
        return self

    def _check_batch(self, x):
        s = self.spec
        expected = (s.views, s.input_bands, s.patch_size, s.patch_size)
        if x.ndim != 5 or x.shape[1:] != expected:
            raise ShapeError(f"batch shape {x.shape} does not match spec B x {expected}")

    def forward_logits(self, x):
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        self._check_batch(x)
        merged = self.band_reduction(x, self.training)
        feats = self.features(merged, self.training)
        return self.head.logits(feats, self.training)

    def forward(self, x):
        """Class probabilities, one row per sample, rows summing to one."""
        return softmax(self.forward_logits(x))

    __call__ = forward

    def parameters(self):
        return (self.band_reduction.parameters()
                + self.features.parameters()
                + self.head.parameters())

    def init_params(self, seed):
        """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) weights, zero biases,
        identity batch norms; deterministic in the seed."""
        rng = np.random.default_rng(seed)
        self.band_reduction.init_params(rng)
        self.features.init_params(rng)
        self.head.init_params(rng)

    def state_items(self):
        out = [(f"band_reduction.{k}", v) for k, v in self.band_reduction.state_items()]
        out += [(f"features.{k}", v) for k, v in self.features.state_items()]
        out += [(f"head.{k}", v) for k, v in self.head.state_items()]
        return out

    def load_state_items(self, items):
        if isinstance(items, list):
            items = dict(items)
        own = dict(self.state_items())
        if set(items) != set(own):
            missing = sorted(set(own) - set(items))[:3]
            extra = sorted(set(items) - set(own))[:3]
            raise ShapeError(f"checkpoint does not match model (missing {missing}, extra {extra})")
        for name, arr in items.items():
            if arr.shape != own[name].shape:
                raise ShapeError(f"checkpoint tensor {name} has shape {arr.shape}, model expects {own[name].shape}")
        for prefix, part in (("band_reduction.", self.band_reduction),
                             ("features.", self.features),
                             ("head.", self.head)):
            part.load_state_items({k[len(prefix):]: v for k, v in items.items() if k.startswith(prefix)})
