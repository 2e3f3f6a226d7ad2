"""The registered gradient-check suite behind `tpo gradcheck`.

Every autograd primitive, every layer block, and the full tiny model (both
variants) are compared against central finite differences, in float32 at
tolerance 1e-4 and float64 at 1e-6, over 20 seeds each. The numeric side
always evaluates in float64 at the dtype-rounded point, with h chosen small
enough that probes stay on one side of ReLU kinks.

Whole-model runs stratify the probed coordinates (a fixed quarter per seed,
rotating so four consecutive seeds cover every parameter coordinate); layers
and primitives are probed exhaustively per seed.
"""

import time
import zlib
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .layers import (
    BasicConv2d,
    BasicConv3d,
    BatchNorm,
    DenseHead,
    adaptive_avg_pool_1x1,
    cross_entropy_from_logits,
    one_hot,
    softmax,
)
from .models import ModelSpec, TpoCnn

SEEDS = 20
DTYPE_TOLS = ((np.float32, 1e-4), (np.float64, 1e-6))
TINY_SPEC = dict(p=2, q=2, r=2, input_bands=6, patch_size=3, class_count=2,
                 views=9, branch_channels=1)


@dataclass
class CheckResult:
    name: str
    dtype: str
    seeds: int
    max_rel_err: float
    tol: float
    passed: bool

    def line(self):
        status = "pass" if self.passed else "FAIL"
        return (f"[{status}] {self.name:<28s} {self.dtype:<8s} seeds={self.seeds:<3d} "
                f"max_rel_err={self.max_rel_err:.3e} tol={self.tol:.0e}")


def _case_rng(name, seed):
    return np.random.default_rng((zlib.crc32(name.encode()) << 8) + seed)


def _away_from_zero(x, margin=0.05):
    return x + np.where(np.abs(x) < margin, np.sign(x) * 2 * margin + margin, 0.0)


# ---------------------------------------------------------------------------
# primitive cases: (name, loss function over Tensors, input maker)
# ---------------------------------------------------------------------------

def _primitive_cases():
    def normals(*shapes):
        return lambda rng: [rng.normal(size=s) for s in shapes]

    sq = lambda t: ag.sum_(ag.pow_scalar(t, 2.0))
    cases = [
        ("add", lambda a, b: sq(ag.add(a, b)), normals((2, 3), (2, 3))),
        ("sub", lambda a, b: sq(ag.sub(a, b)), normals((2, 3), (2, 3))),
        ("mul", lambda a, b: ag.sum_(ag.mul(a, b)), normals((3, 2), (3, 2))),
        ("neg", lambda a: sq(ag.neg(a)), normals((4,))),
        ("scale", lambda a: sq(ag.scale(a, -0.7)), normals((5,))),
        ("add_scalar", lambda a: sq(ag.add_scalar(a, 1.3)), normals((5,))),
        ("pow_scalar", lambda a: ag.sum_(ag.pow_scalar(a, 3.0)), normals((4,))),
        ("matmul", lambda a, b: sq(ag.matmul(a, b)), normals((3, 4), (4, 2))),
        ("transpose", lambda a: sq(ag.transpose(a, (1, 0))), normals((2, 4))),
        ("reshape", lambda a: sq(ag.reshape(a, (6,))), normals((2, 3))),
        ("broadcast_to", lambda a: sq(ag.broadcast_to(a, (4, 3, 2))), normals((1, 2))),
        ("concat", lambda a, b: sq(ag.concat([a, b], axis=1)), normals((2, 3), (2, 2))),
        ("slice", lambda a: sq(ag.slice_(a, (slice(1, 3), slice(0, 2)))), normals((4, 3))),
        ("mean", lambda a: sq(ag.mean(a, axes=(0, 2))), normals((2, 3, 4))),
        ("sum", lambda a: sq(ag.sum_(a, axes=1, keepdims=True)), normals((2, 3))),
        ("exp", lambda a: ag.sum_(ag.exp(a)), normals((3, 3))),
        ("log", lambda a: ag.sum_(ag.log(a)), lambda rng: [rng.uniform(0.5, 2.0, size=(3, 4))]),
        ("pad2d", lambda a: sq(ag.pad2d(a, 2)), normals((1, 2, 3, 3))),
        ("relu", lambda a: sq(ag.relu(a)), lambda rng: [_away_from_zero(rng.normal(size=(4, 4)))]),
        ("max", lambda a: sq(ag.max_(a, axes=(1, 2))),
         lambda rng: [rng.permutation(np.linspace(-2.0, 2.0, 24)).reshape(2, 3, 4)]),
        ("conv2d", lambda x, w, b: sq(ag.conv2d(x, w, b, stride=2, padding=1)),
         normals((2, 2, 4, 4), (2, 2, 3, 3), (2,))),
        ("conv3d_pointwise", lambda x, w, b: sq(ag.conv3d_pointwise(x, w, b)),
         normals((2, 2, 5, 2, 2), (3, 2, 2, 1, 1), (3,))),
        ("avg_pool2d", lambda x: sq(ag.avg_pool2d(x, 3, stride=1, padding=1)),
         normals((2, 2, 5, 5))),
    ]
    return cases


def check_primitives(dtype, tol, seeds=SEEDS):
    results = []
    for name, f, make_inputs in _primitive_cases():
        worst = 0.0
        for seed in range(seeds):
            inputs = make_inputs(_case_rng(name, seed))
            report = ag.grad_check(f, inputs, h=1e-4, tol=tol, dtype=dtype)
            worst = max(worst, report.max_rel_err)
        results.append(CheckResult(f"primitive/{name}", np.dtype(dtype).name, seeds,
                                   worst, tol, worst <= tol))
    return results


# ---------------------------------------------------------------------------
# layer cases
# ---------------------------------------------------------------------------

def _layer_cases():
    # name, factory(dtype) -> layer, input shape
    return [
        ("batchnorm1d", lambda dt: BatchNorm(3, dtype=dt), (4, 3)),
        ("batchnorm2d", lambda dt: BatchNorm(2, dtype=dt), (3, 2, 3, 3)),
        ("batchnorm3d", lambda dt: BatchNorm(2, dtype=dt), (2, 2, 3, 2, 2)),
        ("basic_conv2d", lambda dt: BasicConv2d(2, 2, 3, 1, dtype=dt), (2, 2, 4, 4)),
        ("basic_conv2d_k5", lambda dt: BasicConv2d(2, 2, 5, 2, dtype=dt), (2, 2, 5, 5)),
        ("basic_conv3d", lambda dt: BasicConv3d(2, 2, 2, dtype=dt), (2, 2, 5, 3, 3)),
    ]


def _run_module_case(name, make_loss_pair, dtype, tol, seeds, h=1e-6,
                     coord_stride=1):
    worst = 0.0
    for seed in range(seeds):
        loss_a, params_a, loss_f, params_f = make_loss_pair(seed, dtype)
        report = ag.grad_check_params(
            loss_a, params_a, h=h, tol=tol, fd_loss_fn=loss_f, fd_params=params_f,
            coord_stride=coord_stride, coord_offset=seed % coord_stride,
        )
        worst = max(worst, report.max_rel_err)
    return CheckResult(name, np.dtype(dtype).name, seeds, worst, tol, worst <= tol)


def _layer_pair_builder(name, factory, input_shape):
    def build(seed, dtype):
        rng = _case_rng(name, seed)
        layer = factory(dtype)
        layer.init_params(rng)
        x64 = _away_from_zero(rng.normal(size=input_shape), margin=0.02)
        xa = Tensor(x64.astype(dtype), requires_grad=True)
        with ag.no_grad():
            out_shape = layer(Tensor(xa.data.copy()), training=True).shape
        w = rng.normal(size=out_shape).astype(dtype)

        def loss_a():
            return ag.sum_(ag.mul(layer(xa, training=True), Tensor(w)))

        params_a = layer.parameters() + [xa]
        if dtype == np.float64:
            return loss_a, params_a, None, None

        mirror = factory(np.float64)
        mirror.load_state_items(dict(layer.state_items()))
        xf = Tensor(xa.data.astype(np.float64))
        wf = Tensor(w.astype(np.float64))

        def loss_f():
            return ag.sum_(ag.mul(mirror(xf, training=True), wf))

        return loss_a, params_a, loss_f, mirror.parameters() + [xf]

    return build


def _dense_head_builder():
    def build(seed, dtype):
        rng = _case_rng("dense_head", seed)
        head = DenseHead(6, 3, dtype=dtype)
        head.init_params(rng)
        x64 = rng.normal(size=(4, 6))
        y = one_hot(rng.integers(1, 4, size=4), 3)
        xa = Tensor(x64.astype(dtype), requires_grad=True)

        def loss_a():
            return cross_entropy_from_logits(head.logits(xa, training=True), y)

        params_a = head.parameters() + [xa]
        if dtype == np.float64:
            return loss_a, params_a, None, None
        mirror = DenseHead(6, 3, dtype=np.float64)
        mirror.load_state_items(dict(head.state_items()))
        xf = Tensor(xa.data.astype(np.float64))

        def loss_f():
            return cross_entropy_from_logits(mirror.logits(xf, training=True), y)

        return loss_a, params_a, loss_f, mirror.parameters() + [xf]

    return build


def _softmax_builder():
    def build(seed, dtype):
        rng = _case_rng("softmax", seed)
        z64 = rng.normal(size=(3, 4))
        w = rng.normal(size=(3, 4)).astype(dtype)
        za = Tensor(z64.astype(dtype), requires_grad=True)

        def loss_a():
            return ag.sum_(ag.mul(softmax(za), Tensor(w)))

        if dtype == np.float64:
            return loss_a, [za], None, None
        zf = Tensor(za.data.astype(np.float64))
        wf = Tensor(w.astype(np.float64))

        def loss_f():
            return ag.sum_(ag.mul(softmax(zf), wf))

        return loss_a, [za], loss_f, [zf]

    return build


def _adaptive_pool_builder():
    def build(seed, dtype):
        rng = _case_rng("adaptive_pool", seed)
        x64 = rng.normal(size=(2, 3, 4, 4))
        w = rng.normal(size=(2, 3, 1, 1)).astype(dtype)
        xa = Tensor(x64.astype(dtype), requires_grad=True)

        def loss_a():
            return ag.sum_(ag.mul(adaptive_avg_pool_1x1(xa), Tensor(w)))

        if dtype == np.float64:
            return loss_a, [xa], None, None
        xf = Tensor(xa.data.astype(np.float64))
        wf = Tensor(w.astype(np.float64))

        def loss_f():
            return ag.sum_(ag.mul(adaptive_avg_pool_1x1(xf), wf))

        return loss_a, [xa], loss_f, [xf]

    return build


def _cross_entropy_builder():
    def build(seed, dtype):
        rng = _case_rng("cross_entropy", seed)
        z64 = rng.normal(size=(5, 3))
        y = one_hot(rng.integers(1, 4, size=5), 3)
        za = Tensor(z64.astype(dtype), requires_grad=True)

        def loss_a():
            return cross_entropy_from_logits(za, y)

        if dtype == np.float64:
            return loss_a, [za], None, None
        zf = Tensor(za.data.astype(np.float64))

        def loss_f():
            return cross_entropy_from_logits(zf, y)

        return loss_a, [za], loss_f, [zf]

    return build


def check_layers(dtype, tol, seeds=SEEDS):
    results = []
    for name, factory, shape in _layer_cases():
        results.append(_run_module_case(f"layer/{name}",
                                        _layer_pair_builder(name, factory, shape),
                                        dtype, tol, seeds))
    results.append(_run_module_case("layer/dense_head", _dense_head_builder(), dtype, tol, seeds))
    results.append(_run_module_case("layer/softmax", _softmax_builder(), dtype, tol, seeds))
    results.append(_run_module_case("layer/adaptive_pool", _adaptive_pool_builder(), dtype, tol, seeds))
    results.append(_run_module_case("layer/cross_entropy", _cross_entropy_builder(), dtype, tol, seeds))
    return results


# ---------------------------------------------------------------------------
# full tiny models
# ---------------------------------------------------------------------------

def _model_builder(variant):
    spec = ModelSpec(variant=variant, **TINY_SPEC)

    def build(seed, dtype):
        rng = _case_rng(f"model_{variant}", seed)
        model = TpoCnn(spec, dtype=dtype)
        model.init_params(seed)
        x64 = rng.normal(size=(2, spec.views, spec.input_bands, spec.patch_size, spec.patch_size))
        y = one_hot(np.array([1, 2]), spec.class_count)
        xa = Tensor(x64.astype(dtype))

        def loss_a():
            return cross_entropy_from_logits(model.forward_logits(xa), y)

        params_a = model.parameters()
        if dtype == np.float64:
            return loss_a, params_a, None, None
        mirror = TpoCnn(spec, dtype=np.float64)
        mirror.load_state_items(model.state_items())
        xf = Tensor(xa.data.astype(np.float64))

        def loss_f():
            return cross_entropy_from_logits(mirror.forward_logits(xf), y)

        return loss_a, params_a, loss_f, mirror.parameters()

    return build


def check_models(dtype, tol, seeds=SEEDS):
    results = []
    for variant in ("tpo_cnn1", "tpo_cnn2"):
        results.append(_run_module_case(f"model/{variant}", _model_builder(variant),
                                        dtype, tol, seeds, coord_stride=4))
    return results


def run_suite(seeds=SEEDS, verbose=True):
    """Run every registered check in both precisions; True iff all pass."""
    started = time.perf_counter()
    results = []
    for dtype, tol in DTYPE_TOLS:
        results += check_primitives(dtype, tol, seeds)
        results += check_layers(dtype, tol, seeds)
        results += check_models(dtype, tol, seeds)
    elapsed = time.perf_counter() - started
    if verbose:
        for r in results:
            print(r.line())
        failed = sum(not r.passed for r in results)
        print(f"{len(results) - failed}/{len(results)} checks passed in {elapsed:.1f}s")
    return all(r.passed for r in results), results, elapsed
