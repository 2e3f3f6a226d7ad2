"""Dense N-D tensors with reverse-mode automatic differentiation.

A Tensor wraps a float32/float64 numpy array. Operations build an implicit
DAG of backward rules; `backward(loss)` walks it once in reverse topological
order and accumulates gradients into the `grad` field of every leaf that
requires them. There is no implicit broadcasting: shapes must match exactly,
and `broadcast_to` makes any expansion explicit so every backward rule stays
auditable.
"""

from contextlib import contextmanager

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, ShapeError

_FLOAT_DTYPES = (np.float32, np.float64)


class _State:
    grad_enabled = True
    debug_nan = False


_state = _State()


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference, FD probes)."""
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def set_debug_nan(flag):
    """When enabled, every op output is checked for NaN/Inf and traps."""
    _state.debug_nan = bool(flag)


def is_grad_enabled():
    return _state.grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        arr = data if isinstance(data, np.ndarray) else np.asarray(data)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"


def _from_op(data, parents, backward_fn):
    if _state.debug_nan and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite value in op output")
    if _state.grad_enabled and any(p.requires_grad for p in parents):
        out = Tensor(data, requires_grad=True)
        out._parents = tuple(parents)
        out._backward = backward_fn
        return out
    return Tensor(data)


def _require_same_shape(name, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"{name}: operand shapes {a.shape} and {b.shape} differ")


def _toposort(root):
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss):
    """Populate `grad` on all requires_grad leaves reachable from `loss`.

    Repeated calls accumulate; call `zero_grad` on leaves between steps.
    """
    if loss.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
    order = _toposort(loss)
    acc = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        out_grad = acc.pop(id(node), None)
        if out_grad is None:
            continue
        if node.requires_grad and node._backward is None:
            node.grad = out_grad if node.grad is None else node.grad + out_grad
        if node._backward is None:
            continue
        for parent, g in zip(node._parents, node._backward(out_grad)):
            if g is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in acc:
                acc[key] = acc[key] + g
            else:
                acc[key] = g


# ---------------------------------------------------------------------------
# elementwise and scalar ops
# ---------------------------------------------------------------------------

def add(a, b):
    _require_same_shape("add", a, b)
    return _from_op(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b):
    _require_same_shape("sub", a, b)
    return _from_op(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b):
    _require_same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _from_op(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def neg(a):
    return _from_op(-a.data, (a,), lambda g: (-g,))


def scale(a, c):
    c = float(c)
    return _from_op(a.data * c, (a,), lambda g: (g * c,))


def add_scalar(a, c):
    c = float(c)
    return _from_op(a.data + c, (a,), lambda g: (g,))


def pow_scalar(a, exponent):
    """Elementwise a**exponent for a constant exponent."""
    e = float(exponent)
    ad = a.data
    out = ad ** e
    return _from_op(out, (a,), lambda g: (g * e * ad ** (e - 1.0),))


def relu(a):
    ad = a.data
    mask = ad > 0
    return _from_op(np.where(mask, ad, 0), (a,), lambda g: (g * mask,))


def exp(a):
    out = np.exp(a.data)
    return _from_op(out, (a,), lambda g: (g * out,))


def log(a):
    ad = a.data
    return _from_op(np.log(ad), (a,), lambda g: (g / ad,))


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------

def reshape(a, shape):
    old = a.shape
    return _from_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return _from_op(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def broadcast_to(a, shape):
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError as e:
        raise ShapeError(f"broadcast_to: cannot broadcast {a.shape} to {shape}") from e
    src_shape = a.shape

    def back(g):
        extra = g.ndim - len(src_shape)
        if extra:
            g = g.sum(axis=tuple(range(extra)))
        axes = tuple(i for i, n in enumerate(src_shape) if n == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g,)

    # kept as a zero-copy view; elementwise consumers handle strided reads
    return _from_op(out, (a,), back)


def concat(tensors, axis):
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat: empty tensor list")
    nd = tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != nd:
            raise ShapeError(f"concat: rank mismatch {tensors[0].shape} vs {t.shape}")
        for ax in range(nd):
            if ax != axis and t.shape[ax] != tensors[0].shape[ax]:
                raise ShapeError(f"concat: shapes {tensors[0].shape} and {t.shape} differ off axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _from_op(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), back)


def slice_(a, key):
    """Basic slicing (ints and slices only); backward scatters into zeros."""
    out = a.data[key]
    src_shape = a.shape
    src_dtype = a.dtype

    def back(g):
        full = np.zeros(src_shape, dtype=src_dtype)
        full[key] = g
        return (full,)

    return _from_op(np.ascontiguousarray(out), (a,), back)


def pad2d(a, padding):
    """Zero-pad the last two axes by `padding` on every side."""
    p = int(padding)
    if p < 0:
        raise ShapeError("pad2d: padding must be >= 0")
    if p == 0:
        return _from_op(a.data.copy(), (a,), lambda g: (g,))
    width = [(0, 0)] * (a.ndim - 2) + [(p, p), (p, p)]
    out = np.pad(a.data, width)
    sl = (Ellipsis, slice(p, -p), slice(p, -p))
    return _from_op(out, (a,), lambda g: (g[sl],))


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def _normalize_axes(axes, ndim):
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    return tuple(ax % ndim for ax in axes)


def _expand_reduced(g, src_shape, axes, keepdims):
    if not keepdims:
        shape = list(src_shape)
        for ax in axes:
            shape[ax] = 1
        g = g.reshape(shape)
    return np.broadcast_to(g, src_shape)


def sum_(a, axes=None, keepdims=False):
    axes = _normalize_axes(axes, a.ndim)
    src_shape = a.shape
    out = a.data.sum(axis=axes, keepdims=keepdims)
    return _from_op(out, (a,), lambda g: (_expand_reduced(g, src_shape, axes, keepdims).copy(),))


def mean(a, axes=None, keepdims=False):
    axes = _normalize_axes(axes, a.ndim)
    src_shape = a.shape
    n = 1
    for ax in axes:
        n *= src_shape[ax]
    out = a.data.mean(axis=axes, keepdims=keepdims)
    return _from_op(out, (a,), lambda g: (_expand_reduced(g, src_shape, axes, keepdims) / n,))


def max_(a, axes=None, keepdims=False):
    """Reduction max; ties share the upstream gradient evenly."""
    axes = _normalize_axes(axes, a.ndim)
    src_shape = a.shape
    ad = a.data
    out = ad.max(axis=axes, keepdims=keepdims)
    expanded = _expand_reduced(out, src_shape, axes, keepdims)
    mask = ad == expanded
    counts = mask.sum(axis=axes, keepdims=True)

    def back(g):
        ge = _expand_reduced(g, src_shape, axes, keepdims)
        return (mask * (ge / counts),)

    return _from_op(out, (a,), back)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul: expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _from_op(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


# ---------------------------------------------------------------------------
# convolутion and pooling kernels
# ---------------------------------------------------------------------------

def conv2d(x, weight, bias=None, stride=1, padding=0):
    """Cross-correlation of B×C×H×W input with O×C×kh×kw kernels.

    Output spatial extent is floor((H - k + 2P)/S) + 1 per axis. Bias, when
    given, is one value per output channel.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d: input {x.shape} and kernel {weight.shape} must be 4-D")
    B, C, H, W = x.shape
    O, Cw, kh, kw = weight.shape
    if Cw != C:
        raise ShapeError(f"conv2d: input has {C} channels, kernel expects {Cw}")
    S, P = int(stride), int(padding)
    if S < 1 or P < 0:
        raise ShapeError("conv2d: stride must be >= 1 and padding >= 0")
    if kh > H + 2 * P or kw > W + 2 * P:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} exceeds padded input {H + 2 * P}x{W + 2 * P}")
    Ho = (H - kh + 2 * P) // S + 1
    Wo = (W - kw + 2 * P) // S + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (P, P), (P, P))) if P else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::S, ::S]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(B * Ho * Wo, C * kh * kw)
    wmat = weight.data.reshape(O, C * kh * kw)
    out = (cols @ wmat.T).reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)
    if bias is not None:
        if bias.shape != (O,):
            raise ShapeError(f"conv2d: bias shape {bias.shape} != ({O},)")
        out = out + bias.data.reshape(1, O, 1, 1)

    wdata = weight.data

    def back(g):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(B * Ho * Wo, O)
        dw = (gmat.T @ cols).reshape(O, C, kh, kw)
        dxp = np.zeros((B, C, H + 2 * P, W + 2 * P), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                contrib = np.tensordot(g, wdata[:, :, i, j], axes=([1], [0]))
                dxp[:, :, i:i + S * Ho:S, j:j + S * Wo:S] += contrib.transpose(0, 3, 1, 2)
        dx = dxp[:, :, P:P + H, P:P + W] if P else dxp
        grads = [dx, dw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _from_op(np.ascontiguousarray(out), parents, back)


def conv3d_pointwise(x, weight, bias=None):
    """Cross-correlation of B×C×D×H×W input with O×C×p×1×1 kernels.

    Contracts only the third axis (D' = D - p + 1, stride 1, no padding);
    the trailing spatial axes pass through untouched.
    """
    if x.ndim != 5 or weight.ndim != 5:
        raise ShapeError(f"conv3d_pointwise: input {x.shape} and kernel {weight.shape} must be 5-D")
    B, C, D, H, W = x.shape
    O, Cw, p, k1, k2 = weight.shape
    if Cw != C:
        raise ShapeError(f"conv3d_pointwise: input has {C} channels, kernel expects {Cw}")
    if k1 != 1 or k2 != 1:
        raise ShapeError(f"conv3d_pointwise: kernel spatial extent must be 1x1, got {k1}x{k2}")
    if p > D:
        raise ShapeError(f"conv3d_pointwise: kernel depth {p} exceeds input depth {D}")
    Do = D - p + 1

    win = sliding_window_view(x.data, p, axis=2)  # B,C,Do,H,W,p
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 4, 1, 5)).reshape(B * Do * H * W, C * p)
    wmat = weight.data.reshape(O, C * p)
    out = (cols @ wmat.T).reshape(B, Do, H, W, O).transpose(0, 4, 1, 2, 3)
    if bias is not None:
        if bias.shape != (O,):
            raise ShapeError(f"conv3d_pointwise: bias shape {bias.shape} != ({O},)")
        out = out + bias.data.reshape(1, O, 1, 1, 1)

    wfold = weight.data[:, :, :, 0, 0]  # O,C,p

    def back(g):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 4, 1)).reshape(B * Do * H * W, O)
        dw = (gmat.T @ cols).reshape(O, C, p)[:, :, :, None, None]
        dx = np.zeros((B, C, D, H, W), dtype=g.dtype)
        for dp in range(p):
            contrib = np.tensordot(g, wfold[:, :, dp], axes=([1], [0]))  # B,Do,H,W,C
            dx[:, :, dp:dp + Do] += contrib.transpose(0, 4, 1, 2, 3)
        grads = [dx, dw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3, 4)))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _from_op(np.ascontiguousarray(out), parents, back)


def avg_pool2d(x, kernel, stride=1, padding=0):
    """Mean over kernel×kernel windows; pad zeros count toward the mean."""
    if x.ndim != 4:
        raise ShapeError(f"avg_pool2d: expects 4-D input, got {x.shape}")
    B, C, H, W = x.shape
    k, S, P = int(kernel), int(stride), int(padding)
    if k > H + 2 * P or k > W + 2 * P:
        raise ShapeError(f"avg_pool2d: window {k} exceeds padded extent {H + 2 * P}x{W + 2 * P}")
    Ho = (H - k + 2 * P) // S + 1
    Wo = (W - k + 2 * P) // S + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (P, P), (P, P))) if P else x.data
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::S, ::S]
    out = win.mean(axis=(4, 5))
    inv = 1.0 / (k * k)

    def back(g):
        dxp = np.zeros((B, C, H + 2 * P, W + 2 * P), dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + S * Ho:S, j:j + S * Wo:S] += g * inv
        return (dxp[:, :, P:P + H, P:P + W] if P else dxp,)

    return _from_op(np.ascontiguousarray(out), (x,), back)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

class GradCheckReport:
    """Outcome of an analytic-vs-central-difference comparison."""

    def __init__(self, max_rel_err, tol, per_input):
        self.max_rel_err = max_rel_err
        self.tol = tol
        self.per_input = per_input

    @property
    def passed(self):
        return bool(self.max_rel_err <= self.tol)

    def __repr__(self):
        status = "pass" if self.passed else "FAIL"
        return f"GradCheckReport({status}, max_rel_err={self.max_rel_err:.3e}, tol={self.tol:.1e})"


def _rel_err(analytic, numeric):
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return np.abs(analytic - numeric) / denom


def grad_check(f, inputs, h=1e-4, tol=1e-4, dtype=np.float64):
    """Compare analytic gradients of scalar-valued `f` against central differences.

    `f` receives one Tensor per entry of `inputs`. Analytic gradients are
    computed in `dtype`; the finite-difference reference always evaluates in
    float64 at the same (dtype-rounded) point, so a float32 graph is judged
    against a trustworthy numeric oracle.
    """
    single = not isinstance(inputs, (list, tuple))
    arrays = [np.asarray(x, dtype=dtype) for x in ([inputs] if single else list(inputs))]

    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = f(*tensors)
    if out.size != 1:
        raise ContractError("grad_check: f must be scalar-valued")
    backward(out)
    analytic = [np.zeros_like(a, dtype=np.float64) if t.grad is None else t.grad.astype(np.float64)
                for a, t in zip(arrays, tensors)]

    probe = [a.astype(np.float64) for a in arrays]
    numeric = [np.zeros_like(a) for a in probe]
    with no_grad():
        for which, arr in enumerate(probe):
            flat = arr.reshape(-1)
            num = numeric[which].reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = float(f(*[Tensor(a) for a in probe]).data)
                flat[i] = orig - h
                fm = float(f(*[Tensor(a) for a in probe]).data)
                flat[i] = orig
                num[i] = (fp - fm) / (2.0 * h)

    per_input = [float(_rel_err(a, n).max()) if a.size else 0.0 for a, n in zip(analytic, numeric)]
    max_err = max(per_input) if per_input else 0.0
    return GradCheckReport(max_err, tol, per_input)


def grad_check_params(loss_fn, params, h=1e-4, tol=1e-4, fd_loss_fn=None, fd_params=None,
                      coord_stride=1, coord_offset=0):
    """Check gradients of parameters used in place by a closure.

    `loss_fn()` evaluates a scalar Tensor from `params` (e.g. a model
    forward); analytic gradients come from one backward pass. The numeric
    reference perturbs `fd_params` coordinate-wise and re-evaluates
    `fd_loss_fn` — pass a float64 mirror of the same function when `params`
    are float32, otherwise both default to the analytic side. `fd_params`
    must align with `params` one-to-one in order and shape.

    `coord_stride`/`coord_offset` restrict the finite-difference probes to
    every stride-th coordinate (counted across all parameters); rotating the
    offset over repeated calls covers every coordinate while bounding the
    cost of one call.
    """
    for p in params:
        p.zero_grad()
    out = loss_fn()
    if out.size != 1:
        raise ContractError("grad_check_params: loss_fn must be scalar-valued")
    backward(out)
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.astype(np.float64) for p in params]

    if fd_loss_fn is None:
        fd_loss_fn, fd_params = loss_fn, params
    per_input = []
    worst = 0.0
    counter = 0
    with no_grad():
        for p, ana in zip(fd_params, analytic):
            err = 0.0
            flat_ana = ana.reshape(-1)
            for i in range(p.size):
                take = (counter - coord_offset) % coord_stride == 0
                counter += 1
                if not take:
                    continue
                orig = p.data.flat[i]
                p.data.flat[i] = orig + h
                fp = float(fd_loss_fn().data)
                p.data.flat[i] = orig - h
                fm = float(fd_loss_fn().data)
                p.data.flat[i] = orig
                num = (fp - fm) / (2.0 * h)
                err = max(err, float(_rel_err(flat_ana[i], num)))
            per_input.append(err)
            worst = max(worst, err)
    return GradCheckReport(worst, tol, per_input)
