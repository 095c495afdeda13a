"""Dense NCHW tensors with reverse-mode automatic differentiation.

Every differentiable op records its parents and a closure that maps the
gradient of its output to gradients of its inputs.  ``Tensor.backward`` walks
the recorded graph in reverse topological order.
"""

from __future__ import annotations

import contextlib
import logging
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

logger = logging.getLogger(__name__)

_GRAD_ENABLED = True
_CHECK_FINITE = True
_OP_COUNT = 0


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def finite_checks(enabled: bool) -> Iterator[None]:
    global _CHECK_FINITE
    prev = _CHECK_FINITE
    _CHECK_FINITE = enabled
    try:
        yield
    finally:
        _CHECK_FINITE = prev


@dataclass
class OpCounter:
    count: int = 0


@contextlib.contextmanager
def count_ops() -> Iterator[OpCounter]:
    """Count primitive ops executed inside the block."""
    start = _OP_COUNT
    counter = OpCounter()
    try:
        yield counter
    finally:
        counter.count = _OP_COUNT - start


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None):
        return tsum(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self) -> None:
        backward(self)


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else np.float64))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    global _OP_COUNT
    _OP_COUNT += 1
    out = Tensor(data)
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _topo_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` through grad-requiring parents, parents first."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Fill ``.grad`` of every tensor reachable from ``loss`` with d(loss)/d(tensor).

    Gradients accumulate across calls; reset them with ``zero_grad``.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = _topo_order(loss)
    if not np.isfinite(loss.data).all():
        # name the earliest op whose output went non-finite
        origin = next((t for t in order if not np.isfinite(t.data).all()), loss)
        raise FloatingPointError(f"loss is not finite (first non-finite value produced by op '{origin.op}')")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if _CHECK_FINITE and not np.isfinite(pg).all():
                raise FloatingPointError(f"non-finite gradient produced by op '{node.op}'")
            prev = grads.get(id(p))
            grads[id(p)] = pg if prev is None else prev + pg


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(ad * bd, (a, b), bw, "mul")


def square(x: Tensor) -> Tensor:
    xd = x.data

    def bw(g):
        return (2.0 * xd * g,)

    return _make(xd * xd, (x,), bw, "square")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)

    def bw(g):
        # zero subgradient at 0 keeps masked-out entries finite
        return (np.divide(g * 0.5, out, out=np.zeros_like(out), where=out > 0),)

    return _make(out, (x,), bw, "sqrt")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _make(np.log(xd), (x,), lambda g: (g / xd,), "log")


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # tanh form: overflow-free and vectorized for float32
    out = np.multiply(x, 0.5, dtype=x.dtype)
    np.tanh(out, out=out)
    out *= 0.5
    out += 0.5
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid_np(x.data)
    return _make(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def silu(x: Tensor) -> Tensor:
    """x * sigmoid(x), elementwise."""
    xd = x.data
    s = _sigmoid_np(xd)

    def bw(g):
        t = 1.0 - s
        t *= xd
        t += 1.0
        t *= s
        t *= g
        return (t,)

    return _make(xd * s, (x,), bw, "silu")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    shifted = xd - xd.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    sm = np.exp(out)

    def bw(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), bw, "log_softmax")


# ------------------------------------------------------------------ structure


def tsum(x: Tensor, axis=None) -> Tensor:
    shape = x.shape
    out = x.data.sum(axis=axis)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _make(np.asarray(out), (x,), bw, "sum")


def mean(x: Tensor) -> Tensor:
    return mul(tsum(x), 1.0 / x.data.size)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    inv = np.argsort(axes)
    return _make(
        np.ascontiguousarray(x.data.transpose(axes)),
        (x,),
        lambda g: (np.ascontiguousarray(g.transpose(inv)),),
        "transpose",
    )


def _is_basic(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, type(Ellipsis), type(None))) for i in items)


def index(x: Tensor, idx) -> Tensor:
    shape, dtype = x.shape, x.dtype
    basic = _is_basic(idx)

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _make(np.array(x.data[idx]), (x,), bw, "index")


def concat_channels(inputs: Sequence[Tensor]) -> Tensor:
    """Concatenate NCHW tensors along the channel axis, in argument order."""
    if not inputs:
        raise ShapeError("concat_channels needs at least one input")
    n, _, h, w = inputs[0].shape
    for i, t in enumerate(inputs):
        if t.ndim != 4 or (t.shape[0], t.shape[2], t.shape[3]) != (n, h, w):
            raise ShapeError(
                f"concat_channels input {i} has shape {t.shape}, expected N,H,W = {(n, h, w)}"
            )
    if len(inputs) == 1:
        return inputs[0]
    sizes = [t.shape[1] for t in inputs]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(sizes)))

    return _make(np.concatenate([t.data for t in inputs], axis=1), tuple(inputs), bw, "concat")


def split_channels(x: Tensor, sizes: Sequence[int]) -> list[Tensor]:
    """Split along channels into consecutive pieces of the given sizes."""
    if sum(sizes) != x.shape[1]:
        raise ShapeError(f"split sizes {list(sizes)} do not sum to channel count {x.shape[1]}")
    out = []
    start = 0
    for s in sizes:
        out.append(channel_slice(x, start, start + s))
        start += s
    return out


def channel_slice(x: Tensor, start: int, stop: int) -> Tensor:
    shape, dtype = x.shape, x.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        full[:, start:stop] = g
        return (full,)

    return _make(x.data[:, start:stop], (x,), bw, "channel_slice")


# ------------------------------------------------------------- convolutional


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d input must be N,C,H,W; got shape {x.shape}")
    n, c, h, w = x.shape
    cout, cin, kh, kw = weight.shape
    if cin != c:
        raise ShapeError(f"conv2d channel mismatch: input C={c}, weight Cin={cin}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d needs stride >= 1 and padding >= 0, got {stride}, {padding}")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ShapeError(f"conv2d kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}")
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    xd, wd = x.data, weight.data
    w2 = wd.reshape(cout, -1)

    if kh == 1 and kw == 1 and padding == 0:
        xs = xd if stride == 1 else xd[:, :, ::stride, ::stride]
        cols = np.ascontiguousarray(xs).reshape(n, c, ho * wo)
    else:
        xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
        cols = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(n, c * kh * kw, ho * wo)
    out = np.matmul(w2, cols)
    if bias is not None:
        out += bias.data.reshape(1, cout, 1)
    out = out.reshape(n, cout, ho, wo)

    def bw(g):
        g3 = g.reshape(n, cout, ho * wo)
        gw = np.matmul(g3, cols.transpose(0, 2, 1)).sum(axis=0).reshape(wd.shape) if weight.requires_grad else None
        gb = g3.sum(axis=(0, 2)) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = np.matmul(w2.T, g3)
            if kh == 1 and kw == 1 and padding == 0:
                if stride == 1:
                    gx = gcols.reshape(n, c, h, w)
                else:
                    gx = np.zeros_like(xd)
                    gx[:, :, ::stride, ::stride] = gcols.reshape(n, c, ho, wo)
            else:
                gcols = gcols.reshape(n, c, kh, kw, ho, wo)
                gxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=xd.dtype)
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += gcols[:, :, i, j]
                gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, bw, "conv2d")


@dataclass
class BatchNormState:
    """Running statistics of a batch-norm layer."""

    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.03
    eps: float = 1e-5
    num_batches: int = field(default=0)


def _channel_sum(a: np.ndarray) -> np.ndarray:
    n, c = a.shape[:2]
    return a.reshape(n, c, -1).sum(axis=2).sum(axis=0)


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BatchNormState,
    training: bool = True,
    update_stats: bool = True,
) -> Tensor:
    """Per-channel normalization over N, H, W.

    In training mode batch statistics are used and, when ``update_stats`` is
    set, folded into ``state`` by exponential moving average.
    """
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm2d parameters must have shape ({c},); got {gamma.shape}, {beta.shape}")
    xd = x.data
    gd = gamma.data.reshape(1, c, 1, 1)
    bd = beta.data.reshape(1, c, 1, 1)
    eps = state.eps
    if training:
        m = n * h * w
        if m < 2:
            raise ShapeError(f"batchnorm2d training needs N*H*W >= 2, got {m}")
        mu = _channel_sum(xd) / m
        xhat = xd - mu.reshape(1, c, 1, 1)
        var = _channel_sum(xhat * xhat) / m
        if not np.isfinite(var).all():
            raise FloatingPointError("batchnorm2d: non-finite batch variance")
        if update_stats:
            mom = state.momentum
            state.mean = ((1 - mom) * state.mean + mom * mu).astype(state.mean.dtype)
            state.var = ((1 - mom) * state.var + mom * var * m / (m - 1)).astype(state.var.dtype)
            state.num_batches += 1
        inv = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
        xhat *= inv.reshape(1, c, 1, 1)
        out = xhat * gd
        out += bd

        def bw(g):
            gb = _channel_sum(g)
            gg = _channel_sum(g * xhat)
            gx = None
            if x.requires_grad:
                # d/dx of gamma * (x - mu) / sigma with batch statistics
                gx = xhat * (gg / m).reshape(1, c, 1, 1)
                np.subtract(g, gx, out=gx)
                gx -= (gb / m).reshape(1, c, 1, 1)
                gx *= (gamma.data * inv).reshape(1, c, 1, 1)
            return gx, (gg if gamma.requires_grad else None), (gb if beta.requires_grad else None)

    else:
        inv = (1.0 / np.sqrt(state.var + eps)).astype(xd.dtype)
        xhat = (xd - state.mean.reshape(1, c, 1, 1).astype(xd.dtype)) * inv.reshape(1, c, 1, 1)
        out = xhat * gd + bd

        def bw(g):
            gg = _channel_sum(g * xhat) if gamma.requires_grad else None
            gb = _channel_sum(g) if beta.requires_grad else None
            gx = g * (gd * inv.reshape(1, c, 1, 1)) if x.requires_grad else None
            return gx, gg, gb

    return _make(out.astype(xd.dtype, copy=False), (x, gamma, beta), bw, "batchnorm2d")


def maxpool2d(x: Tensor, k: int, stride: int | None = None, padding: int = 0) -> Tensor:
    """Max pooling; padded cells hold -inf, gradient ties go to the first row-major max."""
    stride = k if stride is None else stride
    n, c, h, w = x.shape
    if h + 2 * padding < k or w + 2 * padding < k:
        raise ShapeError(f"maxpool2d kernel {k} larger than padded input {h + 2 * padding}x{w + 2 * padding}")
    ho = conv_output_size(h, k, stride, padding)
    wo = conv_output_size(w, k, stride, padding)
    xd = x.data
    if k == 1 and padding == 0:
        out = np.ascontiguousarray(xd[:, :, ::stride, ::stride])

        def bw1(g):
            if stride == 1:
                return (g,)
            full = np.zeros_like(xd)
            full[:, :, ::stride, ::stride] = g
            return (full,)

        return _make(out, (x,), bw1, "maxpool2d")

    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=-np.inf) if padding else xd
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    if stride == k and padding == 0 and h % k == 0 and w % k == 0:
        # non-overlapping windows: cheaper reshape path
        flat = xd.reshape(n, c, ho, k, wo, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, k * k)
    else:
        flat = win.reshape(n, c, ho, wo, k * k)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gxp = np.zeros(xp.shape, dtype=xd.dtype)
        for off in range(k * k):
            i, j = divmod(off, k)
            hit = arg == off
            if hit.any():
                gxp[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += np.where(hit, g, 0)
        return (gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp,)

    return _make(out, (x,), bw, "maxpool2d")


def avgpool2d(x: Tensor, k: int) -> Tensor:
    """Non-overlapping k x k average pooling (stride k)."""
    n, c, h, w = x.shape
    if h % k or w % k:
        raise ShapeError(f"avgpool2d needs H, W divisible by {k}; got {h}x{w}")
    out = x.data.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))

    def bw(g):
        return (np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k),)

    return _make(out, (x,), bw, "avgpool2d")


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    """Replicate each cell into a factor x factor block."""
    if factor < 1:
        raise ShapeError(f"upsample factor must be positive, got {factor}")
    if factor == 1:
        return x
    n, c, h, w = x.shape
    out = np.broadcast_to(x.data[:, :, :, None, :, None], (n, c, h, factor, w, factor)).reshape(n, c, h * factor, w * factor)

    def bw(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return _make(out, (x,), bw, "upsample")


def resize_nearest(x: Tensor, size: tuple[int, int]) -> Tensor:
    """Nearest-neighbour resize for integer up- or down-scaling factors."""
    h, w = x.shape[2:]
    th, tw = size
    if (th, tw) == (h, w):
        return x
    if th >= h and th % h == 0 and tw % w == 0 and th // h == tw // w:
        return upsample_nearest(x, th // h)
    if h % th == 0 and w % tw == 0 and h // th == w // tw:
        f = h // th
        return maxpool2d(x, 1, stride=f) if f > 1 else x
    raise ShapeError(f"cannot nearest-resize {h}x{w} to {th}x{tw}")


# ---------------------------------------------------------------- gradcheck


@dataclass
class GradCheckReport:
    max_rel_error: float
    errors: dict[str, np.ndarray]
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def grad_check(
    builder: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    floor: float | None = None,
) -> GradCheckReport:
    """Compare analytic gradients of ``builder(*inputs)`` with central differences.

    Relative error per element is ``|a - n| / max(|a|, |n|, floor)``.  The
    default floor is ``max(1e-6 * max(1, |f|), 1e-5 * max|n|)`` per input: a
    central difference carries rounding noise that scales with the magnitudes
    flowing through the graph, so entries whose true gradient is exactly zero
    would otherwise compare noise against noise.
    """
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    loss = builder(*inputs)
    base_floor = 1e-6 * max(1.0, abs(float(loss.data))) if floor is None else floor
    loss.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]
    errors: dict[str, np.ndarray] = {}
    worst = 0.0
    with no_grad():
        for k, (t, a) in enumerate(zip(inputs, analytic)):
            flat = t.data.reshape(-1)
            num = np.zeros(flat.size)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = float(builder(*inputs).data)
                flat[i] = orig - h
                fm = float(builder(*inputs).data)
                flat[i] = orig
                num[i] = (fp - fm) / (2 * h)
            af = a.reshape(-1)
            fl = base_floor if floor is not None or not num.size else max(base_floor, 1e-5 * float(np.abs(num).max()))
            err = np.abs(af - num) / np.maximum(np.maximum(np.abs(af), np.abs(num)), fl)
            errors[t.name or f"input{k}"] = err.reshape(t.shape)
            if err.size:
                worst = max(worst, float(err.max()))
    return GradCheckReport(worst, errors, tol)


def masked_sigmoid(x: Tensor, mask: np.ndarray) -> Tensor:
    """Apply a sigmoid where ``mask`` is true (broadcast over leading axes), identity elsewhere."""
    xd = x.data
    s = _sigmoid_np(xd)
    out = np.where(mask, s, xd)
    local = np.where(mask, s * (1.0 - s), 1.0)
    return _make(out, (x,), lambda g: (g * local,), "masked_sigmoid")
