"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every op computes its result with numpy, records a closure that maps the
output gradient to input gradients, and (when a counter is active) tallies
its floating-point work.  The graph is rebuilt on every forward pass and
released by :func:`backward`.
"""

from __future__ import annotations

import builtins
import contextlib
import contextvars
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np
from scipy.special import expit

__all__ = [
    "Tensor", "Module", "ShapeError", "DomainError", "FlopCounter",
    "tensor", "parameter", "count_flops", "no_grad", "backward",
    "add", "sub", "mul", "div", "neg", "recip", "exp", "log", "silu",
    "softplus", "sigmoid", "exprel", "power", "elementwise",
    "matmul", "sum", "mean", "max", "reduce",
    "reshape", "transpose", "take", "concat", "flip", "getitem",
    "layer_norm", "rms_norm", "depthwise_conv1d", "linear_scan", "selective_scan_fused",
    "cross_entropy", "gradcheck",
]

CHECK_FINITE = True

try:  # optional compiled kernel for the sequential selective scan
    from . import _fastscan
except ImportError:  # pragma: no cover - numba absent
    _fastscan = None

# set False to force the pure-numpy selective scan
FAST_SCAN = True


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested op."""


class DomainError(ValueError):
    """An input lies outside the mathematical domain of the op."""


# --------------------------------------------------------------------------
# work accounting
# --------------------------------------------------------------------------


@dataclass
class FlopCounter:
    """Per-run accumulator of forward work.

    ``macs`` counts multiply-adds of contractions (matmul, conv, scan);
    ``flops`` counts every floating-point operation with a multiply-add
    worth 2 and each elementwise evaluation worth 1.
    """

    flops: int = 0
    macs: int = 0
    by_op: dict = field(default_factory=dict)

    def add(self, op: str, flops: int, macs: int = 0) -> None:
        self.flops += int(flops)
        self.macs += int(macs)
        f, m = self.by_op.get(op, (0, 0))
        self.by_op[op] = (f + int(flops), m + int(macs))


_counter: contextvars.ContextVar[FlopCounter | None] = contextvars.ContextVar(
    "flop_counter", default=None
)
_grad_enabled: contextvars.ContextVar[bool] = contextvars.ContextVar(
    "grad_enabled", default=True
)


@contextlib.contextmanager
def count_flops() -> Iterator[FlopCounter]:
    counter = FlopCounter()
    token = _counter.set(counter)
    try:
        yield counter
    finally:
        _counter.reset(token)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


def _tally(op: str, flops: int, macs: int = 0) -> None:
    counter = _counter.get()
    if counter is not None:
        counter.add(op, flops, macs)


# --------------------------------------------------------------------------
# tensor
# --------------------------------------------------------------------------


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item() requires a single-element tensor")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.shape[0]

    __add__ = lambda self, o: add(self, o)  # noqa: E731
    __radd__ = lambda self, o: add(o, self)  # noqa: E731
    __sub__ = lambda self, o: sub(self, o)  # noqa: E731
    __rsub__ = lambda self, o: sub(o, self)  # noqa: E731
    __mul__ = lambda self, o: mul(self, o)  # noqa: E731
    __rmul__ = lambda self, o: mul(o, self)  # noqa: E731
    __truediv__ = lambda self, o: div(self, o)  # noqa: E731
    __rtruediv__ = lambda self, o: div(o, self)  # noqa: E731
    __matmul__ = lambda self, o: matmul(self, o)  # noqa: E731
    __neg__ = lambda self: neg(self)  # noqa: E731
    __getitem__ = lambda self, key: getitem(self, key)  # noqa: E731

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return max(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def backward(self) -> None:
        backward(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn: Callable, op: str) -> Tensor:
    if CHECK_FINITE and not np.isfinite(data).all():
        raise FloatingPointError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    if _grad_enabled.get() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(*shapes) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(*shapes)
    except ValueError as exc:
        raise ShapeError(f"operands not broadcastable: {shapes}") from exc


# --------------------------------------------------------------------------
# backward
# --------------------------------------------------------------------------


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
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
    """Populate ``.grad`` of every leaf reachable from the scalar ``loss``.

    Leaf gradients accumulate across calls; interior nodes are released after
    their closure runs, so the graph can be traversed only once.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, gp in zip(node._parents, node._backward(g)):
            if gp is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + gp if key in grads else gp
        node._parents = ()
        node._backward = None


# --------------------------------------------------------------------------
# elementwise
# --------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    out = a.data + b.data
    _tally("add", out.size)
    sa, sb = a.shape, b.shape
    return _make(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    out = a.data - b.data
    _tally("sub", out.size)
    sa, sb = a.shape, b.shape
    return _make(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    ad, bd = a.data, b.data
    out = ad * bd
    _tally("mul", out.size)

    def bw(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _make(out, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    if np.any(b.data == 0):
        raise DomainError("division by zero")
    ad, bd = a.data, b.data
    out = ad / bd
    _tally("div", out.size)

    def bw(g):
        return (
            _unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None,
        )

    return _make(out, (a, b), bw, "div")


def neg(x) -> Tensor:
    x = _t(x)
    _tally("neg", x.size)
    return _make(-x.data, (x,), lambda g: (-g,), "neg")


def recip(x) -> Tensor:
    x = _t(x)
    if np.any(x.data == 0):
        raise DomainError("reciprocal of zero")
    out = 1.0 / x.data
    _tally("recip", out.size)
    return _make(out, (x,), lambda g: (-g * out * out,), "recip")


def exp(x) -> Tensor:
    x = _t(x)
    out = np.exp(x.data)
    _tally("exp", out.size)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x) -> Tensor:
    x = _t(x)
    if np.any(x.data <= 0):
        raise DomainError("log of non-positive value")
    xd = x.data
    _tally("log", xd.size)
    return _make(np.log(xd), (x,), lambda g: (g / xd,), "log")


def sigmoid(x) -> Tensor:
    x = _t(x)
    s = expit(x.data)
    _tally("sigmoid", s.size)
    return _make(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def silu(x) -> Tensor:
    x = _t(x)
    xd = x.data
    s = expit(xd)
    _tally("silu", xd.size)
    return _make(xd * s, (x,), lambda g: (g * s * (1.0 + xd * (1.0 - s)),), "silu")


def softplus(x) -> Tensor:
    x = _t(x)
    xd = x.data
    _tally("softplus", xd.size)
    return _make(np.logaddexp(0.0, xd), (x,), lambda g: (g * expit(xd),), "softplus")


_EXPREL_SERIES = 1e-8
_EXPREL_GRAD_SERIES = 1e-3


def _exprel(z: np.ndarray) -> np.ndarray:
    small = np.abs(z) < _EXPREL_SERIES
    safe = np.where(small, 1.0, z)
    return np.where(small, 1.0 + z / 2.0 + z * z / 6.0, np.expm1(safe) / safe)


def _exprel_grad(z: np.ndarray, value: np.ndarray) -> np.ndarray:
    small = np.abs(z) < _EXPREL_GRAD_SERIES
    safe = np.where(small, 1.0, z)
    series = 0.5 + z / 3.0 + z * z / 8.0 + z * z * z / 30.0
    return np.where(small, series, (np.exp(safe) - value) / safe)


def exprel(x) -> Tensor:
    """(e^x - 1) / x, continuous through x = 0."""
    x = _t(x)
    xd = x.data
    out = _exprel(xd)
    _tally("exprel", out.size)
    return _make(out, (x,), lambda g: (g * _exprel_grad(xd, out),), "exprel")


def power(x, p) -> Tensor:
    """x ** p for a constant (array) exponent ``p``."""
    x = _t(x)
    xd = x.data
    pd = np.asarray(p, dtype=np.float64)
    out = np.power(xd, pd)
    _tally("power", out.size)
    return _make(out, (x,), lambda g: (_unbroadcast(g * pd * np.power(xd, pd - 1.0), xd.shape),), "power")


_UNARY = {"exp": exp, "log": log, "silu": silu, "softplus": softplus, "sigmoid": sigmoid,
          "neg": neg, "recip": recip, "exprel": exprel}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(op: str, *operands) -> Tensor:
    """Dispatch a named pointwise op."""
    if op in _UNARY:
        (x,) = operands
        return _UNARY[op](x)
    if op in _BINARY:
        a, b = operands
        return _BINARY[op](a, b)
    raise ValueError(f"unknown elementwise op {op!r}")


# --------------------------------------------------------------------------
# contractions and reductions
# --------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast as a batch."""
    a, b = _t(a), _t(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    _broadcast_shape(a.shape[:-2], b.shape[:-2])
    ad, bd = a.data, b.data
    out = np.matmul(ad, bd)
    macs = out.size * ad.shape[-1]
    _tally("matmul", 2 * macs, macs)

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return ga, gb

    return _make(out, (a, b), bw, "matmul")


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def sum(x, axis=None, keepdims=False) -> Tensor:  # noqa: A001
    x = _t(x)
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)
    _tally("sum", x.size)
    shape = x.shape

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return _make(np.asarray(out), (x,), bw, "sum")


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = _t(x)
    axes = _norm_axes(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    if n == 0:
        raise ShapeError("mean over an empty axis")
    out = x.data.mean(axis=axes, keepdims=keepdims)
    _tally("mean", x.size)
    shape = x.shape

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, shape),)

    return _make(np.asarray(out), (x,), bw, "mean")


def max(x, axis=None, keepdims=False) -> Tensor:  # noqa: A001
    """Maximum along one axis; the gradient goes to the first maximal entry."""
    x = _t(x)
    xd = x.data
    if axis is None:
        xd = xd.reshape(-1)
        ax = 0
    else:
        ax = axis % x.ndim
    if xd.shape[ax] == 0:
        raise ShapeError("max over an empty axis")
    idx = np.expand_dims(np.argmax(xd, axis=ax), ax)
    out = np.take_along_axis(xd, idx, axis=ax)
    _tally("max", xd.size)
    if axis is None:
        out = out.reshape((1,) * x.ndim if keepdims else ())
    elif not keepdims:
        out = np.squeeze(out, axis=ax)
    shape, flat_shape = x.shape, xd.shape

    def bw(g):
        gx = np.zeros(flat_shape)
        np.put_along_axis(gx, idx, np.reshape(g, idx.shape), axis=ax)
        return (gx.reshape(shape),)

    return _make(out, (x,), bw, "max")


_REDUCE = {"sum": sum, "mean": mean, "max": max}


def reduce(op: str, x, axis=None, keepdims=False) -> Tensor:
    if op not in _REDUCE:
        raise ValueError(f"unknown reduction {op!r}")
    return _REDUCE[op](x, axis, keepdims)


# --------------------------------------------------------------------------
# shape ops
# --------------------------------------------------------------------------


def reshape(x, shape) -> Tensor:
    x = _t(x)
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc
    return _make(out, (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x, axes=None) -> Tensor:
    x = _t(x)
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(a % x.ndim for a in axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(x, key) -> Tensor:
    x = _t(x)
    out = x.data[key]
    shape = x.shape

    def bw(g):
        gx = np.zeros(shape)
        np.add.at(gx, key, g)
        return (gx,)

    return _make(np.array(out, dtype=np.float64), (x,), bw, "getitem")


def take(x, indices, axis: int) -> Tensor:
    """Gather entries of ``x`` along ``axis``; repeated indices accumulate gradient."""
    x = _t(x)
    idx = np.asarray(indices, dtype=np.intp)
    ax = axis % x.ndim
    if idx.size and (idx.min() < -x.shape[ax] or idx.max() >= x.shape[ax]):
        raise ShapeError(f"index out of range for axis of length {x.shape[ax]}")
    out = np.take(x.data, idx, axis=ax)
    shape = x.shape

    def bw(g):
        gx = np.zeros(shape)
        moved = np.moveaxis(gx, ax, 0)
        gm = np.moveaxis(g, list(range(ax, ax + idx.ndim)), list(range(idx.ndim)))
        np.add.at(moved, idx, gm)
        return (gx,)

    return _make(out, (x,), bw, "take")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_t(t) for t in tensors]
    if not ts:
        raise ShapeError("concat of no tensors")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc
    splits = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _make(out, tuple(ts), lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def flip(x, axis: int) -> Tensor:
    x = _t(x)
    return _make(np.flip(x.data, axis=axis).copy(), (x,), lambda g: (np.flip(g, axis=axis),), "flip")


# --------------------------------------------------------------------------
# fused layers
# --------------------------------------------------------------------------


def layer_norm(x, weight=None, bias=None, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    x = _t(x)
    parents = [x]
    w = b = None
    if weight is not None:
        w = _t(weight)
        parents.append(w)
    if bias is not None:
        b = _t(bias)
        parents.append(b)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * w.data if w is not None else xhat
    if b is not None:
        out = out + b.data
    _tally("layer_norm", 8 * xd.size)

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        gxhat = g * w.data if w is not None else g
        gx = inv * (gxhat - gxhat.mean(-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(-1, keepdims=True))
        grads = [gx]
        if w is not None:
            grads.append((g * xhat).sum(axis=lead))
        if b is not None:
            grads.append(g.sum(axis=lead))
        return tuple(grads)

    return _make(out, tuple(parents), bw, "layer_norm")


def rms_norm(x, weight=None, eps: float = 1e-5) -> Tensor:
    """Divide the last axis by its root-mean-square, then scale."""
    x = _t(x)
    parents = [x]
    w = None
    if weight is not None:
        w = _t(weight)
        parents.append(w)
    xd = x.data
    inv = 1.0 / np.sqrt((xd * xd).mean(axis=-1, keepdims=True) + eps)
    xhat = xd * inv
    out = xhat * w.data if w is not None else xhat
    _tally("rms_norm", 5 * xd.size)

    def bw(g):
        gxhat = g * w.data if w is not None else g
        gx = inv * (gxhat - xhat * (gxhat * xhat).mean(-1, keepdims=True))
        if w is None:
            return (gx,)
        return gx, (g * xhat).sum(axis=tuple(range(g.ndim - 1)))

    return _make(out, tuple(parents), bw, "rms_norm")


def depthwise_conv1d(x, kernel, bias=None, causal: bool = True) -> Tensor:
    """Per-channel convolution along the sequence axis of ``x[B, L, D]``.

    ``kernel[d, j]`` weights ``x[t - j]`` (a true convolution), so with
    causal padding ``y[t]`` only sees ``x[0..t]``.  Non-causal mode centres
    the kernel and keeps length ``L``.
    """
    x, kernel = _t(x), _t(kernel)
    if x.ndim != 3 or kernel.ndim != 2 or kernel.shape[0] != x.shape[2]:
        raise ShapeError(f"conv1d expects x[B,L,D], kernel[D,k]; got {x.shape}, {kernel.shape}")
    B, L, D = x.shape
    k = kernel.shape[1]
    if k < 1:
        raise ShapeError("kernel width must be >= 1")
    left = k - 1 if causal else (k - 1) // 2
    right = k - 1 - left
    if k > L + left + right:
        raise ShapeError(f"kernel width {k} exceeds padded input length {L + left + right}")
    xp = np.pad(x.data, ((0, 0), (left, right), (0, 0)))
    kd = kernel.data
    # y[t] = sum_j k[j] * x[t - j + (k - 1 - left)]  with xp index t + (k - 1 - j)
    out = np.zeros((B, L, D))
    for j in range(k):
        s = k - 1 - j
        out += kd[:, j] * xp[:, s:s + L, :]
    parents = [x, kernel]
    b = None
    if bias is not None:
        b = _t(bias)
        parents.append(b)
        out = out + b.data
    macs = B * L * D * k
    _tally("conv1d", 2 * macs + (B * L * D if b is not None else 0), macs)

    def bw(g):
        gxp = np.zeros_like(xp)
        gk = np.zeros_like(kd)
        for j in range(k):
            s = k - 1 - j
            gxp[:, s:s + L, :] += g * kd[:, j]
            gk[:, j] = (g * xp[:, s:s + L, :]).sum(axis=(0, 1))
        grads = [gxp[:, left:left + L, :], gk]
        if b is not None:
            grads.append(g.sum(axis=(0, 1)))
        return tuple(grads)

    return _make(out, tuple(parents), bw, "conv1d")


def _scan_sequential(a: np.ndarray, u: np.ndarray) -> np.ndarray:
    h = np.empty_like(u)
    h[:, 0] = u[:, 0]
    for t in range(1, u.shape[1]):
        h[:, t] = a[:, t] * h[:, t - 1] + u[:, t]
    return h


def _scan_blelloch(a: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Work-efficient up-sweep / down-sweep over pairs (a, u).

    Pairs compose as (a1, u1) then (a2, u2) -> (a1 a2, a2 u1 + u2).  The
    sequence is padded to a power of two with the identity pair (1, 0).
    """
    L = u.shape[1]
    n = 1 << builtins.max(L - 1, 0).bit_length()
    pad = [(0, 0), (0, n - L)] + [(0, 0)] * (u.ndim - 2)
    A = np.pad(a, pad, constant_values=1.0)
    U = np.pad(u, pad, constant_values=0.0)
    a0, u0 = A.copy(), U.copy()
    levels = n.bit_length() - 1
    for d in range(levels):
        step = 1 << (d + 1)
        r = slice(step - 1, n, step)
        lft = slice((1 << d) - 1, n, step)
        U[:, r] = A[:, r] * U[:, lft] + U[:, r]
        A[:, r] = A[:, lft] * A[:, r]
    A[:, n - 1] = 1.0
    U[:, n - 1] = 0.0
    for d in reversed(range(levels)):
        step = 1 << (d + 1)
        r = slice(step - 1, n, step)
        lft = slice((1 << d) - 1, n, step)
        a_l, u_l = A[:, lft].copy(), U[:, lft].copy()
        A[:, lft], U[:, lft] = A[:, r], U[:, r]
        # prefix of right subtree = (prefix before left subtree) then (left aggregate)
        U[:, r] = a_l * U[:, r] + u_l
        A[:, r] = A[:, r] * a_l
    h = a0 * U + u0
    return h[:, :L]


_SCANS = {"sequential": _scan_sequential, "blelloch": _scan_blelloch}


def linear_scan(a, u, method: str = "sequential") -> Tensor:
    """Solve ``h[t] = a[t] * h[t-1] + u[t]`` along axis 1 with ``h[-1] = 0``.

    ``a`` broadcasts against ``u``.  The gradient is itself a scan run in
    reverse time: ``gh[t] = g[t] + a[t+1] * gh[t+1]``.
    """
    a, u = _t(a), _t(u)
    if method not in _SCANS:
        raise ValueError(f"unknown scan method {method!r}")
    if u.ndim < 2:
        raise ShapeError("linear_scan needs a time axis at position 1")
    shape = _broadcast_shape(a.shape, u.shape)
    ad = np.broadcast_to(a.data, shape)
    ud = np.broadcast_to(u.data, shape)
    run = _SCANS[method]
    h = run(ad, ud)
    n = int(np.prod(shape))
    if method == "sequential":
        _tally("scan", 2 * n, n)
    else:
        _tally("scan", 6 * n, 3 * n)

    def bw(g):
        a_next = np.concatenate([ad[:, 1:], np.zeros_like(ad[:, :1])], axis=1)
        gh = np.flip(run(np.flip(a_next, 1), np.flip(g, 1)), 1)
        h_prev = np.concatenate([np.zeros_like(h[:, :1]), h[:, :-1]], axis=1)
        return _unbroadcast(gh * h_prev, a.shape), _unbroadcast(gh, u.shape)

    return _make(h, (a, u), bw, "linear_scan")


def selective_scan_fused(x, delta, A, Bm, Cm, method: str = "sequential") -> Tensor:
    """Selective SSM in one node: ZOH per step, recurrence, readout.

    ``x, delta: [B, L, D]``, ``A: [D, N]`` (nonzero), ``Bm, Cm: [B, L, N]``.
    With ``z = delta * a``: ``A_bar = exp(z)``, ``B_bar = expm1(z) / a * b``,
    ``h[t] = A_bar h[t-1] + B_bar x[t]``, ``y[t] = sum_n C[t, n] h[t, :, n]``.
    Forward work is tallied as 10 flops (2 multiply-adds) per state entry.
    """
    x, delta, A, Bm, Cm = (_t(v) for v in (x, delta, A, Bm, Cm))
    if method not in _SCANS:
        raise ValueError(f"unknown scan method {method!r}")
    if x.ndim != 3 or delta.shape != x.shape or A.ndim != 2 or A.shape[0] != x.shape[2] \
            or Bm.shape != x.shape[:2] + (A.shape[1],) or Cm.shape != Bm.shape:
        raise ShapeError(f"selective scan shapes x{x.shape} delta{delta.shape} A{A.shape} "
                         f"B{Bm.shape} C{Cm.shape}")
    xd, dd, Ad, Bd, Cd = x.data, delta.data, A.data, Bm.data, Cm.data
    if np.any(Ad == 0):
        raise DomainError("state matrix entries must be nonzero")
    if np.any(dd <= 0):
        raise DomainError("discretization step must be positive")
    n = xd.size * Ad.shape[1]
    _tally("selective_scan", 10 * n, 2 * n)
    if method == "sequential" and _fastscan is not None and FAST_SCAN:
        xd, dd, Ad, Bd, Cd = (np.ascontiguousarray(v, dtype=np.float64) for v in (xd, dd, Ad, Bd, Cd))
        y, h, e = _fastscan.forward(xd, dd, Ad, Bd, Cd)

        def bw_fast(gy):
            return _fastscan.backward(np.ascontiguousarray(gy), xd, dd, Ad, Bd, Cd, h, e)

        return _make(y, (x, delta, A, Bm, Cm), bw_fast, "selective_scan")
    run = _SCANS[method]
    z = dd[..., None] * Ad
    em1 = np.expm1(z)
    dA = em1 + 1.0
    w = (Bd[:, :, None, :] / Ad) * xd[..., None]
    h = run(dA, em1 * w)
    y = np.matmul(h, Cd[..., None])[..., 0]

    def bw(gy):
        a_next = np.concatenate([dA[:, 1:], np.zeros_like(dA[:, :1])], axis=1)
        gh = np.flip(run(np.flip(a_next, 1), np.flip(gy[..., None] * Cd[:, :, None, :], 1)), 1)
        h_prev = np.concatenate([np.zeros_like(h[:, :1]), h[:, :-1]], axis=1)
        gC = np.matmul(gy[:, :, None, :], h)[:, :, 0, :]
        gz = dA * (gh * h_prev + gh * w)
        q = gh * em1 / Ad  # d loss / d (b * x) at each state entry
        gx = np.matmul(q, Bd[..., None])[..., 0]
        gB = np.matmul(xd[:, :, None, :], q)[:, :, 0, :]
        gA = (gz * dd[..., None]).sum(axis=(0, 1)) - (q * w).sum(axis=(0, 1))
        gdelta = (gz * Ad).sum(-1)
        return gx, gdelta, gA, gB, gC

    return _make(y, (x, delta, A, Bm, Cm), bw, "selective_scan")


def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    logits = _t(logits)
    y = np.asarray(labels, dtype=np.intp)
    if logits.ndim != 2 or y.shape != (logits.shape[0],):
        raise ShapeError("cross_entropy expects logits[N, K] and labels[N]")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = y.shape[0]
    out = np.asarray(-logp[np.arange(n), y].mean())
    _tally("cross_entropy", 4 * logits.size)

    def bw(g):
        p = np.exp(logp)
        p[np.arange(n), y] -= 1.0
        return (g * p / n,)

    return _make(out, (logits,), bw, "cross_entropy")


# --------------------------------------------------------------------------
# modules
# --------------------------------------------------------------------------


class Module:
    """Container whose Tensor attributes with ``requires_grad`` are parameters.

    Parameters are discovered in attribute-definition order, recursing into
    sub-modules and lists of sub-modules, which gives stable names for
    checkpoints.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        if strict and set(own) != set(state):
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            raise KeyError(f"state mismatch; missing={missing} unexpected={extra}")
        for k, v in state.items():
            if k not in own:
                continue
            if own[k].shape != np.shape(v):
                raise ShapeError(f"{k}: expected {own[k].shape}, got {np.shape(v)}")
            own[k].data = np.array(v, dtype=np.float64)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return int(np.sum([p.size for p in self.parameters()]))


# --------------------------------------------------------------------------
# gradient checking
# --------------------------------------------------------------------------


def gradcheck(fn: Callable[[], Tensor], inputs: Iterable[Tensor], eps: float = 1e-5,
              max_entries: int | None = None, seed: int = 0) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``fn`` rebuilds the scalar loss from the current values of ``inputs``.
    The error per tensor is ``||analytic - numeric|| / max(||analytic||,
    ||numeric||, 1e-12)``.  ``max_entries`` limits the probed entries per
    tensor to a seeded random subset.
    """
    inputs = list(inputs)
    for t in inputs:
        t.grad = None
    backward(fn())
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t in inputs:
        analytic = np.zeros(t.shape) if t.grad is None else t.grad
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, max_entries, replace=False))
        numeric = np.empty(idx.size)
        with no_grad():
            for i, j in enumerate(idx):
                orig = flat[j]
                flat[j] = orig + eps
                fp = float(fn().data)
                flat[j] = orig - eps
                fm = float(fn().data)
                flat[j] = orig
                numeric[i] = (fp - fm) / (2 * eps)
        a = analytic.reshape(-1)[idx]
        denom = np.max([np.linalg.norm(a), np.linalg.norm(numeric), 1e-12])
        worst = np.max([worst, np.linalg.norm(a - numeric) / denom])
    return float(worst)
