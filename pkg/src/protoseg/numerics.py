"""Reverse-mode automatic differentiation on float64 numpy arrays.

Every operation returns a :class:`Tensor` that remembers its inputs and a
backward closure. Calling :func:`backward` on a scalar loss walks the tape
once in reverse topological order and accumulates gradients into the leaf
tensors, so a value used twice receives the sum of both contributions.

Design points that matter elsewhere in the package:

* everything is float64; inputs are coerced on construction
* norms are floored at ``NORM_FLOOR`` before any division, applied to the
  squared norm so the square root never sees zero
* graph recording is a thread-local switch (:class:`no_grad`), which keeps
  concurrent no-grad evaluation safe alongside a training thread
* with ``CHECK_FINITE`` on (the default), any op output or gradient that
  contains NaN or Inf raises :class:`~protoseg.errors.NonFiniteError`
"""

from __future__ import annotations

import threading
import warnings
from typing import Iterable, Sequence

import numpy as np

from . import kernels
from .errors import (
    NonFiniteError,
    OffTapeParameterWarning,
    ShapeMismatchError,
    ZeroNormWarning,
)

NORM_FLOOR = 1e-8
CHECK_FINITE = True

# names every backward closure in this module answers to; the per-op
# finite-difference suite iterates this and fails on anything unlisted
DIFFERENTIABLE_OPS = (
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "sum",
    "mean",
    "relu",
    "exp",
    "log",
    "sqrt",
    "clip",
    "softmax",
    "transpose",
    "reshape",
    "concat",
    "take_rows",
    "avg_pool2d",
    "conv2d",
    "bilinear_resize",
)

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


class no_grad:
    """Context manager: ops inside record no graph and keep no parents."""

    def __enter__(self):
        self._prev = grad_enabled()
        _state.grad_enabled = False
        return self

    def __exit__(self, exc_type, exc, tb):
        _state.grad_enabled = self._prev
        return False


class Tensor:
    """A float64 array plus the tape node that produced it."""

    __slots__ = ("data", "grad", "requires_grad", "parents", "op", "_backward")

    def __init__(self, data, requires_grad=False, parents=(), op="leaf", backward=None):
        arr = np.asarray(data, dtype=np.float64)
        if CHECK_FINITE and not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"tensor from op {op!r} contains non-finite values")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.parents = parents
        self.op = op
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeMismatchError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data)

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, op={self.op!r}{flag})"

    # arithmetic sugar; all graph building happens in the module functions
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    @property
    def T(self):
        return transpose(self, None)

    def relu(self):
        return relu(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def clip(self, lo=None, hi=None):
        return clip(self, lo, hi)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents: tuple, op: str, backward) -> Tensor:
    if grad_enabled() and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, parents=parents, op=op, backward=backward)
    return Tensor(data, op=op)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _node(out, (a, b), "add", backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _node(out, (a, b), "sub", backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)

    return _node(out, (a, b), "mul", backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.data.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)
        return ga, gb

    return _node(out, (a, b), "div", backward)


def neg(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        return (-g,)

    return _node(-a.data, (a,), "neg", backward)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeMismatchError(
            f"matmul expects 2-D operands, got {a.data.shape} @ {b.data.shape}"
        )
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(f"matmul mismatch: {a.data.shape} @ {b.data.shape}")
    out = a.data @ b.data

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _node(out, (a, b), "matmul", backward)


def _axis_tuple(axis, ndim) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, (int, np.integer)):
        axis = (int(axis),)
    return tuple(ax % ndim for ax in axis)


def reduce_sum(t, axis=None, keepdims=False) -> Tensor:
    t = as_tensor(t)
    axes = _axis_tuple(axis, t.ndim)
    out = t.data.sum(axis=axes, keepdims=keepdims)
    shape = t.data.shape

    def backward(g):
        gk = g if keepdims or not axes else np.expand_dims(g, axes)
        return (np.broadcast_to(gk, shape),)

    return _node(out, (t,), "sum", backward)


def reduce_mean(t, axis=None, keepdims=False) -> Tensor:
    t = as_tensor(t)
    axes = _axis_tuple(axis, t.ndim)
    n = 1
    for ax in axes:
        n *= t.data.shape[ax]
    if n == 0:
        raise ShapeMismatchError("mean over an empty selection")
    out = t.data.mean(axis=axes, keepdims=keepdims)
    shape = t.data.shape

    def backward(g):
        gk = g if keepdims or not axes else np.expand_dims(g, axes)
        return (np.broadcast_to(gk, shape) / n,)

    return _node(out, (t,), "mean", backward)


def relu(t) -> Tensor:
    t = as_tensor(t)
    mask = t.data > 0.0

    def backward(g):
        return (g * mask,)

    return _node(np.where(mask, t.data, 0.0), (t,), "relu", backward)


def exp(t) -> Tensor:
    t = as_tensor(t)
    out = np.exp(t.data)

    def backward(g):
        return (g * out,)

    return _node(out, (t,), "exp", backward)


def log(t) -> Tensor:
    t = as_tensor(t)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(t.data)

    def backward(g):
        return (g / t.data,)

    return _node(out, (t,), "log", backward)


def sqrt(t) -> Tensor:
    t = as_tensor(t)
    out = np.sqrt(t.data)

    def backward(g):
        return (g / (2.0 * out),)

    return _node(out, (t,), "sqrt", backward)


def clip(t, lo=None, hi=None) -> Tensor:
    """Clamp to [lo, hi]; gradient passes only inside the closed interval."""
    t = as_tensor(t)
    out = np.clip(t.data, lo, hi)
    inside = np.ones(t.data.shape, dtype=bool)
    if lo is not None:
        inside &= t.data >= lo
    if hi is not None:
        inside &= t.data <= hi

    def backward(g):
        return (g * inside,)

    return _node(out, (t,), "clip", backward)


def softmax(t, axis=-1) -> Tensor:
    t = as_tensor(t)
    if t.data.shape[_axis_tuple(axis, t.ndim)[0]] == 0:
        raise ShapeMismatchError("softmax over an empty axis")
    z = t.data - t.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - inner),)

    return _node(y, (t,), "softmax", backward)


def transpose(t, axes=None) -> Tensor:
    t = as_tensor(t)
    out = np.transpose(t.data, axes)
    inverse = None if axes is None else tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inverse),)

    return _node(out, (t,), "transpose", backward)


def reshape(t, shape) -> Tensor:
    t = as_tensor(t)
    orig = t.data.shape

    def backward(g):
        return (np.reshape(g, orig),)

    return _node(t.data.reshape(shape), (t,), "reshape", backward)


def concat(parts: Sequence, axis=0) -> Tensor:
    parts = tuple(as_tensor(p) for p in parts)
    if not parts:
        raise ShapeMismatchError("concat of zero tensors")
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(out, parts, "concat", backward)


def take_rows(t, idx) -> Tensor:
    """Gather rows along axis 0; repeated indices accumulate on backward."""
    t = as_tensor(t)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeMismatchError(f"row index must be 1-D, got shape {idx.shape}")
    out = t.data[idx]
    shape = t.data.shape

    def backward(g):
        gx = np.zeros(shape)
        np.add.at(gx, idx, g)
        return (gx,)

    return _node(out, (t,), "take_rows", backward)


def avg_pool2d(t, window) -> Tensor:
    """Non-overlapping window mean over the trailing two axes."""
    t = as_tensor(t)
    wh, ww = (window, window) if isinstance(window, (int, np.integer)) else window
    squeeze = t.ndim == 2
    data = t.data[None] if squeeze else t.data
    if data.ndim != 3:
        raise ShapeMismatchError(f"avg_pool2d expects (C,H,W) or (H,W), got {t.data.shape}")
    c, h, w = data.shape
    if wh <= 0 or ww <= 0:
        raise ShapeMismatchError(f"pool window must be positive, got {(wh, ww)}")
    if wh > h or ww > w:
        raise ShapeMismatchError(f"pool window {(wh, ww)} larger than map {(h, w)}")
    if h % wh or w % ww:
        raise ShapeMismatchError(f"pool window {(wh, ww)} does not divide map {(h, w)}")
    ho, wo = h // wh, w // ww
    out = data.reshape(c, ho, wh, wo, ww).mean(axis=(2, 4))
    if squeeze:
        out = out[0]

    def backward(g):
        gg = g[None] if squeeze else g
        gx = (np.broadcast_to(gg[:, :, None, :, None], (c, ho, wh, wo, ww)) / (wh * ww))
        gx = gx.reshape(c, h, w)
        return (gx[0] if squeeze else gx,)

    return _node(out, (t,), "avg_pool2d", backward)


def conv2d(x, w, b, stride=1, pad=0) -> Tensor:
    """2-D convolution of (Cin,H,W) with (Cout,Cin,kh,kw) weights plus bias."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.ndim != 3 or w.ndim != 4 or b.ndim != 1:
        raise ShapeMismatchError(
            f"conv2d expects (Cin,H,W), (Cout,Cin,kh,kw), (Cout,), got "
            f"{x.data.shape}, {w.data.shape}, {b.data.shape}"
        )
    if b.shape[0] != w.shape[0]:
        raise ShapeMismatchError(f"bias {b.data.shape} does not match {w.shape[0]} filters")
    out = kernels.conv2d_forward(x.data, w.data, b.data, stride, pad)
    in_h, in_w = x.shape[1], x.shape[2]
    kh, kw = w.shape[2], w.shape[3]

    def backward(g):
        g = np.ascontiguousarray(g)
        gx = kernels.conv2d_backward_input(g, w.data, stride, pad, in_h, in_w)
        gw = kernels.conv2d_backward_weight(g, x.data, stride, pad, kh, kw)
        gb = g.sum(axis=(1, 2))
        return gx, gw, gb

    return _node(out, (x, w, b), "conv2d", backward)


def bilinear_resize(t, out_hw) -> Tensor:
    """Corner-aligned bilinear resize of a (C,H,W) tensor."""
    t = as_tensor(t)
    if t.ndim != 3:
        raise ShapeMismatchError(f"bilinear_resize expects (C,H,W), got {t.data.shape}")
    oh, ow = out_hw
    out = kernels.bilinear_resize(np.ascontiguousarray(t.data), oh, ow)
    in_h, in_w = t.shape[1], t.shape[2]

    def backward(g):
        return (kernels.bilinear_resize_adjoint(np.ascontiguousarray(g), in_h, in_w),)

    return _node(out, (t,), "bilinear_resize", backward)


def dot(u, v) -> Tensor:
    return reduce_sum(mul(u, v))


def l2norm(t, axis=None, keepdims=False) -> Tensor:
    """Euclidean norm with the floor applied to the squared norm, so the
    result is never below (one ulp of) NORM_FLOOR and the root never sees
    zero on the backward pass."""
    t = as_tensor(t)
    ss = reduce_sum(mul(t, t), axis=axis, keepdims=keepdims)
    return sqrt(clip(ss, NORM_FLOOR * NORM_FLOOR, None))


def cosine(u, v) -> Tensor:
    """Cosine similarity of two 1-D tensors, clamped to [-1, 1].

    A zero-norm operand is flagged with :class:`ZeroNormWarning` and the
    similarity falls back to 0 through the norm floor.
    """
    u, v = as_tensor(u), as_tensor(v)
    if u.ndim != 1 or u.shape != v.shape:
        raise ShapeMismatchError(
            f"cosine expects matching 1-D tensors, got {u.data.shape} and {v.data.shape}"
        )
    if not u.data.any() or not v.data.any():
        warnings.warn(
            "cosine similarity of a zero vector falls back to 0",
            ZeroNormWarning,
            stacklevel=2,
        )
    return clip(div(dot(u, v), mul(l2norm(u), l2norm(v))), -1.0, 1.0)


def _topo(root: Tensor) -> list:
    """Post-order over the requires_grad subgraph: parents before users."""
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
        for p in node.parents:
            if p.requires_grad:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params=None) -> dict:
    """Backpropagate from a scalar loss.

    Accumulates into ``.grad`` of every reachable leaf. When ``params`` is
    given (a :class:`ParamStore` or name->Tensor mapping), returns a dict of
    this call's gradients per name; parameters that never touched the tape
    get zeros and an :class:`OffTapeParameterWarning`.
    """
    if not isinstance(loss, Tensor):
        raise TypeError(f"backward needs a Tensor, got {type(loss).__name__}")
    if loss.data.size != 1:
        raise ShapeMismatchError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    grads: dict[int, np.ndarray] = {}
    if loss.requires_grad:
        order = _topo(loss)
        grads[id(loss)] = np.ones_like(loss.data)
        for node in reversed(order):
            g = grads.get(id(node))
            if g is None:
                continue
            if CHECK_FINITE and not np.all(np.isfinite(g)):
                raise NonFiniteError(f"gradient flowing into op {node.op!r} is non-finite")
            if node._backward is None:
                if not node.parents:
                    node.grad = g if node.grad is None else node.grad + g
                continue
            for p, pg in zip(node.parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                held = grads.get(id(p))
                grads[id(p)] = pg if held is None else held + pg
    if params is None:
        return {}
    named = params.items() if hasattr(params, "items") else params
    result = {}
    for name, p in named:
        g = grads.get(id(p))
        if g is None:
            warnings.warn(
                f"parameter {name!r} took no part in the loss; gradient is zero",
                OffTapeParameterWarning,
                stacklevel=2,
            )
            g = np.zeros_like(p.data)
        result[name] = np.array(g, dtype=np.float64)
    return result


class ParamStore:
    """Named trainable leaves with insertion-stable ordering.

    The tensors keep their identity across :meth:`sgd_step`, so modules can
    hold references and every freshly built graph sees the updated values.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, data) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(data, dtype=np.float64), requires_grad=True, op="param")
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list:
        return list(self._params)

    def items(self):
        return list(self._params.items())

    def zero_grads(self) -> None:
        for t in self._params.values():
            t.grad = None

    def sgd_step(self, grads: dict, lr: float) -> None:
        for name, t in self._params.items():
            t.data = t.data - lr * grads[name]

    def state(self) -> dict:
        return {name: t.data.copy() for name, t in self._params.items()}

    def load_state(self, arrays: dict) -> None:
        missing = set(self._params) - set(arrays)
        extra = set(arrays) - set(self._params)
        if missing or extra:
            raise KeyError(
                f"parameter names do not match store (missing={sorted(missing)}, "
                f"unexpected={sorted(extra)})"
            )
        for name, t in self._params.items():
            arr = np.array(arrays[name], dtype=np.float64)
            if arr.shape != t.data.shape:
                raise ShapeMismatchError(
                    f"parameter {name!r} has shape {t.data.shape}, file provides {arr.shape}"
                )
            t.data = arr
