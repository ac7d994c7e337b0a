"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

Every differentiable operation returns a :class:`Tensor` whose ``node`` links
it into the recorded graph. Backward rules are written with the same
differentiable operations, so a backward pass run with ``retain_graph=True``
is itself recorded and can be differentiated again (reverse-over-reverse).
This is what the zero-centred gradient penalty needs.

Broadcasting follows numpy: shapes are aligned on their trailing dimensions
and a dimension broadcasts when it equals 1 or is missing. Operands are never
promoted; everything is stored in the active dtype (float32 unless
:func:`precision` says otherwise).
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, ShapeError

_dtype = np.float32
_recording = True


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording nodes. Results are constants."""
    global _recording
    prev, _recording = _recording, False
    try:
        yield
    finally:
        _recording = prev


@contextlib.contextmanager
def _record(flag: bool):
    global _recording
    prev, _recording = _recording, flag
    try:
        yield
    finally:
        _recording = prev


def is_recording() -> bool:
    return _recording


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the storage dtype of newly created tensors.

    Only the finite-difference oracle uses this (float64 evaluation).
    """
    global _dtype
    prev, _dtype = _dtype, np.dtype(dtype).type
    try:
        yield
    finally:
        _dtype = prev


def default_dtype():
    return _dtype


class Node:
    """One recorded operation: parent nodes plus a backward rule.

    ``backward(g)`` maps the gradient of the output to a tuple of gradients,
    one per parent (``None`` for parents that are constants).
    """

    __slots__ = ("op", "parents", "backward", "leaf")

    def __init__(self, op, parents=(), backward=None, leaf=None):
        self.op = op
        self.parents = parents
        self.backward = backward
        self.leaf = leaf

    def __repr__(self):
        return f"Node({self.op})"


class Tensor:
    __slots__ = ("data", "node", "__weakref__")
    __array_priority__ = 100.0

    def __init__(self, data, node: Node | None = None):
        self.data = np.asarray(data, dtype=_dtype)
        self.node = node

    # -- construction -------------------------------------------------
    @classmethod
    def parameter(cls, data) -> "Tensor":
        t = cls(np.array(data, dtype=_dtype))
        t.node = Node("leaf", leaf=t)
        return t

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def requires_grad_(self) -> "Tensor":
        """Turn a constant into a leaf of the graph (in place)."""
        if self.node is None:
            self.node = Node("leaf", leaf=self)
        return self

    # -- introspection ------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def requires_grad(self) -> bool:
        return self.node is not None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else _not_scalar(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        tag = f", op={self.node.op}" if self.node is not None else ""
        return f"Tensor(shape={self.shape}{tag})"

    # -- operators ----------------------------------------------------
    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _not_scalar(t):
    raise ContractError(f"item() needs a single-element tensor, got shape {t.shape}")


def constant(data) -> Tensor:
    return Tensor(data)


def parameter(data) -> Tensor:
    return Tensor.parameter(data)


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, op: str, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    if _recording and any(p.node is not None for p in parents):
        out.node = Node(op, tuple(p.node for p in parents), backward)
    return out


# ---------------------------------------------------------------------------
# broadcasting helpers


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


def sum_to(g: Tensor, shape: tuple) -> Tensor:
    """Reduce ``g`` by summation to ``shape`` (inverse of broadcasting)."""
    shape = tuple(shape)
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and g.shape[i + lead] != 1
    )
    return reshape(sum(g, axis=axes, keepdims=True), shape)


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    _broadcast_shape(a, b, "add")

    def backward(g):
        return sum_to(g, a.shape), sum_to(g, b.shape)

    return _make(a.data + b.data, "add", (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    _broadcast_shape(a, b, "sub")

    def backward(g):
        return sum_to(g, a.shape), sum_to(-g, b.shape)

    return _make(a.data - b.data, "sub", (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    _broadcast_shape(a, b, "mul")

    def backward(g):
        return sum_to(g * b, a.shape), sum_to(g * a, b.shape)

    return _make(a.data * b.data, "mul", (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    _broadcast_shape(a, b, "div")

    def backward(g):
        ga = g / b
        return sum_to(ga, a.shape), sum_to(-ga * a / b, b.shape)

    return _make(a.data / b.data, "div", (a, b), backward)


def neg(a) -> Tensor:
    a = _t(a)
    return _make(-a.data, "neg", (a,), lambda g: (-g,))


def power(a, p: float) -> Tensor:
    """``a ** p`` for a constant real exponent."""
    a = _t(a)
    p = float(p)

    def backward(g):
        if p == 2.0:
            return (g * a * 2.0,)
        return (g * p * power(a, p - 1.0),)

    return _make(a.data**p, "pow", (a,), backward)


def square(a) -> Tensor:
    return power(a, 2.0)


def sqrt(a) -> Tensor:
    a = _t(a)

    def backward(g):
        return (g * 0.5 / out,)

    out = _make(np.sqrt(a.data), "sqrt", (a,), backward)
    return out


def exp(a) -> Tensor:
    a = _t(a)

    def backward(g):
        return (g * out,)

    out = _make(np.exp(a.data), "exp", (a,), backward)
    return out


def log(a) -> Tensor:
    a = _t(a)
    return _make(np.log(a.data), "log", (a,), lambda g: (g / a,))


def absolute(a) -> Tensor:
    a = _t(a)
    sign = np.sign(a.data)
    return _make(np.abs(a.data), "abs", (a,), lambda g: (g * sign,))


def _sigmoid_np(x):
    # no overflow for large |x|
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)


def sigmoid(a) -> Tensor:
    a = _t(a)

    def backward(g):
        return (g * out * (1.0 - out),)

    out = _make(_sigmoid_np(a.data), "sigmoid", (a,), backward)
    return out


def _softplus_np(x):
    return np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))


def softplus(a) -> Tensor:
    """log(1 + e^a), evaluated as max(a, 0) + log(1 + e^-|a|)."""
    a = _t(a)
    return _make(_softplus_np(a.data), "softplus", (a,), lambda g: (g * sigmoid(a),))


def tanh(a) -> Tensor:
    a = _t(a)

    def backward(g):
        return (g * (1.0 - out * out),)

    out = _make(np.tanh(a.data), "tanh", (a,), backward)
    return out


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = _t(a)
    factor = np.where(a.data > 0, 1.0, slope).astype(a.dtype)
    return _make(a.data * factor, "leaky_relu", (a,), lambda g: (g * factor,))


def silu(a) -> Tensor:
    a = _t(a)
    return a * sigmoid(a)


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "neg": neg,
    "exp": exp,
    "log": log,
    "sqrt": sqrt,
    "abs": absolute,
    "sigmoid": sigmoid,
    "softplus": softplus,
    "tanh": tanh,
    "leaky_relu": leaky_relu,
    "silu": silu,
    "square": square,
}
_BINARY = {"add", "sub", "mul", "div"}


def elementwise(kind: str, a, b=None) -> Tensor:
    """Dispatch a pointwise op by name; binary kinds take ``b``."""
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ContractError(f"unknown elementwise op {kind!r}") from None
    if kind in _BINARY:
        if b is None:
            raise ContractError(f"{kind} needs two operands")
        return fn(a, b)
    if b is not None:
        raise ContractError(f"{kind} takes one operand")
    return fn(a)


# ---------------------------------------------------------------------------
# shape and reductions


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def sum(a, axis=None, keepdims=False) -> Tensor:  # noqa: A001
    a = _t(a)
    axes = _norm_axes(axis, a.ndim)
    kept = tuple(1 if i in axes else s for i, s in enumerate(a.shape))

    def backward(g):
        return (broadcast_to(reshape(g, kept), a.shape),)

    return _make(np.sum(a.data, axis=axes, keepdims=keepdims), "sum", (a,), backward)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = _t(a)
    axes = _norm_axes(axis, a.ndim)
    count = math.prod(a.shape[i] for i in axes)
    return sum(a, axes, keepdims) * (1.0 / count)


def broadcast_to(a, shape) -> Tensor:
    a = _t(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    try:
        data = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {a.shape} to {shape}") from None
    return _make(np.ascontiguousarray(data), "broadcast_to", (a,), lambda g: (sum_to(g, a.shape),))


def reshape(a, shape) -> Tensor:
    a = _t(a)
    shape = tuple(shape)
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from None
    return _make(data, "reshape", (a,), lambda g: (reshape(g, a.shape),))


def permute(a, axes) -> Tensor:
    a = _t(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(np.transpose(a.data, axes)), "permute", (a,),
                 lambda g: (permute(g, inv),))


def swap_last(a) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return permute(a, axes)


def getitem(a, idx) -> Tensor:
    """Any numpy index; the backward rule scatter-adds into zeros, so repeated
    integer indices accumulate."""
    a = _t(a)
    data = a.data[idx]
    return _make(np.array(data, dtype=a.dtype), "getitem", (a,), lambda g: (scatter(g, idx, a.shape),))


def scatter(g, idx, shape) -> Tensor:
    """Zeros of ``shape`` with ``g`` added at ``idx``. Adjoint of :func:`getitem`."""
    g = _t(g)
    data = np.zeros(shape, dtype=g.dtype)
    np.add.at(data, idx, g.data)
    return _make(data, "scatter", (g,), lambda gg: (getitem(gg, idx),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [_t(x) for x in tensors]
    ndim = tensors[0].ndim
    axis = axis % ndim
    for x in tensors[1:]:
        if x.ndim != ndim or any(
            x.shape[i] != tensors[0].shape[i] for i in range(ndim) if i != axis
        ):
            raise ShapeError(
                f"concat: shapes {tensors[0].shape} and {x.shape} differ off axis {axis}"
            )
    bounds = np.cumsum([0] + [x.shape[axis] for x in tensors])

    def backward(g):
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx = (slice(None),) * axis + (slice(int(lo), int(hi)),)
            out.append(getitem(g, idx))
        return tuple(out)

    return _make(np.concatenate([x.data for x in tensors], axis=axis), "concat", tensors, backward)


def matmul(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        return sum_to(g @ swap_last(b), a.shape), sum_to(swap_last(a) @ g, b.shape)

    return _make(np.matmul(a.data, b.data), "matmul", (a, b), backward)


def softmax(a, axis=-1) -> Tensor:
    a = _t(a)
    # shift is a constant; softmax is invariant to it
    shift = np.max(a.data, axis=axis, keepdims=True)
    e = exp(a - shift)
    return e / sum(e, axis=axis, keepdims=True)


# ---------------------------------------------------------------------------
# convolution (N spatial dims, cross-correlation)


def _pad_spatial(x, padding):
    if not padding:
        return x
    nd = x.ndim - 2
    return np.pad(x, ((0, 0), (0, 0)) + ((padding, padding),) * nd)


def _windows(x, kshape, stride, padding):
    nd = x.ndim - 2
    xp = _pad_spatial(x, padding)
    win = sliding_window_view(xp, kshape, axis=tuple(range(2, 2 + nd)))
    if stride > 1:
        win = win[(slice(None), slice(None)) + (slice(None, None, stride),) * nd]
    return win


def _conv_fwd(x, w, stride, padding):
    nd = x.ndim - 2
    win = _windows(x, w.shape[2:], stride, padding)
    out = np.tensordot(
        win, w, axes=([1] + list(range(2 + nd, 2 + 2 * nd)), [1] + list(range(2, 2 + nd)))
    )
    return np.ascontiguousarray(np.moveaxis(out, -1, 1))


def _conv_wgrad(x, g, kshape, stride, padding):
    nd = x.ndim - 2
    win = _windows(x, kshape, stride, padding)
    spatial = list(range(2, 2 + nd))
    return np.tensordot(g, win, axes=([0] + spatial, [0] + spatial))


def _conv_igrad(g, w, xshape, stride, padding):
    nd = g.ndim - 2
    kshape = w.shape[2:]
    cols = np.tensordot(g, w, axes=([1], [0]))  # N, *out, C, *k
    padded = tuple(s + 2 * padding for s in xshape[2:])
    dx = np.zeros(tuple(xshape[:2]) + padded, dtype=g.dtype)
    out_sp = g.shape[2:]
    for offs in np.ndindex(*kshape):
        sl = tuple(slice(o, o + stride * (n - 1) + 1, stride) for o, n in zip(offs, out_sp))
        dx[(slice(None), slice(None)) + sl] += np.moveaxis(cols[(Ellipsis,) + offs], -1, 1)
    if padding:
        dx = dx[(slice(None), slice(None)) + (slice(padding, -padding),) * nd]
    return np.ascontiguousarray(dx)


def conv_output_extent(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def conv(x, w, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` [N, C, *S] with ``w`` [F, C, *k].

    Works for any number of spatial dims (2D and 3D are used).
    """
    x, w = _t(x), _t(w)
    nd = x.ndim - 2
    if nd < 1 or w.ndim != nd + 2:
        raise ShapeError(f"conv: input {x.shape} and kernel {w.shape} have incompatible ranks")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(
            f"conv: input channels {x.shape[1]} (shape {x.shape}) do not match "
            f"kernel channels {w.shape[1]} (shape {w.shape})"
        )
    if stride < 1:
        raise ContractError(f"conv: stride must be >= 1, got {stride}")
    for n, k in zip(x.shape[2:], w.shape[2:]):
        if k > n + 2 * padding:
            raise ShapeError(f"conv: kernel {w.shape} larger than padded input {x.shape}")

    def backward(g):
        return (
            conv_input_grad(g, w, x.shape, stride, padding),
            conv_weight_grad(x, g, w.shape, stride, padding),
        )

    return _make(_conv_fwd(x.data, w.data, stride, padding), "conv", (x, w), backward)


def conv_input_grad(g, w, xshape, stride: int = 1, padding: int = 0) -> Tensor:
    """Adjoint of :func:`conv` in its input (a transposed convolution)."""
    g, w = _t(g), _t(w)
    xshape = tuple(xshape)

    def backward(gg):
        return (
            conv(gg, w, stride, padding),
            conv_weight_grad(gg, g, w.shape, stride, padding),
        )

    data = _conv_igrad(g.data, w.data, xshape, stride, padding)
    return _make(data, "conv_input_grad", (g, w), backward)


def conv_weight_grad(x, g, wshape, stride: int = 1, padding: int = 0) -> Tensor:
    """Adjoint of :func:`conv` in its kernel."""
    x, g = _t(x), _t(g)
    wshape = tuple(wshape)

    def backward(gw):
        return (
            conv_input_grad(g, gw, x.shape, stride, padding),
            conv(x, gw, stride, padding),
        )

    data = _conv_wgrad(x.data, g.data, wshape[2:], stride, padding)
    return _make(data, "conv_weight_grad", (x, g), backward)


def upsample(x, factor: int = 2) -> Tensor:
    """Nearest-neighbour upsampling of every spatial axis."""
    x = _t(x)
    data = x.data
    for ax in range(2, x.ndim):
        data = np.repeat(data, factor, axis=ax)
    return _make(data, "upsample", (x,), lambda g: (sum_pool(g, factor),))


def sum_pool(x, factor: int = 2) -> Tensor:
    """Sum over non-overlapping ``factor``-wide blocks. Adjoint of :func:`upsample`."""
    x = _t(x)
    nd = x.ndim - 2
    shape = list(x.shape[:2])
    for s in x.shape[2:]:
        if s % factor:
            raise ShapeError(f"sum_pool: extent {s} of {x.shape} not divisible by {factor}")
        shape += [s // factor, factor]
    data = x.data.reshape(shape).sum(axis=tuple(3 + 2 * i for i in range(nd)))
    return _make(data, "sum_pool", (x,), lambda g: (upsample(g, factor),))


# ---------------------------------------------------------------------------
# differentiation


def _topo_order(root: Node) -> list[Node]:
    order, seen = [], set()
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
        for p in node.parents:
            if p is not None and id(p) not in seen:
                stack.append((p, False))
    return order


def _run_backward(root: Tensor, keep: set, retain_graph: bool) -> dict:
    if root.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    grads: dict[int, Tensor] = {}
    if root.node is None:
        return grads
    order = _topo_order(root.node)
    grads[id(root.node)] = Tensor(np.ones(root.shape, dtype=root.dtype))
    with _record(retain_graph):
        for node in reversed(order):
            key = id(node)
            g = grads.get(key) if key in keep else grads.pop(key, None)
            if g is None or node.backward is None:
                continue
            for parent, pg in zip(node.parents, node.backward(g)):
                if parent is None or pg is None:
                    continue
                pk = id(parent)
                prev = grads.get(pk)
                grads[pk] = pg if prev is None else prev + pg
    return grads


def grad(root: Tensor, inputs: Iterable[Tensor], retain_graph: bool = False) -> list[Tensor]:
    """Gradients of scalar ``root`` with respect to each of ``inputs``.

    Inputs that do not influence ``root`` get zeros. With ``retain_graph`` the
    returned gradients are themselves differentiable.
    """
    inputs = list(inputs)
    keep = {id(x.node) for x in inputs if x.node is not None}
    grads = _run_backward(root, keep, retain_graph)
    out = []
    for x in inputs:
        g = grads.get(id(x.node)) if x.node is not None else None
        out.append(g if g is not None else Tensor(np.zeros(x.shape, dtype=x.dtype)))
    return out


def backward(root: Tensor, retain_graph: bool = False) -> dict:
    """Gradient map {leaf tensor -> gradient} for every leaf reachable from ``root``."""
    if root.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    if root.node is None:
        return {}
    leaves = [n for n in _topo_order(root.node) if n.leaf is not None]
    grads = _run_backward(root, {id(n) for n in leaves}, retain_graph)
    return {n.leaf: grads[id(n)] for n in leaves if id(n) in grads}
