"""Reverse-mode differentiation over dense float64 arrays.

Every primitive records its inputs on the tensor it produces. Backward rules
are written with the same primitives, so calling :func:`grad` with
``create_graph=True`` yields gradients that are themselves differentiable.
That is what lets the outer loop differentiate through inner-loop updates.

A :class:`Record` freezes the graph between named input leaves and named
outputs. It can be replayed on new input values (:func:`evaluate`),
differentiated (:func:`gradient`, :func:`grad_record`), and checked against
central differences (:func:`finite_difference_check`).

Subgradient conventions: ``abs``, ``relu`` and ``sign`` use derivative 0 at 0.
"""
from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import _kernels

__all__ = [
    "Tensor",
    "Record",
    "NonFiniteError",
    "ShapeError",
    "tensor",
    "grad",
    "no_grad",
    "enable_grad",
    "is_grad_enabled",
    "evaluate",
    "gradient",
    "grad_record",
    "finite_difference_check",
]


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


class ShapeError(ValueError):
    pass


_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def _grad_mode(flag: bool):
    prev = is_grad_enabled()
    _state.enabled = flag
    try:
        yield
    finally:
        _state.enabled = prev


def no_grad():
    return _grad_mode(False)


def enable_grad():
    return _grad_mode(True)


class Tensor:
    """A float64 array that remembers how it was computed."""

    __slots__ = ("data", "requires_grad", "op", "parents", "name")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.op = None
        self.parents = ()
        self.name = name

    # -- introspection
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
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self) -> str:
        tag = f", op={self.op.name}" if self.op is not None else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    # -- arithmetic
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return _apply(_NEG, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _finite(a: np.ndarray) -> bool:
    # a NaN/Inf anywhere makes the self dot product non-finite; an overflow of a
    # finite sum is caught by the exact fallback
    flat = a.reshape(-1)
    if math.isfinite(float(np.dot(flat, flat))):
        return True
    return bool(np.isfinite(flat).all())


def _apply(op, *parents: Tensor) -> Tensor:
    out = op.forward(*[p.data for p in parents])
    if type(out) is not np.ndarray:
        out = np.asarray(out)
    if not _finite(out):
        raise NonFiniteError(f"{op.name} produced a non-finite value")
    t = Tensor.__new__(Tensor)
    t.data = out
    t.name = None
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t.op = op
        t.parents = parents
    else:
        t.requires_grad = False
        t.op = None
        t.parents = ()
    return t


# =========================================================================== ops
#
# An op holds its static attributes, a numpy ``forward`` and a ``backward`` that
# maps the upstream gradient to one gradient per parent using tensor ops only.


class Op:
    __slots__ = ()
    name = "op"

    def forward(self, *xs):
        raise NotImplementedError

    def backward(self, g, out, *parents):
        raise NotImplementedError


class _Add(Op):
    name = "add"

    def forward(self, a, b):
        return a + b

    def backward(self, g, out, a, b):
        return (
            sum_to(g, a.shape) if a.requires_grad else None,
            sum_to(g, b.shape) if b.requires_grad else None,
        )


class _Sub(Op):
    name = "sub"

    def forward(self, a, b):
        return a - b

    def backward(self, g, out, a, b):
        return (
            sum_to(g, a.shape) if a.requires_grad else None,
            sum_to(-g, b.shape) if b.requires_grad else None,
        )


class _Mul(Op):
    name = "mul"

    def forward(self, a, b):
        return a * b

    def backward(self, g, out, a, b):
        return (
            sum_to(g * b, a.shape) if a.requires_grad else None,
            sum_to(g * a, b.shape) if b.requires_grad else None,
        )


class _Div(Op):
    name = "div"

    def forward(self, a, b):
        return a / b

    def backward(self, g, out, a, b):
        ga = sum_to(g / b, a.shape) if a.requires_grad else None
        gb = sum_to(-(g * out) / b, b.shape) if b.requires_grad else None
        return ga, gb


class _Neg(Op):
    name = "neg"

    def forward(self, a):
        return -a

    def backward(self, g, out, a):
        return (-g,)


class _MatMul(Op):
    name = "matmul"

    def forward(self, a, b):
        return np.matmul(a, b)

    def backward(self, g, out, a, b):
        ga = sum_to(matmul(g, transpose(b)), a.shape) if a.requires_grad else None
        gb = sum_to(matmul(transpose(a), g), b.shape) if b.requires_grad else None
        return ga, gb


class _Transpose(Op):
    name = "transpose"

    def forward(self, a):
        return np.swapaxes(a, -1, -2)

    def backward(self, g, out, a):
        return (transpose(g),)


class _Reshape(Op):
    __slots__ = ("shape", "in_shape")
    name = "reshape"

    def __init__(self, shape, in_shape):
        self.shape = shape
        self.in_shape = in_shape

    def forward(self, a):
        return a.reshape(self.shape)

    def backward(self, g, out, a):
        return (reshape(g, self.in_shape),)


class _Sum(Op):
    __slots__ = ("axis", "keepdims", "in_shape")
    name = "sum"

    def __init__(self, axis, keepdims, in_shape):
        self.axis = axis
        self.keepdims = keepdims
        self.in_shape = in_shape

    def forward(self, a):
        return np.asarray(a.sum(axis=self.axis, keepdims=self.keepdims))

    def backward(self, g, out, a):
        if not self.keepdims:
            g = reshape(g, _keepdims_shape(self.in_shape, self.axis))
        return (broadcast_to(g, self.in_shape),)


class _BroadcastTo(Op):
    __slots__ = ("shape",)
    name = "broadcast_to"

    def __init__(self, shape):
        self.shape = shape

    def forward(self, a):
        return np.ascontiguousarray(np.broadcast_to(a, self.shape))

    def backward(self, g, out, a):
        return (sum_to(g, a.shape),)


class _SumTo(Op):
    __slots__ = ("shape",)
    name = "sum_to"

    def __init__(self, shape):
        self.shape = shape

    def forward(self, a):
        return _np_sum_to(a, self.shape)

    def backward(self, g, out, a):
        return (broadcast_to(g, a.shape),)


class _GetItem(Op):
    __slots__ = ("index", "in_shape")
    name = "getitem"

    def __init__(self, index, in_shape):
        self.index = index
        self.in_shape = in_shape

    def forward(self, a):
        return np.array(a[self.index])

    def backward(self, g, out, a):
        return (_apply(_IndexPad(self.index, self.in_shape), g),)


class _IndexPad(Op):
    """Place ``g`` at ``index`` inside a zero array of ``shape``."""

    __slots__ = ("index", "shape")
    name = "index_pad"

    def __init__(self, index, shape):
        self.index = index
        self.shape = shape

    def forward(self, g):
        out = np.zeros(self.shape)
        out[self.index] = g
        return out

    def backward(self, g, out, a):
        return (_apply(_GetItem(self.index, self.shape), g),)


class _Concat(Op):
    __slots__ = ("axis", "sizes")
    name = "concat"

    def __init__(self, axis, sizes):
        self.axis = axis
        self.sizes = sizes

    def forward(self, *xs):
        return np.concatenate(xs, axis=self.axis)

    def backward(self, g, out, *xs):
        grads = []
        start = 0
        ndim = g.ndim
        axis = self.axis % ndim
        for x, n in zip(xs, self.sizes):
            if x.requires_grad:
                idx = (slice(None),) * axis + (slice(start, start + n),)
                grads.append(getitem(g, idx))
            else:
                grads.append(None)
            start += n
        return tuple(grads)


class _Unary(Op):
    __slots__ = ()


class _Exp(_Unary):
    name = "exp"

    def forward(self, a):
        return np.exp(a)

    def backward(self, g, out, a):
        return (g * out,)


class _Log(_Unary):
    name = "log"

    def forward(self, a):
        return np.log(a)

    def backward(self, g, out, a):
        return (g / a,)


class _Sigmoid(_Unary):
    name = "sigmoid"

    def forward(self, a):
        return _kernels.sigmoid(a)

    def backward(self, g, out, a):
        return (g * (out * (1.0 - out)),)


class _Tanh(_Unary):
    name = "tanh"

    def forward(self, a):
        return np.tanh(a)

    def backward(self, g, out, a):
        return (g * (1.0 - square(out)),)


class _Softplus(_Unary):
    name = "softplus"

    def forward(self, a):
        return _kernels.softplus(a)

    def backward(self, g, out, a):
        return (g * sigmoid(a),)


class _Square(_Unary):
    name = "square"

    def forward(self, a):
        return a * a

    def backward(self, g, out, a):
        return (g * (2.0 * a),)


class _Sqrt(_Unary):
    name = "sqrt"

    def forward(self, a):
        return np.sqrt(a)

    def backward(self, g, out, a):
        return ((0.5 * g) / out,)


class _Power(_Unary):
    __slots__ = ("p",)
    name = "power"

    def __init__(self, p):
        self.p = float(p)

    def forward(self, a):
        return np.power(a, self.p)

    def backward(self, g, out, a):
        if self.p == 0.0:
            return (None,)
        if self.p == 1.0:
            return (g,)
        return (g * (self.p * power(a, self.p - 1.0)),)


class _Abs(_Unary):
    name = "abs"

    def forward(self, a):
        return np.abs(a)

    def backward(self, g, out, a):
        return (g * sign(a),)


class _Sign(_Unary):
    name = "sign"

    def forward(self, a):
        return np.sign(a)

    def backward(self, g, out, a):
        return (None,)


class _Step(_Unary):
    name = "step"

    def forward(self, a):
        return (a > 0).astype(np.float64)

    def backward(self, g, out, a):
        return (None,)


class _Relu(_Unary):
    name = "relu"

    def forward(self, a):
        return np.maximum(a, 0.0)

    def backward(self, g, out, a):
        return (g * _apply(_STEP, a),)


class _StopGradient(_Unary):
    name = "stop_gradient"

    def forward(self, a):
        return a.copy()

    def backward(self, g, out, a):
        return (None,)


class _Softmax(Op):
    __slots__ = ("axis",)
    name = "softmax"

    def __init__(self, axis):
        self.axis = axis

    def forward(self, a):
        z = a - a.max(axis=self.axis, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=self.axis, keepdims=True)

    def backward(self, g, out, a):
        inner = tsum(g * out, axis=self.axis, keepdims=True)
        return (out * (g - inner),)


class _GatherRows(Op):
    """Row lookup into a 2-D (or leading-batched 3-D) table; row -1 reads zeros."""

    __slots__ = ("rows", "table_shape", "out_shape")
    name = "gather_rows"

    def __init__(self, rows, table_shape, out_shape):
        self.rows = rows
        self.table_shape = table_shape
        self.out_shape = out_shape

    def forward(self, table):
        flat = table.reshape(-1, table.shape[-1])
        return _kernels.gather_rows(flat, self.rows, -1).reshape(self.out_shape)

    def backward(self, g, out, table):
        return (_apply(_ScatterRows(self.rows, self.table_shape, self.out_shape), g),)


class _ScatterRows(Op):
    __slots__ = ("rows", "table_shape", "out_shape")
    name = "scatter_rows"

    def __init__(self, rows, table_shape, out_shape):
        self.rows = rows
        self.table_shape = table_shape
        self.out_shape = out_shape

    def forward(self, g):
        d = self.table_shape[-1]
        n_rows = int(np.prod(self.table_shape[:-1]))
        flat = _kernels.scatter_add_rows(g.reshape(-1, d), self.rows, n_rows, -1)
        return flat.reshape(self.table_shape)

    def backward(self, g, out, a):
        return (_apply(_GatherRows(self.rows, self.table_shape, self.out_shape), g),)


_NEG = _Neg()
_STEP = _Step()
_ADD = _Add()
_SUB = _Sub()
_MUL = _Mul()
_DIV = _Div()
_MATMUL = _MatMul()
_TRANSPOSE = _Transpose()
_EXP = _Exp()
_LOG = _Log()
_SIGMOID = _Sigmoid()
_TANH = _Tanh()
_SOFTPLUS = _Softplus()
_SQUARE = _Square()
_SQRT = _Sqrt()
_ABS = _Abs()
_SIGN = _Sign()
_RELU = _Relu()
_STOP = _StopGradient()


# ======================================================================= helpers


def _keepdims_shape(shape, axis):
    if axis is None:
        return (1,) * len(shape)
    axes = (axis,) if isinstance(axis, int) else axis
    axes = {a % len(shape) for a in axes}
    return tuple(1 if i in axes else n for i, n in enumerate(shape))


def _np_sum_to(a: np.ndarray, shape) -> np.ndarray:
    shape = tuple(shape)
    if a.shape == shape:
        return a
    lead = a.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, n in enumerate(shape) if n == 1 and a.shape[i + lead] != 1
    )
    out = a.sum(axis=axes, keepdims=True)
    if lead:
        out = out.reshape(out.shape[lead:])
    return out.reshape(shape)


def _resolve_shape(size, shape):
    if -1 not in shape:
        return shape
    known = int(np.prod([n for n in shape if n != -1]))
    return tuple(size // known if n == -1 else n for n in shape)


def _check_index(index):
    items = index if isinstance(index, tuple) else (index,)
    for it in items:
        if not (it is None or it is Ellipsis or isinstance(it, (int, np.integer, slice))):
            raise TypeError("only basic indexing (ints, slices, None, ...) is differentiable")
    return index


# ===================================================================== functions


def add(a, b) -> Tensor:
    return _apply(_ADD, _t(a), _t(b))


def sub(a, b) -> Tensor:
    return _apply(_SUB, _t(a), _t(b))


def mul(a, b) -> Tensor:
    return _apply(_MUL, _t(a), _t(b))


def div(a, b) -> Tensor:
    return _apply(_DIV, _t(a), _t(b))


def matmul(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands need at least 2 dims")
    return _apply(_MATMUL, a, b)


def transpose(a) -> Tensor:
    return _apply(_TRANSPOSE, _t(a))


def reshape(a, shape) -> Tensor:
    a = _t(a)
    shape = _resolve_shape(a.size, tuple(shape))
    if shape == a.shape:
        return a
    return _apply(_Reshape(shape, a.shape), a)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _t(a)
    if isinstance(axis, list):
        axis = tuple(axis)
    return _apply(_Sum(axis, keepdims, a.shape), a)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _t(a)
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[i] for i in axes]))
    return tsum(a, axis, keepdims) * (1.0 / n)


def broadcast_to(a, shape) -> Tensor:
    a = _t(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    return _apply(_BroadcastTo(shape), a)


def sum_to(a, shape) -> Tensor:
    a = _t(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    return _apply(_SumTo(shape), a)


def getitem(a, index) -> Tensor:
    a = _t(a)
    index = _check_index(index)
    return _apply(_GetItem(index, a.shape), a)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [_t(x) for x in tensors]
    sizes = tuple(x.shape[axis] for x in ts)
    return _apply(_Concat(axis, sizes), *ts)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_t(x) for x in tensors]
    nd = ts[0].ndim + 1
    ax = axis % nd
    expanded = [reshape(x, x.shape[:ax] + (1,) + x.shape[ax:]) for x in ts]
    return concat(expanded, axis=ax)


def exp(a) -> Tensor:
    return _apply(_EXP, _t(a))


def log(a) -> Tensor:
    return _apply(_LOG, _t(a))


def sigmoid(a) -> Tensor:
    return _apply(_SIGMOID, _t(a))


def tanh(a) -> Tensor:
    return _apply(_TANH, _t(a))


def softplus(a) -> Tensor:
    return _apply(_SOFTPLUS, _t(a))


def square(a) -> Tensor:
    return _apply(_SQUARE, _t(a))


def sqrt(a) -> Tensor:
    return _apply(_SQRT, _t(a))


def power(a, p: float) -> Tensor:
    return _apply(_Power(p), _t(a))


def tabs(a) -> Tensor:
    return _apply(_ABS, _t(a))


def sign(a) -> Tensor:
    return _apply(_SIGN, _t(a))


def relu(a) -> Tensor:
    return _apply(_RELU, _t(a))


def softmax(a, axis: int = -1) -> Tensor:
    return _apply(_Softmax(axis), _t(a))


def stop_gradient(a) -> Tensor:
    return _apply(_STOP, _t(a))


def embedding(table, ids, padding_idx: int | None = 0) -> Tensor:
    """Look up rows of ``table`` by integer ``ids``.

    ``table`` is ``(V, d)`` or batched ``(E, V, d)``; in the batched case ``ids``
    has leading dim ``E`` and episode ``e`` reads from ``table[e]``. Positions
    equal to ``padding_idx`` read zeros and send no gradient back.
    """
    table = _t(table)
    ids = np.asarray(ids, dtype=np.int64)
    v, d = table.shape[-2], table.shape[-1]
    if ids.size and (ids.min() < 0 or ids.max() >= v):
        raise IndexError(f"embedding id out of range [0, {v})")
    if table.ndim == 3:
        if ids.shape[0] != table.shape[0]:
            raise ShapeError("batched embedding needs ids with matching leading dim")
        offs = (np.arange(ids.shape[0], dtype=np.int64) * v).reshape((-1,) + (1,) * (ids.ndim - 1))
        rows = ids + offs
    elif table.ndim == 2:
        rows = ids.copy()
    else:
        raise ShapeError("embedding table must be 2-D or 3-D")
    if padding_idx is not None:
        rows[ids == padding_idx] = -1
    rows = rows.reshape(-1)
    return _apply(_GatherRows(rows, table.shape, ids.shape + (d,)), table)


# ====================================================================== backward


def _walk(outputs: Iterable[Tensor]) -> list[Tensor]:
    """Ancestors of ``outputs`` in topological order (parents first)."""
    order: list[Tensor] = []
    seen: set[int] = set()
    for root in outputs:
        if id(root) in seen:
            continue
        stack = [(root, False)]
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
                if id(p) not in seen:
                    stack.append((p, False))
    return order


def grad(
    output: Tensor,
    wrt: Sequence[Tensor],
    create_graph: bool = False,
    strict: bool = False,
) -> list[Tensor]:
    """Gradient of scalar ``output`` with respect to each tensor in ``wrt``.

    With ``create_graph`` the returned gradients are recorded, so they can be
    differentiated again. Tensors ``output`` does not depend on get zeros, or
    raise ``ValueError`` when ``strict``.
    """
    if output.size != 1:
        raise ShapeError(f"gradient needs a scalar output, got shape {output.shape}")
    wrt = list(wrt)
    targets = {id(t) for t in wrt}

    order = _walk([output])
    relevant: set[int] = set()
    for node in order:
        if id(node) in targets or any(id(p) in relevant for p in node.parents):
            relevant.add(id(node))

    grads: dict[int, Tensor] = {}
    with _grad_mode(create_graph):
        if id(output) in relevant:
            grads[id(output)] = Tensor(np.ones_like(output.data))
        for node in reversed(order):
            if node.op is None or id(node) not in relevant:
                continue
            g = grads.get(id(node))
            if g is None:
                continue
            if id(node) not in targets:
                del grads[id(node)]
            pgs = node.op.backward(g, node, *node.parents)
            for p, pg in zip(node.parents, pgs):
                if pg is None or id(p) not in relevant:
                    continue
                prev = grads.get(id(p))
                grads[id(p)] = pg if prev is None else add(prev, pg)

    result = []
    for t in wrt:
        g = grads.get(id(t))
        if g is None:
            if strict:
                raise ValueError(f"output does not depend on {t.name or 'tensor'}")
            g = Tensor(np.zeros_like(t.data))
        result.append(g)
    return result


# ======================================================================= records


class Record:
    """A frozen computation from named inputs to named outputs.

    Build one with :meth:`trace` (runs a function on fresh input leaves) or
    directly from already-built tensors. Only nodes that feed an output are
    kept; the node list is topologically ordered.
    """

    def __init__(self, inputs: Mapping[str, Tensor], outputs: Mapping[str, Tensor]):
        self.inputs = dict(inputs)
        self.outputs = dict(outputs)
        self.nodes = _walk(self.outputs.values())
        self._input_ids = {id(t): k for k, t in self.inputs.items()}

    @classmethod
    def trace(cls, fn: Callable, inputs: Mapping[str, np.ndarray]) -> "Record":
        leaves = {k: Tensor(np.array(v, dtype=np.float64), requires_grad=True, name=k) for k, v in inputs.items()}
        with enable_grad():
            out = fn(**leaves)
        if isinstance(out, Tensor):
            out = {"out": out}
        return cls(leaves, out)

    def input_values(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.inputs.items()}

    def _bind(self, inputs: Mapping[str, np.ndarray] | None) -> dict[int, np.ndarray]:
        bound: dict[int, np.ndarray] = {}
        inputs = {} if inputs is None else inputs
        unknown = set(inputs) - set(self.inputs)
        if unknown:
            raise KeyError(f"unknown inputs: {sorted(unknown)}")
        for name, leaf in self.inputs.items():
            if name not in inputs:
                raise KeyError(f"unbound input: {name}")
            arr = np.asarray(inputs[name], dtype=np.float64)
            if arr.shape != leaf.shape:
                raise ShapeError(f"input {name}: expected shape {leaf.shape}, got {arr.shape}")
            bound[id(leaf)] = arr
        return bound

    def replay(self, inputs: Mapping[str, np.ndarray] | None = None) -> dict[str, np.ndarray]:
        vals = self._bind(self.input_values() if inputs is None else inputs)
        for node in self.nodes:
            key = id(node)
            if key in vals:
                continue
            if node.op is None:
                vals[key] = node.data
                continue
            out = np.asarray(node.op.forward(*[vals[id(p)] for p in node.parents]))
            if not _finite(out):
                raise NonFiniteError(f"{node.op.name} produced a non-finite value")
            vals[key] = out
        return {k: vals[id(t)] for k, t in self.outputs.items()}

    def rebuild(self, inputs: Mapping[str, np.ndarray] | None = None) -> tuple[dict[str, Tensor], dict[str, Tensor]]:
        """Re-run the record with live tensors; returns (new leaves, new outputs)."""
        src = self.input_values() if inputs is None else inputs
        self._bind(src)
        leaves = {k: Tensor(np.array(src[k], dtype=np.float64), requires_grad=True, name=k) for k in self.inputs}
        mapped: dict[int, Tensor] = {id(t): leaves[k] for k, t in self.inputs.items()}
        with enable_grad():
            for node in self.nodes:
                if id(node) in mapped:
                    continue
                if node.op is None:
                    mapped[id(node)] = node
                    continue
                mapped[id(node)] = _apply(node.op, *[mapped[id(p)] for p in node.parents])
        return leaves, {k: mapped[id(t)] for k, t in self.outputs.items()}


def evaluate(record: Record, inputs: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Replay ``record`` on ``inputs``; identical inputs give bit-identical outputs."""
    return record.replay(inputs)


def gradient(
    record: Record,
    output: str,
    wrt: Sequence[str],
    inputs: Mapping[str, np.ndarray] | None = None,
    strict: bool = False,
) -> dict[str, Tensor]:
    """Gradient map of ``record.outputs[output]`` with respect to the named inputs.

    The returned tensors are differentiable; see :func:`grad_record` for wrapping
    them in a new record.
    """
    return grad_record(record, output, wrt, inputs=inputs, strict=strict).outputs


def grad_record(
    record: Record,
    output: str,
    wrt: Sequence[str],
    inputs: Mapping[str, np.ndarray] | None = None,
    strict: bool = False,
) -> Record:
    """A record whose outputs are the gradients of ``output``, keyed by input name."""
    for name in wrt:
        if name not in record.inputs:
            raise KeyError(f"unknown input: {name}")
    leaves, outs = record.rebuild(inputs)
    gs = grad(outs[output], [leaves[n] for n in wrt], create_graph=True, strict=strict)
    return Record(leaves, dict(zip(wrt, gs)))


def finite_difference_check(
    record: Record,
    output: str,
    wrt: Sequence[str],
    epsilon: float = 1e-4,
    inputs: Mapping[str, np.ndarray] | None = None,
) -> float:
    """Max relative gap between analytic and central-difference gradients.

    Per element: ``|a - c| / (|a| + |c| + 1e-12)``.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    base = {k: np.array(v, dtype=np.float64) for k, v in (record.input_values() if inputs is None else inputs).items()}
    analytic = gradient(record, output, wrt, inputs=base)
    worst = 0.0
    for name in wrt:
        a = analytic[name].data
        x = base[name]
        flat = x.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            fp = float(np.sum(record.replay(base)[output]))
            flat[i] = orig - epsilon
            fm = float(np.sum(record.replay(base)[output]))
            flat[i] = orig
            c = (fp - fm) / (2.0 * epsilon)
            ai = a.reshape(-1)[i]
            err = abs(ai - c) / (abs(ai) + abs(c) + 1e-12)
            worst = max(worst, err)
    return worst
