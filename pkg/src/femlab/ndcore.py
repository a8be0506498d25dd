"""Dense rank-<=2 tensors with reverse-mode differentiation.

Every backward rule is written with the same recorded ops as the forward
pass.  Calling :func:`grad` with ``create_graph=True`` therefore yields a
gradient that is itself part of a graph and can be differentiated again.
Denoising score matching needs exactly this: the input gradient of the
energy sits inside the loss whose parameter gradient we train on.

Only the op set the models use is implemented.  The GELU chain stops at
its second derivative; asking for a third raises :class:`GraphError`.
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf as _erf

__all__ = [
    "Tensor",
    "GraphError",
    "NonFiniteError",
    "tensor",
    "no_grad",
    "grad",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "transpose",
    "reshape",
    "sum",
    "mean",
    "square",
    "squared_norm",
    "exp",
    "log",
    "gelu",
    "softplus",
    "sigmoid",
    "logsumexp",
    "log_softmax",
    "softmax",
    "concat",
    "take_rows",
    "forward_mlp",
    "input_gradient",
    "second_order_param_grad",
]

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

_grad_enabled = True


class GraphError(ValueError):
    """Raised for malformed graphs: missing leaves, unsupported derivatives, bad shapes."""


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def _grad_mode(enabled: bool):
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = enabled
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "parents", "backward_fn", "op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim > 2:
            raise GraphError(f"rank {arr.ndim} not supported (max 2)")
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("non-finite values in tensor data")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: Callable | None = None
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

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_not_scalar()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag}, op={self.op})"

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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return sum(self, axis)


def _raise_not_scalar():
    raise GraphError("item() needs a single-element tensor")


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple, backward_fn, op: str) -> Tensor:
    if data.ndim > 2:
        raise GraphError(f"{op}: result rank {data.ndim} exceeds 2")
    # a NaN or Inf anywhere makes the sum non-finite
    if not math.isfinite(data.sum()):
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = parents
        out.backward_fn = backward_fn
    else:
        out.requires_grad = False
        out.parents = ()
        out.backward_fn = None
    return out


# ---------------------------------------------------------------------------
# shape plumbing

def _sum_to(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Reduce a broadcast result back to ``shape``."""
    if x.shape == shape:
        return x
    return _make(_sum_to_array(x.data, shape), (x,),
                 lambda g: (_broadcast_to(g, x.shape),), "sum_to")


def _sum_to_array(a: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    lead = a.ndim - len(shape)
    if lead:
        a = a.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and a.shape[i] != 1)
    if axes:
        a = a.sum(axis=axes, keepdims=True)
    return a.reshape(shape)


def _broadcast_to(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    if x.shape == shape:
        return x
    return _make(np.broadcast_to(x.data, shape), (x,),
                 lambda g: (_sum_to(g, x.shape),), "broadcast_to")


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    x = _as_tensor(x)
    if x.shape == tuple(shape):
        return x
    return _make(x.data.reshape(shape), (x,), lambda g: (reshape(g, x.shape),), "reshape")


def transpose(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    return _make(x.data.T, (x,), lambda g: (transpose(g),), "transpose")


# ---------------------------------------------------------------------------
# arithmetic

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_sum_to(g, a.shape), _sum_to(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_sum_to(g, a.shape), _sum_to(neg(g), b.shape)), "sub")


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make(-a.data, (a,), lambda g: (neg(g),), "neg")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def backward(g):
        ga = _sum_to(mul(g, b), a.shape) if a.requires_grad else None
        gb = _sum_to(mul(g, a), b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def backward(g):
        ga = _sum_to(div(g, b), a.shape) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = _sum_to(neg(div(mul(g, a), square(b))), b.shape)
        return ga, gb

    return _make(a.data / b.data, (a, b), backward, "div")


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise GraphError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def backward(g):
        ga = matmul(g, transpose(b)) if a.requires_grad else None
        gb = matmul(transpose(a), g) if b.requires_grad else None
        return ga, gb

    return _make(a.data @ b.data, (a, b), backward, "matmul")


def sum(x, axis: int | None = None) -> Tensor:
    x = _as_tensor(x)
    if axis is None:
        return _make(np.asarray(x.data.sum()), (x,),
                     lambda g: (_broadcast_to(g, x.shape),), "sum")
    if x.ndim != 2:
        raise GraphError("axis sums need a rank-2 tensor")
    keep = (1, x.shape[1]) if axis == 0 else (x.shape[0], 1)

    def backward(g):
        return (_broadcast_to(reshape(g, keep), x.shape),)

    return _make(x.data.sum(axis=axis), (x,), backward, "sum")


def mean(x, axis: int | None = None) -> Tensor:
    x = _as_tensor(x)
    n = x.size if axis is None else x.shape[axis]
    return mul(sum(x, axis), 1.0 / n)


def square(x) -> Tensor:
    x = _as_tensor(x)
    return _make(x.data * x.data, (x,), lambda g: (mul(g, mul(x, 2.0)),), "square")


def squared_norm(x, axis: int | None = None) -> Tensor:
    return sum(square(x), axis)


def exp(x) -> Tensor:
    x = _as_tensor(x)
    return _make(np.exp(x.data), (x,), lambda g: (mul(g, exp(x)),), "exp")


def log(x) -> Tensor:
    x = _as_tensor(x)
    with np.errstate(invalid="ignore", divide="ignore"):
        data = np.log(x.data)
    return _make(data, (x,), lambda g: (div(g, x),), "log")


# ---------------------------------------------------------------------------
# activations

def _phi(a: np.ndarray) -> np.ndarray:
    return _INV_SQRT_2PI * np.exp(-0.5 * a * a)


def _Phi(a: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + _erf(a * _INV_SQRT2))


def gelu(x) -> Tensor:
    """Exact GELU, ``x * Phi(x)``."""
    x = _as_tensor(x)
    d = x.data
    cdf = _Phi(d)
    cache: dict[str, np.ndarray] = {"cdf": cdf}
    return _make(d * cdf, (x,), lambda g: (mul(g, _gelu_d1(x, cache)),), "gelu")


def _gelu_d1(x: Tensor, cache: dict) -> Tensor:
    # Phi and phi are shared with the forward node; erf is the dominant cost.
    if "pdf" not in cache:
        cache["pdf"] = _phi(x.data)
    d = x.data
    return _make(cache["cdf"] + d * cache["pdf"], (x,),
                 lambda g: (mul(g, _gelu_d2(x, cache)),), "gelu_d1")


def _gelu_d2(x: Tensor, cache: dict) -> Tensor:
    d = x.data

    def backward(g):
        raise GraphError("third derivative of gelu is not supported")

    return _make(cache["pdf"] * (2.0 - d * d), (x,), backward, "gelu_d2")


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)

    def backward(g):
        s = sigmoid(x)
        return (mul(g, mul(s, sub(1.0, s))),)

    return _make(0.5 * (1.0 + np.tanh(0.5 * x.data)), (x,), backward, "sigmoid")


def softplus(x) -> Tensor:
    x = _as_tensor(x)
    return _make(np.logaddexp(0.0, x.data), (x,), lambda g: (mul(g, sigmoid(x)),), "softplus")


def logsumexp(x, axis: int | None = 1) -> Tensor:
    x = _as_tensor(x)
    if axis is None:
        m = x.data.max()
        val = np.asarray(m + np.log(np.exp(x.data - m).sum()))
        return _make(val, (x,), lambda g: (mul(_broadcast_to(g, x.shape), softmax(x, None)),),
                     "logsumexp")
    if x.ndim != 2 or axis != 1:
        raise GraphError("logsumexp supports axis=1 on rank-2 tensors or axis=None")
    m = x.data.max(axis=1, keepdims=True)
    val = (m + np.log(np.exp(x.data - m).sum(axis=1, keepdims=True)))[:, 0]

    def backward(g):
        gcol = _broadcast_to(reshape(g, (x.shape[0], 1)), x.shape)
        return (mul(gcol, softmax(x, 1)),)

    return _make(val, (x,), backward, "logsumexp")


def log_softmax(x, axis: int | None = 1) -> Tensor:
    x = _as_tensor(x)
    lse = logsumexp(x, axis)
    if axis is None:
        return sub(x, lse)
    return sub(x, reshape(lse, (x.shape[0], 1)))


def softmax(x, axis: int | None = 1) -> Tensor:
    return exp(log_softmax(x, axis))


# ---------------------------------------------------------------------------
# indexing

def concat(tensors: Sequence, axis: int = 1) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if any(t.ndim != 2 for t in ts) or axis not in (0, 1):
        raise GraphError("concat needs rank-2 tensors")
    sizes = [t.shape[axis] for t in ts]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(_slice(g, int(bounds[i]), int(bounds[i + 1]), axis) if t.requires_grad else None
                     for i, t in enumerate(ts))

    try:
        data = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise GraphError(f"concat shape mismatch: {[t.shape for t in ts]}") from exc
    return _make(data, tuple(ts), backward, "concat")


def _slice(x: Tensor, start: int, stop: int, axis: int) -> Tensor:
    data = x.data[:, start:stop] if axis == 1 else x.data[start:stop]
    full = x.shape

    def backward(g):
        return (_pad(g, start, full, axis),)

    return _make(data.copy(), (x,), backward, "slice")


def _pad(x: Tensor, start: int, full: tuple[int, int], axis: int) -> Tensor:
    out = np.zeros(full)
    stop = start + x.shape[axis]
    if axis == 1:
        out[:, start:stop] = x.data
    else:
        out[start:stop] = x.data
    return _make(out, (x,), lambda g: (_slice(g, start, stop, axis),), "pad")


def take_rows(table, index) -> Tensor:
    """Gather rows of a rank-2 table (embedding lookup)."""
    table = _as_tensor(table)
    idx = np.asarray(index, dtype=np.int64)
    if idx.ndim != 1:
        raise GraphError("take_rows needs a 1-D index")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"row index out of range for table with {table.shape[0]} rows")
    n_rows = table.shape[0]
    return _make(table.data[idx], (table,),
                 lambda g: (_scatter_rows(g, idx, n_rows),), "take_rows")


def _scatter_rows(x: Tensor, idx: np.ndarray, n_rows: int) -> Tensor:
    out = np.zeros((n_rows, x.shape[1]))
    np.add.at(out, idx, x.data)
    return _make(out, (x,), lambda g: (take_rows(g, idx),), "scatter_rows")


# ---------------------------------------------------------------------------
# differentiation

def _toposort(root: Tensor) -> list[Tensor]:
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
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def grad(output: Tensor, inputs: Iterable[Tensor], grad_output: Tensor | None = None,
         create_graph: bool = False, allow_unused: bool = False) -> list[Tensor]:
    """Gradients of ``output`` with respect to each of ``inputs``.

    With ``create_graph=True`` the returned tensors carry their own graph and
    can be differentiated again.
    """
    inputs = list(inputs)
    if grad_output is None:
        if output.size != 1:
            raise GraphError("grad of a non-scalar output needs grad_output")
        grad_output = Tensor(np.ones_like(output.data))
    if not output.requires_grad:
        if allow_unused:
            return [Tensor(np.zeros_like(x.data)) for x in inputs]
        raise GraphError("output does not depend on any input requiring grad")

    order = _toposort(output)
    members = {id(n) for n in order}
    for x in inputs:
        if id(x) not in members and not allow_unused:
            raise GraphError("input is not part of the output's graph")

    wanted = {id(x) for x in inputs}
    grads: dict[int, Tensor] = {id(output): grad_output}
    with _grad_mode(create_graph):
        for node in reversed(order):
            g = grads.get(id(node))
            if g is None or node.backward_fn is None:
                continue
            if id(node) not in wanted:
                del grads[id(node)]
            parent_grads = node.backward_fn(g)
            for p, pg in zip(node.parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                prev = grads.get(id(p))
                grads[id(p)] = pg if prev is None else add(prev, pg)
    out = []
    for x in inputs:
        g = grads.get(id(x))
        out.append(g if g is not None else Tensor(np.zeros_like(x.data)))
    return out


def input_gradient(f: Tensor, x: Tensor, create_graph: bool = True) -> Tensor:
    """``df/dx`` for scalar ``f``; kept differentiable by default."""
    if f.size != 1:
        raise GraphError("input_gradient needs a scalar function value")
    return grad(f, [x], create_graph=create_graph)[0]


def second_order_param_grad(loss: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
    """Parameter gradients of a loss that may contain input-gradient nodes."""
    if loss.size != 1:
        raise GraphError("loss must be scalar")
    return [g.data for g in grad(loss, params, allow_unused=True)]


def forward_mlp(weights: Sequence[tuple[Tensor, Tensor]], x: Tensor) -> Tensor:
    """GELU MLP ending in a single linear unit.

    A rank-1 input gives a scalar; a rank-2 batch gives one value per row.
    """
    x = _as_tensor(x)
    single = x.ndim == 1
    h = reshape(x, (1, x.shape[0])) if single else x
    if weights[-1][0].shape[1] != 1:
        raise GraphError("final layer must output one unit")
    for i, (w, b) in enumerate(weights):
        if h.shape[1] != w.shape[0]:
            raise GraphError(f"layer {i}: input width {h.shape[1]} != weight rows {w.shape[0]}")
        h = add(matmul(h, w), b)
        if i < len(weights) - 1:
            h = gelu(h)
    out = reshape(h, (h.shape[0],))
    return reshape(out, ()) if single else out
