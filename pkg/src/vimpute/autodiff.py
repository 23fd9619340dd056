"""Dense 2-D tensors with reverse-mode automatic differentiation.

Every tensor is a float64 matrix; vectors are stored as ``1 x n`` rows. Each
differentiable op records its parents and a backward rule. Node ids come from a
global counter, so creation order is a valid topological order of the tape and
:meth:`Tensor.backward` simply visits reachable nodes by descending id.

Broadcasting is restricted to a ``1 x n`` row vector against an ``m x n``
matrix (bias addition). Anything else is a :class:`ShapeError`.
"""
from __future__ import annotations

import itertools
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

from .errors import ContractError, ShapeError

_ids = itertools.count()

Number = Union[int, float]


class _Partial:
    """Gradient contribution to a sub-block of a parent (slicing ops)."""

    __slots__ = ("index", "value")

    def __init__(self, index, value):
        self.index = index
        self.value = value


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "node_id", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim > 2:
            raise ShapeError(f"tensors are at most 2-D, got shape {arr.shape}")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.parents: tuple = ()
        self.backward_fn: Optional[Callable] = None
        self.node_id = next(_ids)
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return not self.parents

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self) -> None:
        backward(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = any(p.requires_grad for p in parents)
    out.parents = tuple(parents) if out.requires_grad else ()
    out.backward_fn = backward_fn if out.requires_grad else None
    out.node_id = next(_ids)
    out.name = None
    return out


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _broadcast_kind(a: Tensor, b: Tensor, op: str) -> int:
    """0 = same shape, 1 = b is a row broadcast over a, 2 = a is a row broadcast over b."""
    if a.shape == b.shape:
        return 0
    if b.shape[0] == 1 and b.shape[1] == a.shape[1]:
        return 1
    if a.shape[0] == 1 and a.shape[1] == b.shape[1]:
        return 2
    raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _reduce(g: np.ndarray, kind: int, side: int) -> np.ndarray:
    # side 0 -> gradient for a, side 1 -> gradient for b
    if (kind == 1 and side == 1) or (kind == 2 and side == 0):
        return g.sum(axis=0, keepdims=True)
    return g


# ---------------------------------------------------------------- binary ops


def add(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return add_scalar(a, float(b))
    a = _as_tensor(a)
    kind = _broadcast_kind(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (_reduce(g, kind, 0), _reduce(g, kind, 1)))


def sub(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return add_scalar(a, -float(b))
    a = _as_tensor(a)
    kind = _broadcast_kind(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (_reduce(g, kind, 0), -_reduce(g, kind, 1)))


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return scale(a, float(b))
    a = _as_tensor(a)
    kind = _broadcast_kind(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (_reduce(g * bd, kind, 0), _reduce(g * ad, kind, 1)))


def div(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return scale(a, 1.0 / float(b))
    a = _as_tensor(a)
    kind = _broadcast_kind(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(out, (a, b), lambda g: (_reduce(g / bd, kind, 0), _reduce(-g * out / bd, kind, 1)))


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, (a,), lambda g: (g * c,))


def add_scalar(a: Tensor, c: float) -> Tensor:
    return _make(a.data + c, (a,), lambda g: (g,))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """``x @ w.T + b`` for a weight stored as ``out x in``."""
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {w.shape}")
    xd, wd = x.data, w.data
    out = xd @ wd.T
    if b is None:
        return _make(out, (x, w), lambda g: (g @ wd, g.T @ xd))
    if b.shape != (1, w.shape[0]):
        raise ShapeError(f"linear: bias {b.shape} does not match weight {w.shape}")
    return _make(out + b.data, (x, w, b), lambda g: (g @ wd, g.T @ xd, g.sum(axis=0, keepdims=True)))


# ----------------------------------------------------------------- unary ops


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return _make(s, (a,), lambda g: (g * s * (1.0 - s),))


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return _make(t, (a,), lambda g: (g * (1.0 - t * t),))


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0.0
    return _make(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,))


negmax0 = relu


def softplus(a: Tensor) -> Tensor:
    x = a.data
    return _make(np.logaddexp(0.0, x), (a,), lambda g: (g * _sigmoid(x),))


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.data)
    return _make(e, (a,), lambda g: (g * e,))


def log(a: Tensor) -> Tensor:
    x = a.data
    return _make(np.log(x), (a,), lambda g: (g / x,))


def square(a: Tensor) -> Tensor:
    x = a.data
    return _make(x * x, (a,), lambda g: (2.0 * g * x,))


def sqrt(a: Tensor) -> Tensor:
    r = np.sqrt(a.data)
    return _make(r, (a,), lambda g: (0.5 * g / r,))


def lstm_gates(z: Tensor, c_prev: Tensor) -> Tensor:
    """Fused LSTM state update from gate pre-activations ``z`` (blocks i, f, g, o).

    Returns ``[h | c]`` as one ``P x 2H`` tensor.
    """
    H = c_prev.shape[1]
    if z.shape != (c_prev.shape[0], 4 * H):
        raise ShapeError(f"lstm_gates: pre-activations {z.shape} vs cell state {c_prev.shape}")
    zd = z.data
    i = _sigmoid(zd[:, :H])
    f = _sigmoid(zd[:, H:2 * H])
    g = np.tanh(zd[:, 2 * H:3 * H])
    o = _sigmoid(zd[:, 3 * H:])
    cp = c_prev.data
    c = f * cp + i * g
    tc = np.tanh(c)
    h = o * tc

    def backward_fn(grad):
        gh, gc = grad[:, :H], grad[:, H:]
        dc = gc + gh * o * (1.0 - tc * tc)
        dz = np.concatenate(
            [dc * g * i * (1.0 - i), dc * cp * f * (1.0 - f), dc * i * (1.0 - g * g), gh * tc * o * (1.0 - o)],
            axis=1,
        )
        return dz, dc * f

    return _make(np.concatenate([h, c], axis=1), (z, c_prev), backward_fn)


_UNARY = {
    "sigmoid": sigmoid,
    "tanh": tanh,
    "relu": relu,
    "negmax0": relu,
    "softplus": softplus,
    "exp": exp,
    "log": log,
    "square": square,
    "neg": neg,
}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(kind: str, a: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Dispatch an elementwise op by name."""
    if kind in _BINARY:
        if b is None:
            raise ContractError(f"{kind} needs two operands")
        _check_same(a, b, kind)
        return _BINARY[kind](a, b)
    if kind in _UNARY:
        if b is not None:
            raise ContractError(f"{kind} takes one operand")
        return _UNARY[kind](a)
    raise ContractError(f"unknown elementwise op {kind!r}")


# ------------------------------------------------------------- reductions


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = a.shape
    return _make(np.array([[a.data.sum()]]), (a,), lambda g: (np.full(shape, g[0, 0]),))


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    shape = a.shape
    return _make(np.array([[a.data.mean()]]), (a,), lambda g: (np.full(shape, g[0, 0] / n),))


def sum_rows(a: Tensor) -> Tensor:
    """Column sums as a ``1 x n`` row."""
    shape = a.shape
    return _make(a.data.sum(axis=0, keepdims=True), (a,), lambda g: (np.broadcast_to(g, shape),))


def transpose(a: Tensor) -> Tensor:
    return _make(a.data.T.copy(), (a,), lambda g: (g.T,))


# ------------------------------------------------------------ structural ops


def concat(tensors, b: Optional[Tensor] = None, axis: int = 0) -> Tensor:
    """Concatenate along ``axis`` (0 = rows, 1 = columns).

    Accepts either a sequence of tensors or two tensors ``concat(a, b, axis)``.
    """
    if isinstance(tensors, Tensor):
        parts = [tensors] if b is None else [tensors, b]
    else:
        parts = list(tensors)
        if b is not None:
            parts.append(b)
    if not parts:
        raise ContractError("concat of nothing")
    if axis not in (0, 1):
        raise ContractError(f"axis must be 0 or 1, got {axis}")
    other = 1 - axis
    ref = parts[0].shape[other]
    for p in parts[1:]:
        if p.shape[other] != ref:
            raise ShapeError(f"concat: shape mismatch {parts[0].shape} vs {p.shape} along axis {axis}")
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum([0] + sizes)
    data = np.concatenate([p.data for p in parts], axis=axis)

    def backward_fn(g):
        if axis == 0:
            return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(parts)))
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _make(data, parts, backward_fn)


def rows(a: Tensor, start: int, stop: int) -> Tensor:
    index = (slice(start, stop), slice(None))
    return _make(a.data[start:stop], (a,), lambda g: (_Partial(index, g),))


def cols(a: Tensor, start: int, stop: int) -> Tensor:
    index = (slice(None), slice(start, stop))
    return _make(a.data[:, start:stop], (a,), lambda g: (_Partial(index, g),))


def repeat_rows(a: Tensor, n: int) -> Tensor:
    """Tile a ``k x m`` tensor ``n`` times vertically."""
    k = a.shape[0]
    return _make(np.tile(a.data, (n, 1)), (a,), lambda g: (g.reshape(n, k, -1).sum(axis=0),))


# ----------------------------------------------------------------- backward


def _topo_nodes(root: Tensor) -> list:
    seen = {id(root): root}
    stack = [root]
    while stack:
        node = stack.pop()
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                seen[id(p)] = p
                stack.append(p)
    return sorted(seen.values(), key=lambda t: t.node_id, reverse=True)


def _accumulate(buffers: dict, node: Tensor, contribution) -> None:
    key = id(node)
    if isinstance(contribution, _Partial):
        buf = buffers.get(key)
        if buf is None:
            buf = np.zeros(node.shape)
            buffers[key] = buf
        buf[contribution.index] += contribution.value
        return
    buf = buffers.get(key)
    if buf is None:
        buffers[key] = np.array(contribution, dtype=np.float64, copy=True)
    else:
        buf += contribution


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``.grad`` of every reachable leaf."""
    if root.shape != (1, 1):
        raise ContractError(f"backward needs a scalar (1x1) root, got {root.shape}")
    if not root.requires_grad:
        return
    buffers = {id(root): np.ones((1, 1))}
    for node in _topo_nodes(root):
        g = buffers.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            _accumulate(buffers, parent, pg)


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
