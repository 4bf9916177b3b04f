"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable operation in the pipeline is registered here. Tensors
wrap a numpy float64 array; operations build an implicit acyclic graph
through parent links, and ``backward`` walks a topological ordering of that
graph exactly once, accumulating gradients into ``Tensor.grad``.

Storage is always dense: sparsity in the pipeline is expressed
algorithmically (subset sampling), never in the tensor type.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Graph",
    "ShapeError",
    "tensor",
    "zeros",
    "ones",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "scale",
    "matmul",
    "transpose",
    "reshape",
    "concat",
    "index_select",
    "reduce_sum",
    "reduce_mean",
    "reduce_max_axis",
    "softmax_rows",
    "sigmoid",
    "exp",
    "log",
    "relu",
    "layer_norm",
    "backward",
]


class ShapeError(ValueError):
    """Raised when operand shapes violate an operation's contract."""


def _as_array(values) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    return arr


class Tensor:
    """N-dimensional float64 array participating in the autodiff graph.

    ``grad`` is allocated on demand during backward and has the same shape
    as ``data``. Repeated backward calls accumulate into it until
    ``zero_grad`` is called.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op_name")

    def __init__(self, values, requires_grad: bool = False):
        self.data = _as_array(values)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], tuple] | None = None
        self.op_name = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() requires a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        """A graph-free view of this tensor's values."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    # operator sugar; constants are wrapped as non-grad tensors
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op_name}, requires_grad={self.requires_grad})"


def _wrap(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def tensor(values, requires_grad: bool = False) -> Tensor:
    return Tensor(values, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=np.float64), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=np.float64), requires_grad=requires_grad)


def _make(
    data: np.ndarray,
    parents: Sequence[Tensor],
    backward_fn: Callable[[np.ndarray], tuple],
    op_name: str,
) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out.op_name = op_name
    return out


# custom fused operations elsewhere in the package register through this
make_op = _make


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not broadcast-compatible") from None


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bwd, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bwd, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")

    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bwd, "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "div")

    def bwd(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return _make(a.data / b.data, (a, b), bwd, "div")


def neg(a: Tensor) -> Tensor:
    def bwd(g):
        return (-g,)

    return _make(-a.data, (a,), bwd, "neg")


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar constant."""
    c = float(c)

    def bwd(g):
        return (g * c,)

    return _make(a.data * c, (a,), bwd, "scale")


# ---------------------------------------------------------------------------
# linear algebra and shape manipulation
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul requires 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} vs {b.shape}")

    def bwd(g):
        return g @ b.data.T, a.data.T @ g

    return _make(a.data @ b.data, (a, b), bwd, "matmul")


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose requires a 2-d tensor, got {a.shape}")

    def bwd(g):
        return (g.T,)

    return _make(a.data.T.copy(), (a,), bwd, "transpose")


def reshape(a: Tensor, shape) -> Tensor:
    new_shape = tuple(shape)

    def bwd(g):
        return (g.reshape(a.shape),)

    return _make(a.data.reshape(new_shape), (a,), bwd, "reshape")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat requires at least one tensor")
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bwd, "concat")


def scatter_add_rows(idx: np.ndarray, rows: np.ndarray, n_rows: int) -> np.ndarray:
    """Sum ``rows`` into an (n_rows, ...) buffer at positions ``idx`` (repeats add)."""
    flat = rows.reshape(rows.shape[0], -1)
    acc = np.empty((n_rows, flat.shape[1]))
    for j in range(flat.shape[1]):
        acc[:, j] = np.bincount(idx, weights=flat[:, j], minlength=n_rows)
    return acc.reshape((n_rows,) + rows.shape[1:])


def index_select(a: Tensor, indices) -> Tensor:
    """Select rows (axis 0) by an integer index array; repeats allowed."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"index_select expects a flat index vector, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ShapeError(f"index_select: index out of range for {a.shape[0]} rows")

    def bwd(g):
        return (scatter_add_rows(idx, g, a.shape[0]),)

    return _make(a.data[idx], (a,), bwd, "index_select")


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def _check_axis(a: Tensor, axis: int, op: str) -> int:
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"{op}: axis {axis} invalid for shape {a.shape}")
    return axis % a.ndim


def reduce_sum(a: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        def bwd(g):
            return (np.full_like(a.data, float(g)),)

        return _make(np.asarray(a.data.sum()), (a,), bwd, "sum")

    ax = _check_axis(a, axis, "sum")

    def bwd_axis(g):
        return (np.broadcast_to(np.expand_dims(g, ax), a.shape).copy(),)

    return _make(a.data.sum(axis=ax), (a,), bwd_axis, "sum")


def reduce_mean(a: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        n = a.data.size

        def bwd(g):
            return (np.full_like(a.data, float(g) / n),)

        return _make(np.asarray(a.data.mean()), (a,), bwd, "mean")

    ax = _check_axis(a, axis, "mean")
    n = a.shape[ax]

    def bwd_axis(g):
        return (np.broadcast_to(np.expand_dims(g, ax), a.shape).copy() / n,)

    return _make(a.data.mean(axis=ax), (a,), bwd_axis, "mean")


def reduce_max_axis(a: Tensor, axis: int) -> Tensor:
    """Per-slice maximum; the gradient flows to the lowest-index argmax."""
    ax = _check_axis(a, axis, "max")
    arg = np.argmax(a.data, axis=ax)

    def bwd(g):
        acc = np.zeros_like(a.data)
        np.put_along_axis(acc, np.expand_dims(arg, ax), np.expand_dims(g, ax), axis=ax)
        return (acc,)

    return _make(a.data.max(axis=ax), (a,), bwd, "max")


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------

def softmax_rows(a: Tensor) -> Tensor:
    """Softmax along the last axis, computed with max-subtraction."""
    if a.ndim == 0 or a.shape[-1] == 0:
        raise ShapeError(f"softmax_rows requires a nonempty last dimension, got shape {a.shape}")
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return _make(out, (a,), bwd, "softmax_rows")


def sigmoid(a: Tensor) -> Tensor:
    # piecewise form avoids overflow for large |x|
    out = np.where(a.data >= 0, 1.0 / (1.0 + np.exp(-np.abs(a.data))),
                   np.exp(-np.abs(a.data)) / (1.0 + np.exp(-np.abs(a.data))))

    def bwd(g):
        return (g * out * (1.0 - out),)

    return _make(out, (a,), bwd, "sigmoid")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def bwd(g):
        return (g * out,)

    return _make(out, (a,), bwd, "exp")


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise ValueError("log requires strictly positive input")

    def bwd(g):
        return (g / a.data,)

    return _make(np.log(a.data), (a,), bwd, "log")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def bwd(g):
        return (g * mask,)

    return _make(a.data * mask, (a,), bwd, "relu")


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = a.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: affine parameters must have shape ({d},)")
    mu = a.data.mean(axis=-1, keepdims=True)
    centered = a.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = gamma.data * xhat + beta.data

    def bwd(g):
        lead = tuple(range(a.ndim - 1))
        dgamma = (g * xhat).sum(axis=lead)
        dbeta = g.sum(axis=lead)
        dxhat = g * gamma.data
        # standard layer-norm backward over the last axis
        dx = (dxhat - dxhat.mean(axis=-1, keepdims=True)
              - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)) * inv_std
        return dx, dgamma, dbeta

    return _make(out, (a, gamma, beta), bwd, "layer_norm")


# ---------------------------------------------------------------------------
# graph traversal and backward
# ---------------------------------------------------------------------------

class Graph:
    """Topologically ordered record of the operations reaching a set of outputs."""

    def __init__(self, nodes: list[Tensor], outputs: tuple[Tensor, ...]):
        self.nodes = nodes
        self.outputs = outputs

    @classmethod
    def trace(cls, *outputs: Tensor) -> "Graph":
        """Collect every reachable node in topological order (parents first)."""
        order: list[Tensor] = []
        state: dict[int, int] = {}  # id -> 0 visiting, 1 done
        stack: list[tuple[Tensor, bool]] = [(t, False) for t in reversed(outputs)]
        while stack:
            node, processed = stack.pop()
            key = id(node)
            if processed:
                state[key] = 1
                order.append(node)
                continue
            if key in state:
                continue
            state[key] = 0
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in state:
                    stack.append((parent, False))
        return cls(order, outputs)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(tensor) into ``grad`` for every reachable tensor.

    The loss must be scalar. Gradients add to any existing ``grad`` buffers,
    so clear them between steps.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    graph = Graph.trace(loss)
    local: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = local.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            # leaf: accumulate into the persistent grad buffer
            if node.grad is None:
                node.grad = g.copy()
            else:
                node.grad = node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            if key in local:
                local[key] = local[key] + pg
            else:
                local[key] = pg


def zero_grads(params) -> None:
    """Clear gradients on an iterable (or dict) of tensors."""
    values = params.values() if isinstance(params, dict) else params
    for p in values:
        p.zero_grad()
