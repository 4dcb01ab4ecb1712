"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Every differentiable operation returns a new :class:`Tensor` whose ``node``
records the op name, its input tensors and a closure mapping the upstream
gradient to one gradient per input. The graph is rebuilt on every forward
pass; :meth:`Tensor.backward` linearises it into a :class:`Graph` whose node
list is topologically ordered (inputs always precede their consumers).
"""

from __future__ import annotations

import builtins
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Node",
    "Graph",
    "tensor",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "batched_matmul",
    "transpose_last2",
    "permute",
    "reshape",
    "concat_lastdim",
    "split",
    "softmax_lastdim",
    "masked_softmax_lastdim",
    "layer_norm_lastdim",
    "linear",
    "relu",
    "gelu",
    "mean",
    "sum",
    "sum_squares",
    "take_rows",
    "detach",
    "grad_check",
]

DTYPE = np.float64
LN_EPS = 1e-5


@dataclass
class Node:
    op: str
    inputs: tuple["Tensor", ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    saved: dict = field(default_factory=dict)


@dataclass
class Graph:
    """Topologically ordered list of the tensors reachable from a root."""

    nodes: list["Tensor"]

    @classmethod
    def from_root(cls, root: "Tensor") -> "Graph":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            if t.node is not None:
                for parent in t.node.inputs:
                    if id(parent) not in seen:
                        stack.append((parent, False))
        return cls(order)


class Tensor:
    """Dense float64 array that may take part in a differentiation graph."""

    __slots__ = ("data", "requires_grad", "grad", "node", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=DTYPE, copy=True) if not isinstance(data, np.ndarray) \
            else np.ascontiguousarray(data, dtype=DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self.name = name

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
        if self.data.size != 1:
            raise ValueError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        op = self.node.op if self.node is not None else "leaf"
        return f"Tensor(shape={self.shape}, op={op}, requires_grad={self.requires_grad})"

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf requiring grad."""
        if self.node is None:
            raise RuntimeError("backward() called on a tensor that is not part of a graph")
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        graph = Graph.from_root(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=DTYPE)}
        for t in reversed(graph.nodes):
            g = grads.pop(id(t), None)
            if g is None:
                continue
            if t.node is None:
                if t.requires_grad:
                    t.grad = g.copy() if t.grad is None else t.grad + g
                continue
            for parent, pg in zip(t.node.inputs, t.node.backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # operator sugar
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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        return permute(self, axes)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=DTYPE))


def _make(data: np.ndarray, op: str, inputs: Sequence[Tensor], backward, **saved) -> Tensor:
    out = Tensor(data)
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(op, tuple(inputs), backward, saved)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ----------------------------------------------------------------------------
# elementwise
# ----------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, "add", (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, "sub", (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, "mul", (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    return _make(a.data * c, "scale", (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(a.data * mask, "relu", (a,), lambda g: (g * mask,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    x2 = x * x
    th = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + th)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th**2) * dinner),)

    return _make(out, "gelu", (a,), backward)


def detach(a: Tensor) -> Tensor:
    """Stop-gradient: same values, no graph edge."""
    return Tensor(a.data)


# ----------------------------------------------------------------------------
# contractions and layout
# ----------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product with numpy broadcasting over leading (batch) dimensions."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ValueError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(ad @ bd, "matmul", (a, b), backward)


batched_matmul = matmul


def transpose_last2(a: Tensor) -> Tensor:
    if a.ndim < 2:
        raise ValueError(f"transpose_last2: need at least 2-D, got {a.shape}")
    return _make(np.swapaxes(a.data, -1, -2), "transpose_last2", (a,),
                 lambda g: (np.swapaxes(g, -1, -2),))


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(int(x) for x in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ValueError(f"permute: axes {axes} invalid for shape {a.shape}")
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), "permute", (a,), lambda g: (np.transpose(g, inv),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ValueError(f"reshape: cannot reshape {src} into {shape}") from None
    return _make(out, "reshape", (a,), lambda g: (g.reshape(src),))


def concat_lastdim(tensors: Sequence[Tensor]) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    lead = tensors[0].shape[:-1]
    for t in tensors[1:]:
        if t.shape[:-1] != lead:
            raise ValueError(f"concat_lastdim: shapes {tensors[0].shape} and {t.shape} differ "
                             "outside the last dimension")
    sizes = [t.shape[-1] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([t.data for t in tensors], axis=-1), "concat_lastdim", tensors,
                 lambda g: tuple(np.split(g, bounds, axis=-1)))


def split(a: Tensor, sizes: Sequence[int], axis: int = -1) -> list[Tensor]:
    """Split along ``axis`` into consecutive chunks of the given sizes."""
    sizes = [int(s) for s in sizes]
    axis = axis % a.ndim
    if builtins.sum(sizes) != a.shape[axis]:
        raise ValueError(f"split: sizes {sizes} do not sum to extent {a.shape[axis]} of {a.shape}")
    outs = []
    start = 0
    for s in sizes:
        idx = [slice(None)] * a.ndim
        idx[axis] = slice(start, start + s)
        idx = tuple(idx)

        def backward(g, idx=idx):
            full = np.zeros(a.shape, dtype=DTYPE)
            full[idx] = g
            return (full,)

        outs.append(_make(a.data[idx], "split", (a,), backward))
        start += s
    return outs


def take_rows(table: Tensor, indices: np.ndarray) -> Tensor:
    """Gather rows of a 2-D table; gradient scatters back with accumulation."""
    indices = np.asarray(indices, dtype=np.int64)
    if table.ndim != 2:
        raise ValueError(f"take_rows: table must be 2-D, got {table.shape}")

    def backward(g):
        full = np.zeros(table.shape, dtype=DTYPE)
        np.add.at(full, indices.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _make(table.data[indices], "take_rows", (table,), backward)


# ----------------------------------------------------------------------------
# normalisation
# ----------------------------------------------------------------------------


def _softmax_backward(y: np.ndarray):
    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)
    return backward


def softmax_lastdim(a: Tensor) -> Tensor:
    if a.ndim == 0 or a.shape[-1] == 0:
        raise ValueError(f"softmax_lastdim: empty last extent in shape {a.shape}")
    z = a.data - a.data.max(axis=-1, keepdims=True)
    ez = np.exp(z)
    y = ez / ez.sum(axis=-1, keepdims=True)
    return _make(y, "softmax_lastdim", (a,), _softmax_backward(y))


def masked_softmax_lastdim(a: Tensor, mask: np.ndarray) -> Tensor:
    """Softmax over the entries where ``mask`` is true; masked-out entries are exactly 0."""
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    if a.ndim == 0 or a.shape[-1] == 0:
        raise ValueError(f"masked_softmax_lastdim: empty last extent in shape {a.shape}")
    if not mask.any(axis=-1).all():
        raise ValueError("masked_softmax_lastdim: a row has no unmasked entries")
    z = np.where(mask, a.data, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    ez = np.where(mask, np.exp(z), 0.0)
    y = ez / ez.sum(axis=-1, keepdims=True)
    return _make(y, "masked_softmax_lastdim", (a,), _softmax_backward(y))


def layer_norm_lastdim(a: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None,
                       eps: float = LN_EPS) -> Tensor:
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    out = _make(xhat, "layer_norm_lastdim", (a,), backward)
    if gamma is not None:
        out = mul(out, gamma)
    if beta is not None:
        out = add(out, beta)
    return out


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` shaped (in, out)."""
    if x.shape[-1] != weight.shape[0]:
        raise ValueError(f"linear: input shape {x.shape} incompatible with weight {weight.shape}")
    out = matmul(x, weight)
    return add(out, bias) if bias is not None else out


# ----------------------------------------------------------------------------
# reductions
# ----------------------------------------------------------------------------


def sum(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(out), "sum", (a,), backward)


def mean(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else a.shape[axis]
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def sum_squares(a: Tensor) -> Tensor:
    x = a.data
    return _make(np.asarray((x * x).sum()), "sum_squares", (a,), lambda g: (2.0 * g * x,))


# ----------------------------------------------------------------------------
# finite-difference checking
# ----------------------------------------------------------------------------


def grad_check(f: Callable[..., Tensor], inputs: Sequence[Tensor], step: float = 1e-6) -> float:
    """Max over all input coordinates of |analytic - central difference| / max(1, |central|).

    ``f`` must map the given tensors to a scalar tensor. Inputs are perturbed
    in place and restored afterwards.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    out = f(*inputs)
    if out.size != 1:
        raise ValueError(f"grad_check: f must be scalar-valued, got shape {out.shape}")
    out.backward()
    worst = 0.0
    for k, t in enumerate(inputs):
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = f(*inputs).item()
            flat[i] = orig - step
            fm = f(*inputs).item()
            flat[i] = orig
            numeric = (fp - fm) / (2 * step)
            a = analytic.reshape(-1)[i]
            if not (np.isfinite(fp) and np.isfinite(fm) and np.isfinite(a)):
                raise FloatingPointError(f"grad_check: non-finite value at input {k}, index {i}")
            worst = max(worst, abs(a - numeric) / max(1.0, abs(numeric)))
    return worst
