"""Dense float64 tensors recorded on a reverse-mode gradient tape."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class Tensor:
    """A numpy buffer plus gradient bookkeeping.

    Operations on tensors that require gradients are appended to the active
    :class:`Tape`; outside a tape everything is a plain forward computation.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_tape")
    __array_ufunc__ = None  # make ndarray (op) Tensor dispatch to Tensor's reflected ops

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple:
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
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __len__(self):
        return len(self.data)

    # operator sugar
    def __add__(self, o): return add(self, o)
    def __radd__(self, o): return add(o, self)
    def __sub__(self, o): return sub(self, o)
    def __rsub__(self, o): return sub(o, self)
    def __mul__(self, o): return mul(self, o)
    def __rmul__(self, o): return mul(o, self)
    def __truediv__(self, o): return div(self, o)
    def __rtruediv__(self, o): return div(o, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, o): return matmul(self, o)
    def __rmatmul__(self, o): return matmul(o, self)
    def __pow__(self, p): return pow(self, p)
    def __getitem__(self, key): return slice_(self, key)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        return mean(self, axis, keepdims)


@dataclass
class Record:
    op: str
    inputs: tuple
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


_ACTIVE: list["Tape"] = []


class Tape:
    """Ordered record of differentiable operations.

    Used as a context manager; records are appended in execution order, so the
    inputs of every record precede it.
    """

    def __init__(self):
        self.records: list[Record] = []

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def __len__(self):
        return len(self.records)

    def record(self, op, inputs, output, backward):
        output.requires_grad = True
        output._tape = self
        self.records.append(Record(op, tuple(inputs), output, backward))

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad."""
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        produced = {id(r.output) for r in self.records}
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for rec in reversed(self.records):
            g = grads.pop(id(rec.output), None)
            if g is None:
                continue
            for inp, gi in zip(rec.inputs, rec.backward(g)):
                if gi is None or not isinstance(inp, Tensor) or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if key not in produced:
                    leaves[key] = inp
        for key, leaf in leaves.items():
            g = grads[key]
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        if not self.records and loss.requires_grad:
            loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0


def active_tape() -> Tape | None:
    return _ACTIVE[-1] if _ACTIVE else None


def backward(loss: Tensor) -> None:
    """Backpropagate through the tape that recorded ``loss``."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        if loss.requires_grad:
            loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
        return
    tape.backward(loss)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(op: str, data: np.ndarray, inputs: Sequence, backward) -> Tensor:
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(isinstance(t, Tensor) and t.requires_grad for t in inputs):
        tape.record(op, inputs, out, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# --------------------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return _emit("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _emit("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _emit("neg", -a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    return _emit("mul", a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data
    return _emit("div", out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _emit("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = np.empty_like(a.data)
    pos = a.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    e = np.exp(a.data[~pos])
    out[~pos] = e / (1.0 + e)
    return _emit("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _emit("exp", out, (a,), lambda g: (g * out,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    with np.errstate(divide="ignore", invalid="ignore"):
        return _emit("sqrt", out, (a,),
                     lambda g: (np.where(out > 0, g / (2.0 * np.where(out > 0, out, 1.0)), 0.0),))


def pow(a, p: float) -> Tensor:
    """Elementwise ``a**p`` for a constant exponent.

    For ``p < 1`` the derivative at ``a == 0`` is taken as 0 (subgradient), which
    keeps losses like ``||e||**0.5`` differentiable at a perfect prediction.
    """
    a = as_tensor(a)
    p = float(p)
    out = a.data ** p

    def back(g):
        if p == 0.0:
            return (np.zeros_like(g),)
        if p >= 1.0:
            return (g * p * a.data ** (p - 1.0),)
        nz = a.data != 0
        safe = np.where(nz, a.data, 1.0)
        return (np.where(nz, g * p * safe ** (p - 1.0), 0.0),)

    return _emit("pow", out, (a,), back)


# --------------------------------------------------------------------------- reductions

def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _emit("sum", out, (a,), back)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else np.prod([a.shape[x] for x in np.atleast_1d(axis)])
    if count == 0:
        return Tensor(np.zeros(a.data.sum(axis=axis, keepdims=keepdims).shape))
    return mul(sum(a, axis, keepdims), 1.0 / count)


def softmax_lastdim(a) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _emit("softmax_lastdim", out, (a,), back)


# --------------------------------------------------------------------------- linear algebra / shape

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return _emit("matmul", a.data @ b.data, (a, b),
                 lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose: expected 2-d tensor, got shape {a.shape}")
    return _emit("transpose", a.data.T, (a,), lambda g: (g.T,))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {shape}") from None
    return _emit("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]}") from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in ts])

    def back(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(ts)))

    return _emit("concat", out, ts, back)


def slice_(a, key) -> Tensor:
    """Basic (view) indexing: ints, slices, Ellipsis."""
    a = as_tensor(a)
    try:
        out = a.data[key]
    except IndexError as exc:
        raise ShapeError(f"slice: {exc} for shape {a.shape}") from None

    def back(g):
        full = np.zeros_like(a.data)
        full[key] += g
        return (full,)

    return _emit("slice", np.array(out, copy=True), (a,), back)


def gather_rows(a, index) -> Tensor:
    """``out[k] = a[index[k]]`` along the first axis."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < -a.shape[0] or index.max() >= a.shape[0]):
        raise ShapeError(f"gather_rows: index out of range for shape {a.shape}")

    def back(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _emit("gather_rows", a.data[index], (a,), back)


def scatter_add_rows(a, index, n_rows: int) -> Tensor:
    """``out[index[k]] += a[k]`` into ``n_rows`` zero rows; adjoint of :func:`gather_rows`."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    if len(index) != a.shape[0]:
        raise ShapeError(f"scatter_add_rows: {len(index)} indices for shape {a.shape}")
    if index.size and (index.min() < 0 or index.max() >= n_rows):
        raise ShapeError(f"scatter_add_rows: index out of range for {n_rows} rows")
    out = np.zeros((n_rows,) + a.shape[1:])
    np.add.at(out, index, a.data)
    return _emit("scatter_add_rows", out, (a,), lambda g: (g[index],))


def spmm(matrix, a) -> Tensor:
    """Constant sparse (scipy) matrix times a dense 2-d tensor."""
    a = as_tensor(a)
    if matrix.shape[1] != a.shape[0]:
        raise ShapeError(f"spmm: incompatible shapes {matrix.shape} and {a.shape}")
    return _emit("spmm", np.asarray(matrix @ a.data), (a,),
                 lambda g: (np.asarray(matrix.T @ g),))


def batch_stat_norm(a, degenerate_var: float = 1e-12, degenerate_eps: float = 1e-5):
    """Normalize each column of a 2-d tensor by its batch mean and (population) variance.

    Columns whose variance is below ``degenerate_var`` are divided by
    ``sqrt(var + degenerate_eps)`` instead, so a constant column maps to zeros.
    Returns ``(normalized, batch_mean, batch_var)``; the statistics are plain arrays.
    """
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"batch_stat_norm: expected (batch, channels), got {a.shape}")
    n = a.shape[0]
    mu = a.data.mean(axis=0)
    var = a.data.var(axis=0)
    denom = np.where(var < degenerate_var, np.sqrt(var + degenerate_eps), np.sqrt(var))
    xhat = (a.data - mu) / denom if n else a.data.copy()

    def back(g):
        if n == 0:
            return (g,)
        # same form in both branches: only xhat and the denominator enter
        return ((g - g.mean(axis=0) - xhat * (g * xhat).mean(axis=0)) / denom,)

    return _emit("batch_stat_norm", xhat, (a,), back), mu, var
