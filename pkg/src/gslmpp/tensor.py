"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations executed while a :class:`Tape` is active, with at least one
input that requires gradients, are appended to that tape together with
their adjoint.  :func:`backward` replays the tape in reverse exactly once.
Outside a tape every op is a plain numpy computation.

Broadcasting is deliberately narrow: same shapes, a scalar operand, or a
row-vector bias added to a matrix.  Everything else raises
:class:`ShapeError`.

    >>> w = Tensor([[2.0]], requires_grad=True)
    >>> with Tape():
    ...     loss = sum(matmul(w, Tensor([[3.0]])))
    >>> backward(loss)
    >>> w.grad
    array([[3.]])
"""

from __future__ import annotations

import contextlib
import contextvars
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

__all__ = [
    "Tensor", "Tape", "ShapeError", "TapeError", "backward", "forbid_shapes",
    "add", "sub", "scalar_mul", "mul", "matmul", "spmm", "relu", "sigmoid",
    "row_softmax", "sum", "mean", "concat", "slice_rows", "take_rows", "take",
    "transpose", "dropout", "l2_norm_rows", "scale_rows", "scale_cols", "pow",
    "threshold", "clip", "bce_with_logits", "as_tensor",
]


class ShapeError(ValueError):
    pass


class ForbiddenShapeError(MemoryError):
    """A tensor shape blocked by ``forbid_shapes`` was requested."""


class TapeError(RuntimeError):
    pass


_active_tape: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar("tape", default=None)
_shape_guard: contextvars.ContextVar["Callable[[tuple], bool] | None"] = contextvars.ContextVar(
    "shape_guard", default=None)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_tape", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        guard = _shape_guard.get()
        if guard is not None and guard(arr.shape):
            raise ForbiddenShapeError(f"allocation of shape {arr.shape} forbidden by active guard")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None
        self.name = name

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
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class _Record:
    __slots__ = ("out", "inputs", "adjoint")

    def __init__(self, out, inputs, adjoint):
        self.out = out
        self.inputs = inputs
        self.adjoint = adjoint


class Tape:
    """Ordered record of differentiable operations, used as a context manager."""

    def __init__(self):
        self.records: list[_Record] = []
        self.consumed = False
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc):
        _active_tape.reset(self._token)
        self._token = None
        return False

    def __len__(self):
        return len(self.records)


@contextlib.contextmanager
def forbid_shapes(predicate: Callable[[tuple], bool]):
    """Raise ``ForbiddenShapeError`` whenever a tensor whose shape matches ``predicate`` is created."""
    token = _shape_guard.set(predicate)
    try:
        yield
    finally:
        _shape_guard.reset(token)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(value: np.ndarray, inputs: Sequence[Tensor], adjoint) -> Tensor:
    out = Tensor(value)
    tape = _active_tape.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        if tape.consumed:
            raise TapeError("tape already consumed by backward()")
        out.requires_grad = True
        out._tape = tape
        tape.records.append(_Record(out, tuple(inputs), adjoint))
    return out


def custom(value: np.ndarray, inputs: Sequence[Tensor], adjoint) -> Tensor:
    """Record a user-defined op; ``adjoint(g)`` returns one gradient (or None) per input."""
    return _emit(value, [as_tensor(t) for t in inputs], adjoint)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every leaf tensor.

    Intermediate results keep ``grad = None`` so their gradients can be freed
    as soon as they have been propagated.
    """
    if loss.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise TapeError("loss was not recorded on an active tape")
    if tape.consumed:
        raise TapeError("tape already consumed by backward()")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    seen: dict[int, Tensor] = {id(loss): loss}
    records = tape.records
    while records:
        rec = records.pop()
        g = grads.pop(id(rec.out), None)
        if g is None:
            continue
        for t, gi in zip(rec.inputs, rec.adjoint(g)):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
                seen[key] = t
    for key, g in grads.items():
        _store(seen[key], g)
    tape.records.clear()
    tape.consumed = True


def _store(t: Tensor, g: np.ndarray):
    g = np.asarray(g, dtype=np.float64).reshape(t.shape)
    t.grad = g if t.grad is None else t.grad + g


# ---------------------------------------------------------------- elementwise

def _is_scalar(t: Tensor) -> bool:
    return t.size == 1


def _broadcast_kind(a: Tensor, b: Tensor) -> str:
    if a.shape == b.shape:
        return "same"
    if _is_scalar(b):
        return "scalar"
    if a.ndim == 2 and (b.shape == (a.shape[1],) or b.shape == (1, a.shape[1])):
        return "row"
    raise ShapeError(f"incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(g: np.ndarray, kind: str, shape: tuple) -> np.ndarray:
    if kind == "same":
        return g
    if kind == "scalar":
        return np.full(shape, g.sum())
    return g.sum(axis=0).reshape(shape)


def _is_row_of(r: Tensor, m: Tensor) -> bool:
    return m.ndim == 2 and r.shape in ((m.shape[1],), (1, m.shape[1]))


def add(a, b) -> Tensor:
    """a + b; either operand may be a scalar or a row-vector bias."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        if _is_scalar(a) and _is_scalar(b):
            if a.ndim < b.ndim:
                a, b = b, a
        elif _is_scalar(a) or _is_row_of(a, b):
            a, b = b, a
    kind = _broadcast_kind(a, b)
    bval = b.data.reshape(-1) if kind == "row" else (b.data.reshape(()) if kind == "scalar" else b.data)
    bshape = b.shape
    return _emit(a.data + bval, (a, b), lambda g: (g, _reduce_to(g, kind, bshape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    kind = _broadcast_kind(a, b)
    bval = b.data.reshape(-1) if kind == "row" else (b.data.reshape(()) if kind == "scalar" else b.data)
    bshape = b.shape
    return _emit(a.data - bval, (a, b), lambda g: (g, -_reduce_to(g, kind, bshape)))


def scalar_mul(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _emit(a.data * c, (a,), lambda g: (g * c,))


def mul(a, b) -> Tensor:
    """Elementwise product of equal shapes, or tensor times a scalar tensor."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and _is_scalar(a):
        a, b = b, a
    if a.shape == b.shape:
        av, bv = a.data, b.data
        return _emit(av * bv, (a, b), lambda g: (g * bv, g * av))
    if not _is_scalar(b):
        raise ShapeError(f"elementwise product needs equal shapes, got {a.shape} and {b.shape}")
    av, s = a.data, b.data.reshape(())
    bshape = b.shape
    return _emit(av * s, (a, b), lambda g: (g * s, np.full(bshape, (g * av).sum())))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _emit(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    y = _sigmoid(x.data)
    return _emit(y, (x,), lambda g: (g * y * (1.0 - y),))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def pow(x, p: float) -> Tensor:
    x = as_tensor(x)
    xv = x.data
    y = xv ** p
    return _emit(y, (x,), lambda g: (g * p * xv ** (p - 1),))


def threshold(x, eps: float) -> Tensor:
    """Keep entries >= eps, zero the rest (epsilon-neighbourhood sparsification)."""
    x = as_tensor(x)
    mask = x.data >= eps
    return _emit(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def clip(x, lo: float, hi: float) -> Tensor:
    x = as_tensor(x)
    mask = (x.data >= lo) & (x.data <= hi)
    return _emit(np.clip(x.data, lo, hi), (x,), lambda g: (g * mask,))


def dropout(x, p: float, rng: np.random.Generator | None, training: bool = True) -> Tensor:
    """Inverted dropout; identity when ``p == 0`` or outside training."""
    x = as_tensor(x)
    if not training or p <= 0.0:
        return x
    if p >= 1.0:
        raise ValueError(f"dropout probability must be < 1, got {p}")
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return _emit(x.data * keep, (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    av, bv = a.data, b.data
    return _emit(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def gram(z) -> Tensor:
    """z @ z.T with a single product in the backward pass."""
    z = as_tensor(z)
    if z.ndim != 2:
        raise ShapeError(f"gram needs a matrix, got {z.shape}")
    zv = z.data
    return _emit(zv @ zv.T, (z,), lambda g: ((g + g.T) @ zv,))


def spmm(s: sp.spmatrix, x) -> Tensor:
    """Constant sparse matrix times tensor; gradients flow to ``x`` only."""
    x = as_tensor(x)
    if x.ndim != 2 or s.shape[1] != x.shape[0]:
        raise ShapeError(f"spmm shape mismatch: {s.shape} @ {x.shape}")
    s = sp.csr_matrix(s)
    st = s.T.tocsr()
    return _emit(np.asarray(s @ x.data), (x,), lambda g: (np.asarray(st @ g),))


def transpose(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"transpose needs a matrix, got {x.shape}")
    return _emit(x.data.T, (x,), lambda g: (g.T,))


def scale_rows(x, s) -> Tensor:
    """Row i of ``x`` multiplied by ``s[i]``."""
    x, s = as_tensor(x), as_tensor(s)
    if x.ndim != 2 or s.shape != (x.shape[0],):
        raise ShapeError(f"scale_rows shape mismatch: {x.shape} and {s.shape}")
    xv, sv = x.data, s.data
    return _emit(xv * sv[:, None], (x, s), lambda g: (g * sv[:, None], (g * xv).sum(axis=1)))


def scale_cols(x, w) -> Tensor:
    """Column j of ``x`` multiplied by ``w[j]``; ``w`` has shape (d,) or (1, d)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 2 or not _is_row_of(w, x):
        raise ShapeError(f"scale_cols shape mismatch: {x.shape} and {w.shape}")
    xv, wv = x.data, w.data.reshape(-1)
    wshape = w.shape
    return _emit(xv * wv[None, :], (x, w),
                 lambda g: (g * wv[None, :], (g * xv).sum(axis=0).reshape(wshape)))


def l2_norm_rows(x, eps: float = 1e-12) -> Tensor:
    """Rows rescaled to unit Euclidean norm; rows with norm <= eps map to zero."""
    x = as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"l2_norm_rows needs a matrix, got {x.shape}")
    xv = x.data
    norm = np.sqrt((xv * xv).sum(axis=1))
    live = norm > eps
    inv = np.where(live, 1.0 / np.where(live, norm, 1.0), 0.0)
    y = xv * inv[:, None]

    def adjoint(g):
        proj = (g * y).sum(axis=1)
        return ((g - y * proj[:, None]) * inv[:, None],)

    return _emit(y, (x,), adjoint)


def weighted_unit_rows(x, w, eps: float = 1e-12) -> Tensor:
    """``l2_norm_rows(scale_cols(x, w))`` without keeping the weighted rows."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 2 or not _is_row_of(w, x):
        raise ShapeError(f"weighted_unit_rows shape mismatch: {x.shape} and {w.shape}")
    xv, wv = x.data, w.data.reshape(-1)
    wshape = w.shape
    v = xv * wv[None, :]
    norm = np.sqrt((v * v).sum(axis=1))
    live = norm > eps
    inv = np.where(live, 1.0 / np.where(live, norm, 1.0), 0.0)
    y = v * inv[:, None]
    del v

    def adjoint(g):
        proj = (g * y).sum(axis=1)
        dv = (g - y * proj[:, None]) * inv[:, None]
        return dv * wv[None, :], (dv * xv).sum(axis=0).reshape(wshape)

    return _emit(y, (x, w), adjoint)


def row_softmax(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"row_softmax needs a matrix, got {x.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)
    return _emit(y, (x,), lambda g: (y * (g - (g * y).sum(axis=1, keepdims=True)),))


# ---------------------------------------------------------------- reductions / indexing

def sum(x, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = as_tensor(x)
    shape = x.shape
    if axis is None:
        return _emit(np.asarray(x.data.sum()), (x,), lambda g: (np.full(shape, float(g)),))
    val = x.data.sum(axis=axis)
    return _emit(val, (x,), lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),))


def mean(x, axis: int | None = None) -> Tensor:
    x = as_tensor(x)
    n = x.size if axis is None else x.shape[axis]
    return scalar_mul(sum(x, axis), 1.0 / n)


def concat(xs: Sequence, axis: int = 1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    if not xs:
        raise ShapeError("concat of nothing")
    other = 1 - axis
    if any(x.ndim != 2 for x in xs) or len({x.shape[other] for x in xs}) != 1:
        raise ShapeError(f"concat shape mismatch along axis {axis}: {[x.shape for x in xs]}")
    bounds = np.cumsum([0] + [x.shape[axis] for x in xs])

    def adjoint(g):
        if axis == 1:
            return tuple(g[:, bounds[k]:bounds[k + 1]] for k in range(len(xs)))
        return tuple(g[bounds[k]:bounds[k + 1]] for k in range(len(xs)))

    return _emit(np.concatenate([x.data for x in xs], axis=axis), xs, adjoint)


def slice_rows(x, start: int, stop: int) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    def adjoint(g):
        full = np.zeros(shape)
        full[start:stop] = g
        return (full,)

    return _emit(x.data[start:stop].copy(), (x,), adjoint)


def take_rows(x, index) -> Tensor:
    """Gather rows (indices may repeat)."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    shape = x.shape

    def adjoint(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _emit(x.data[index], (x,), adjoint)


def take(x, rows, cols) -> Tensor:
    """Sub-matrix ``x[rows][:, cols]`` (indices must be unique)."""
    x = as_tensor(x)
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    shape = x.shape
    ix = np.ix_(rows, cols)

    def adjoint(g):
        full = np.zeros(shape)
        full[ix] = g
        return (full,)

    return _emit(x.data[ix], (x,), adjoint)


def pair_dot(z, rows, cols, block: int = 4096) -> Tensor:
    """Vector of row dot products ``z[rows[k]] . z[cols[k]]``, without keeping the gathered rows."""
    z = as_tensor(z)
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    zv = z.data
    out = np.empty(len(rows))
    for lo in range(0, len(rows), block):
        r, c = rows[lo:lo + block], cols[lo:lo + block]
        out[lo:lo + block] = np.einsum("ij,ij->i", zv[r], zv[c])

    def adjoint(g):
        m = sp.csr_matrix((g, (rows, cols)), shape=(zv.shape[0], zv.shape[0]))
        return (np.asarray(m @ zv) + np.asarray(m.T @ zv),)

    return _emit(out, (z,), adjoint)


def gather(x, rows, cols) -> Tensor:
    """Entries ``x[rows[k], cols[k]]`` as a vector."""
    x = as_tensor(x)
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    shape = x.shape

    def adjoint(g):
        full = np.zeros(shape)
        np.add.at(full, (rows, cols), g)
        return (full,)

    return _emit(x.data[rows, cols], (x,), adjoint)


# ---------------------------------------------------------------- losses

def bce_with_logits(logits, targets: np.ndarray, weights: np.ndarray, clamp: float = 30.0) -> Tensor:
    """Weighted mean binary cross-entropy over entries with positive weight.

    Logits are clamped to [-clamp, clamp] first.
    """
    z = as_tensor(logits)
    y = np.asarray(targets, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if y.shape != z.shape or w.shape != z.shape:
        raise ShapeError(f"bce shapes differ: logits {z.shape}, targets {y.shape}, weights {w.shape}")
    total = w.sum()
    if total <= 0:
        raise ValueError("bce_with_logits: no labelled entries selected")
    zc = np.clip(z.data, -clamp, clamp)
    inside = (z.data >= -clamp) & (z.data <= clamp)
    # softplus(z) - y z, computed stably
    losses = np.maximum(zc, 0.0) - zc * y + np.log1p(np.exp(-np.abs(zc)))
    value = (w * losses).sum() / total
    p = _sigmoid(zc)
    return _emit(np.asarray(value), (z,), lambda g: (float(g) * w * (p - y) * inside / total,))
