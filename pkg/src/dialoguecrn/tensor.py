"""Dense tensors with tape-based reverse-mode differentiation.

A :class:`Tensor` wraps a numpy array. Operations executed while a
:class:`Tape` is active (``with Tape() as tape: ...``) and touching at least
one tensor with ``requires_grad`` are appended to that tape together with a
closure mapping the output adjoint to parent adjoints. :func:`backward`
replays the tape in exact reverse order.

Outside any tape nothing is recorded, which is what evaluation code wants.
"""

from __future__ import annotations

import struct
import threading
from pathlib import Path

import numpy as np

from .errors import DimensionError, EmptySupportError, TapeError

_state = threading.local()
_dtype = np.float64


def set_default_dtype(dtype):
    """Switch between float64 (gradient checks) and float32 (speed)."""
    global _dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _dtype = dtype.type


def get_default_dtype():
    return _dtype


def _stack():
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = []
    return stack


def active_tape():
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Ordered record of executed operations.

    Each entry is ``(output, parents, backward_fn)``. Tapes are per thread.
    """

    def __init__(self):
        self.nodes = []
        self.consumed = False

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().pop()
        return False

    def __len__(self):
        return len(self.nodes)


class no_grad:
    """Context manager that suspends recording on the current thread."""

    def __enter__(self):
        _stack().append(None)

    def __exit__(self, *exc):
        _stack().pop()
        return False


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_tape", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.asarray(data)
        if arr.dtype != _dtype:
            arr = arr.astype(_dtype)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._tape = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __len__(self):
        return self.data.shape[0]

    # operators -----------------------------------------------------------
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

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def backward(self):
        backward(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def record_op(data, parents, backward_fn):
    """Wrap ``data`` as an op output and record it if any parent needs grads.

    ``backward_fn(g)`` must return one adjoint (or ``None``) per parent.
    """
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._tape = tape
        tape.nodes.append((out, parents, backward_fn))
    return out


def backward(loss):
    """Populate ``.grad`` on every tensor the scalar ``loss`` depends on.

    Leaf gradients accumulate across calls on distinct tapes; a tape can only
    be replayed once.
    """
    if loss.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        if loss.requires_grad:
            loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1
            return
        raise TapeError("loss was not produced under an active tape")
    if tape.consumed:
        raise TapeError("tape already replayed; run a fresh forward before backward")
    tape.consumed = True

    grads = {id(loss): np.ones_like(loss.data)}
    for out, parents, fn in reversed(tape.nodes):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        out.grad = g
        for p, pg in zip(parents, fn(g)):
            if pg is None or not p.requires_grad:
                continue
            if p._tape is None:
                p.grad = np.array(pg, dtype=p.data.dtype) if p.grad is None else p.grad + pg
            else:
                k = id(p)
                grads[k] = grads[k] + pg if k in grads else pg


# helpers -----------------------------------------------------------------

def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a, b, op):
    if a.data.shape == b.data.shape:
        return
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} are incompatible") from None


# elementwise -------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return record_op(a.data + b.data, (a, b),
                     lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return record_op(a.data - b.data, (a, b),
                     lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data
    return record_op(ad * bd, (a, b),
                     lambda g: (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    ad, bd = a.data, b.data
    return record_op(ad / bd, (a, b),
                     lambda g: (_unbroadcast(g / bd, ad.shape),
                                _unbroadcast(-g * ad / (bd * bd), bd.shape)))


def neg(x):
    return record_op(-x.data, (x,), lambda g: (-g,))


def tanh(x):
    y = np.tanh(x.data)
    return record_op(y, (x,), lambda g: (g * (1.0 - y * y),))


def sigmoid(x):
    y = 0.5 * (np.tanh(0.5 * x.data) + 1.0)
    return record_op(y, (x,), lambda g: (g * y * (1.0 - y),))


def relu(x):
    pos = x.data > 0
    return record_op(np.where(pos, x.data, 0.0).astype(x.data.dtype), (x,), lambda g: (g * pos,))


def exp(x):
    y = np.exp(x.data)
    return record_op(y, (x,), lambda g: (g * y,))


def log(x):
    xd = x.data
    return record_op(np.log(xd), (x,), lambda g: (g / xd,))


def tabs(x):
    sgn = np.sign(x.data)
    return record_op(np.abs(x.data), (x,), lambda g: (g * sgn,))


_ELEMENTWISE = {
    "add": add, "sub": sub, "mul": mul, "div": div,
    "tanh": tanh, "sigmoid": sigmoid, "relu": relu,
    "exp": exp, "log": log, "abs": tabs, "neg": neg,
}


def elementwise(op, *operands):
    """Dispatch a pointwise op by name, e.g. ``elementwise("tanh", x)``."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*(as_tensor(o) for o in operands))


# linear algebra ------------------------------------------------------------

def matmul(a, b):
    """Matrix product with numpy batching rules; 1-D operands are promoted."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 0 or b.ndim == 0:
        raise DimensionError(f"matmul: scalar operand, shapes {a.shape} and {b.shape}")
    if a.ndim == 1:
        out = matmul(reshape(a, (1, a.shape[0])), b)
        return reshape(out, out.shape[:-2] + out.shape[-1:])
    if b.ndim == 1:
        out = matmul(a, reshape(b, (b.shape[0], 1)))
        return reshape(out, out.shape[:-1])
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not align")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul: batch shapes of {a.shape} and {b.shape} differ") from None
    ad, bd = a.data, b.data

    def grad(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return record_op(ad @ bd, (a, b), grad)


# reductions ----------------------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x, axis=None, keepdims=False):
    axes = _norm_axis(axis, x.ndim)
    shape = x.shape

    def grad(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return record_op(x.data.sum(axis=axes, keepdims=keepdims), (x,), grad)


def mean(x, axis=None, keepdims=False):
    axes = _norm_axis(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return tsum(x, axes, keepdims) * (1.0 / count)


def masked_max(x, mask, axis=-1):
    """Max over ``axis`` restricted to positions where ``mask`` is true.

    Ties resolve to the lowest index, which is where the adjoint is routed.
    """
    axis = axis % x.ndim
    m = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    if not m.any(axis=axis).all():
        raise EmptySupportError("masked_max: a slice has no unmasked positions")
    z = np.where(m, x.data, -np.inf)
    idx = np.expand_dims(z.argmax(axis=axis), axis)
    out = np.take_along_axis(x.data, idx, axis=axis)
    shape = x.shape

    def grad(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.put_along_axis(full, idx, np.expand_dims(g, axis), axis=axis)
        return (full,)

    return record_op(np.squeeze(out, axis), (x,), grad)


# normalizations -------------------------------------------------------------

def masked_softmax(scores, mask=None, axis=-1):
    """Softmax restricted to unmasked positions; masked outputs are exactly 0."""
    scores = as_tensor(scores)
    x = scores.data
    if mask is None:
        m = np.ones(x.shape, dtype=bool)
    else:
        try:
            m = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        except ValueError:
            raise DimensionError(f"masked_softmax: mask {np.shape(mask)} vs scores {x.shape}") from None
    if x.size == 0 or not m.any(axis=axis).all():
        raise EmptySupportError("masked_softmax: every position is masked")
    z = np.where(m, x, -np.inf)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.where(m, np.exp(z), 0.0)
    y = e / e.sum(axis=axis, keepdims=True)
    return record_op(y, (scores,),
                     lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def softmax(x, axis=-1):
    return masked_softmax(x, None, axis)


def log_softmax(x, axis=-1):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    y = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def grad(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return record_op(y, (x,), grad)


def dropout(x, rate, rng, training):
    """Inverted dropout. Returns ``x`` itself when inactive."""
    if not training or rate == 0.0:
        return x
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return mul(x, Tensor(keep))


# shape manipulation ---------------------------------------------------------

def reshape(x, shape):
    old = x.shape
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {old} as {shape}") from None
    return record_op(data, (x,), lambda g: (g.reshape(old),))


def transpose(x, axes=None):
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return record_op(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def swapaxes(x, a1, a2):
    return record_op(np.swapaxes(x.data, a1, a2), (x,), lambda g: (np.swapaxes(g, a1, a2),))


def _is_basic(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def getitem(x, idx):
    shape = x.shape

    def grad(g):
        full = np.zeros(shape, dtype=g.dtype)
        if _is_basic(idx):
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return record_op(x.data[idx], (x,), grad)


def take(x, indices, axis=0):
    """Gather along ``axis``; repeated indices accumulate in the adjoint."""
    indices = np.asarray(indices, dtype=np.intp)
    axis = axis % x.ndim
    shape = x.shape

    def grad(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, (slice(None),) * axis + (indices,), g)
        return (full,)

    return record_op(np.take(x.data, indices, axis=axis), (x,), grad)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat: nothing to concatenate")
    ndim = tensors[0].ndim
    axis = axis % ndim
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise DimensionError(
            f"concat: shapes {[t.shape for t in tensors]} disagree off axis {axis}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return record_op(data, tuple(tensors), lambda g: tuple(np.split(g, bounds, axis=axis)))


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    try:
        data = np.stack([t.data for t in tensors], axis=axis)
    except ValueError:
        raise DimensionError(f"stack: shapes {[t.shape for t in tensors]} differ") from None
    ax = axis % data.ndim
    return record_op(data, tuple(tensors),
                     lambda g: tuple(np.take(g, i, axis=ax) for i in range(len(tensors))))


# debug dump ---------------------------------------------------------------

def dump_tensor(t, path):
    """Write ``rank, extents`` as int64 LE followed by row-major float64 LE values."""
    arr = np.ascontiguousarray(as_tensor(t).data, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<q", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}q", *arr.shape))
        fh.write(arr.tobytes())


def load_tensor(path):
    raw = Path(path).read_bytes()
    (rank,) = struct.unpack_from("<q", raw, 0)
    shape = struct.unpack_from(f"<{rank}q", raw, 8)
    offset = 8 + 8 * rank
    count = int(np.prod(shape)) if rank else 1
    if len(raw) != offset + 8 * count:
        raise ValueError(f"{path}: expected {count} values after header")
    return Tensor(np.frombuffer(raw, dtype="<f8", offset=offset).reshape(shape).copy())
