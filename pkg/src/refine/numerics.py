"""Dense arrays with a tape-based reverse-mode autodiff.

Arrays wrap immutable numpy buffers (float32 by default). Operations on arrays
that require gradients are recorded on the innermost active :class:`Tape`;
outside a tape every operation is a plain forward computation.

Reductions, softmax and matrix products accumulate in float64 and round back
to the storage dtype, which keeps results independent of how many rows are
processed at once.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "Array",
    "Tape",
    "ShapeError",
    "precision",
    "get_dtype",
    "record_op",
    "backward",
    "finite_diff_check",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "neg",
    "exp",
    "silu",
    "softmax",
    "log_softmax",
    "sum",
    "mean",
    "l2_norm",
    "l2_normalize",
    "rms_norm",
    "gather_rows",
    "pick",
    "slice_rows",
    "concat_rows",
    "reshape",
    "clip",
    "minimum",
    "cross_entropy",
]

_local = threading.local()


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for a primitive."""


def get_dtype() -> np.dtype:
    return getattr(_local, "dtype", np.dtype(np.float32))


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the storage dtype of newly created arrays.

    Used by gradient checks, which need float64 to resolve finite differences.
    """
    prev = get_dtype()
    _local.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _local.dtype = prev


def _tape_stack() -> list:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = []
    return stack


def _active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Array:
    """An immutable n-d array of floating point values.

    ``requires_grad`` marks a leaf (typically a parameter) whose gradient
    should be reported by :meth:`Tape.backward`.
    """

    __slots__ = ("data", "requires_grad", "is_leaf", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=get_dtype())
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"Array {name or ''} contains non-finite values".replace("  ", " "))
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self.is_leaf = True
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False, leaf: bool = True) -> Array:
        out = object.__new__(cls)
        arr = np.asarray(arr)
        arr.flags.writeable = False
        out.data = arr
        out.requires_grad = requires_grad
        out.is_leaf = leaf
        out.name = None
        return out

    @classmethod
    def zeros(cls, shape, requires_grad: bool = False) -> Array:
        return cls._wrap(np.zeros(shape, dtype=get_dtype()), requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self) -> int:
        return self.data.shape[0]

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> Array:
        return Array._wrap(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Array(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, _as_array(other, self))

    def __radd__(self, other):
        return add(_as_array(other, self), self)

    def __sub__(self, other):
        return sub(self, _as_array(other, self))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        if isinstance(key, slice):
            start, stop, step = key.indices(self.shape[0])
            if step != 1:
                raise ShapeError("slice_rows only supports unit step")
            return slice_rows(self, start, stop)
        if isinstance(key, (int, np.integer)):
            idx = int(key) % self.shape[0]
            return _squeeze0(slice_rows(self, idx, idx + 1))
        raise TypeError(f"unsupported index {key!r}")


def _as_array(x, like: Array) -> Array:
    if isinstance(x, Array):
        return x
    return Array._wrap(np.full(like.shape, x, dtype=like.data.dtype))


class _Record:
    __slots__ = ("outputs", "inputs", "backward")

    def __init__(self, outputs, inputs, backward):
        self.outputs = outputs
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of primitive operations on tracked arrays.

    Use as a context manager; operations whose inputs require gradients are
    recorded while the tape is active::

        with Tape() as tape:
            loss = mean(mul(p, p))
        grads = tape.backward(loss)
    """

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self) -> Tape:
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self.records)

    def backward(self, loss: Array, wrt: Iterable[Array] = ()) -> dict[Array, np.ndarray]:
        return backward(self, loss, wrt)


def record_op(outputs: Sequence[np.ndarray], inputs: Sequence[Array],
              backward_fn: Callable) -> tuple[Array, ...]:
    """Wrap raw output buffers as arrays and record them on the active tape.

    ``backward_fn(*grad_outputs)`` must return one gradient (or None) per input.
    Gradients for outputs that did not receive any are passed as zeros.
    """
    tape = _tracking_tape(inputs)
    if tape is None:
        return tuple(Array._wrap(o) for o in outputs)
    outs = tuple(Array._wrap(o, True, leaf=False) for o in outputs)
    tape.records.append(_Record(outs, tuple(inputs), backward_fn))
    return outs


def _tracking_tape(inputs) -> Tape | None:
    stack = getattr(_local, "tapes", None)
    if not stack:
        return None
    for x in inputs:
        if x.requires_grad:
            return stack[-1]
    return None


def _op(out: np.ndarray, inputs: Sequence[Array], backward_fn: Callable) -> Array:
    tape = _tracking_tape(inputs)
    if tape is None:
        return Array._wrap(out)
    res = Array._wrap(out, True, leaf=False)
    tape.records.append(_Record((res,), tuple(inputs), backward_fn))
    return res


def backward(tape: Tape, loss: Array, wrt: Iterable[Array] = ()) -> dict[Array, np.ndarray]:
    """Reverse pass over ``tape`` seeded with d(loss)/d(loss) = 1.

    Returns a mapping from every tracked leaf that appears on the tape (plus
    any array in ``wrt``) to its gradient. Untouched leaves get zeros.
    """
    if loss.data.size != 1 or loss.ndim > 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Array] = {}
    for rec in reversed(tape.records):
        gouts = [grads.pop(id(o), None) for o in rec.outputs]
        if all(g is None for g in gouts):
            for x in rec.inputs:
                if x.requires_grad and x.is_leaf:
                    leaves.setdefault(id(x), x)
            continue
        gouts = [np.zeros_like(o.data) if g is None else g for g, o in zip(gouts, rec.outputs)]
        gins = rec.backward(*gouts)
        for x, g in zip(rec.inputs, gins):
            if not x.requires_grad:
                continue
            if x.is_leaf:
                leaves.setdefault(id(x), x)
            if g is None:
                continue
            g = np.asarray(g, dtype=x.data.dtype)
            if g.shape != x.shape:
                raise ShapeError(f"gradient shape {g.shape} does not match input shape {x.shape}")
            prev = grads.get(id(x))
            grads[id(x)] = g if prev is None else prev + g
    for x in wrt:
        leaves.setdefault(id(x), x)
    out = {}
    for key, x in leaves.items():
        g = grads.get(key)
        out[x] = np.zeros_like(x.data) if g is None else g
    return out


# ---------------------------------------------------------------- primitives

def _f64(x: np.ndarray) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _mm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.dtype == np.float32:
        return (_f64(a) @ _f64(b)).astype(np.float32)
    return a @ b


def matmul(a: Array, b: Array) -> Array:
    """Matrix product for (m, n) @ (n, p), (n,) @ (n, p) and (m, n) @ (n,)."""
    if a.ndim not in (1, 2) or b.ndim not in (1, 2) or (a.ndim == 1 and b.ndim == 1) \
            or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    A, B = a.data, b.data

    def bw(g):
        if A.ndim == 2 and B.ndim == 2:
            return _mm(g, B.T), _mm(A.T, g)
        if A.ndim == 1:
            return _mm(B, g), np.outer(A, g).astype(A.dtype)
        return np.outer(g, B).astype(A.dtype), _mm(g, A)

    return _op(_mm(A, B), (a, b), bw)


def add(a: Array, b: Array) -> Array:
    """Elementwise sum. ``b`` may be a row vector added to every row of ``a``."""
    if a.shape == b.shape:
        return _op(a.data + b.data, (a, b), lambda g: (g, g))
    if a.ndim == 2 and b.ndim == 1 and a.shape[1] == b.shape[0]:
        return _op(a.data + b.data, (a, b),
                   lambda g: (g, g.sum(axis=0, dtype=np.float64).astype(g.dtype)))
    raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not conform "
                     "(only row-wise bias broadcasting is allowed)")


def sub(a: Array, b: Array) -> Array:
    if a.shape != b.shape:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} differ")
    return _op(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Array, b: Array) -> Array:
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    A, B = a.data, b.data
    return _op(A * B, (a, b), lambda g: (g * B, g * A))


def scale(a: Array, s: float) -> Array:
    s = float(s)
    dt = a.data.dtype
    return _op((a.data * s).astype(dt, copy=False), (a,), lambda g: ((g * s).astype(dt, copy=False),))


def neg(a: Array) -> Array:
    return _op(-a.data, (a,), lambda g: (-g,))


def exp(a: Array) -> Array:
    out = np.exp(a.data)
    return _op(out, (a,), lambda g: (g * out,))


def silu(a: Array) -> Array:
    x = _f64(a.data)
    sig = 1.0 / (1.0 + np.exp(-x))
    dt = a.data.dtype
    out = (x * sig).astype(dt, copy=False)
    return _op(out, (a,), lambda g: ((g * sig * (1.0 + x * (1.0 - sig))).astype(dt, copy=False),))


def _log_softmax64(x: np.ndarray) -> np.ndarray:
    x = _f64(x)
    m = x.max(axis=-1, keepdims=True)
    z = x - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(a: Array) -> Array:
    """Softmax over the last axis."""
    dt = a.data.dtype
    p = np.exp(_log_softmax64(a.data))

    def bw(g):
        g64 = _f64(g)
        return ((g64 - (g64 * p).sum(axis=-1, keepdims=True)) * p).astype(dt, copy=False),

    return _op(p.astype(dt, copy=False), (a,), bw)


def log_softmax(a: Array) -> Array:
    """Log-softmax over the last axis with max subtraction."""
    dt = a.data.dtype
    ls = _log_softmax64(a.data)
    p = np.exp(ls)

    def bw(g):
        g64 = _f64(g)
        return (g64 - p * g64.sum(axis=-1, keepdims=True)).astype(dt, copy=False),

    return _op(ls.astype(dt, copy=False), (a,), bw)


def sum(a: Array) -> Array:  # noqa: A001 - mirrors numpy naming
    dt = a.data.dtype
    out = np.asarray(a.data.sum(dtype=np.float64), dtype=dt)
    return _op(out, (a,), lambda g: (np.full(a.shape, g, dtype=dt),))


def mean(a: Array) -> Array:
    dt = a.data.dtype
    n = a.data.size
    if n == 0:
        raise ShapeError("mean of an empty array")
    out = np.asarray(a.data.sum(dtype=np.float64) / n, dtype=dt)
    return _op(out, (a,), lambda g: (np.full(a.shape, g / n, dtype=dt),))


def l2_norm(a: Array) -> Array:
    """Euclidean norm of all entries (scalar)."""
    dt = a.data.dtype
    x = _f64(a.data)
    n = float(np.sqrt((x * x).sum()))

    def bw(g):
        if n == 0.0:
            return np.zeros_like(a.data),
        return (g * x / n).astype(dt, copy=False),

    return _op(np.asarray(n, dtype=dt), (a,), bw)


def l2_normalize(a: Array, eps: float = 1e-6) -> Array:
    """Scale each row (last axis) to unit Euclidean norm."""
    dt = a.data.dtype
    x = _f64(a.data)
    r = np.sqrt((x * x).sum(axis=-1, keepdims=True) + eps)
    y = x / r

    def bw(g):
        g64 = _f64(g)
        return ((g64 - y * (g64 * y).sum(axis=-1, keepdims=True)) / r).astype(dt, copy=False),

    return _op(y.astype(dt, copy=False), (a,), bw)


def rms_norm(a: Array, gain: Array, eps: float = 1e-6) -> Array:
    """Row-wise RMS normalisation followed by an elementwise gain."""
    if gain.shape != (a.shape[-1],):
        raise ShapeError(f"rms_norm: gain shape {gain.shape} does not match rows of {a.shape}")
    dt = a.data.dtype
    x = _f64(a.data)
    w = _f64(gain.data)
    d = x.shape[-1]
    r = np.sqrt((x * x).sum(axis=-1, keepdims=True) / d + eps)
    xh = x / r

    def bw(g):
        g64 = _f64(g)
        gx = g64 * w
        dx = (gx - xh * (gx * xh).sum(axis=-1, keepdims=True) / d) / r
        dw = (g64 * xh).reshape(-1, d).sum(axis=0)
        return dx.astype(dt, copy=False), dw.astype(dt, copy=False)

    return _op((xh * w).astype(dt, copy=False), (a, gain), bw)


def gather_rows(table: Array, idx) -> Array:
    """Rows ``table[idx]`` (embedding lookup); repeated indices accumulate."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"gather_rows: indices must be 1-d, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"gather_rows: index out of range for table with {table.shape[0]} rows")

    def bw(g):
        out = np.zeros(table.shape, dtype=np.float64)
        np.add.at(out, idx, g)
        return out.astype(table.data.dtype),

    return _op(table.data[idx], (table,), bw)


def pick(a: Array, idx) -> Array:
    """Select ``a[i, idx[i]]`` for every row i."""
    idx = np.asarray(idx, dtype=np.int64)
    if a.ndim != 2 or idx.shape != (a.shape[0],):
        raise ShapeError(f"pick: need (m, n) array and m indices, got {a.shape} and {idx.shape}")
    rows = np.arange(a.shape[0])

    def bw(g):
        out = np.zeros_like(a.data)
        out[rows, idx] = g
        return out,

    return _op(a.data[rows, idx], (a,), bw)


def slice_rows(a: Array, start: int, stop: int) -> Array:
    """Contiguous slice ``a[start:stop]`` along the leading (sequence) axis."""
    if not 0 <= start <= stop <= a.shape[0]:
        raise ShapeError(f"slice_rows: [{start}:{stop}] out of range for shape {a.shape}")

    def bw(g):
        out = np.zeros_like(a.data)
        out[start:stop] = g
        return out,

    return _op(a.data[start:stop].copy(), (a,), bw)


def _squeeze0(a: Array) -> Array:
    shape = a.shape
    return _op(a.data.reshape(shape[1:]), (a,), lambda g: (g.reshape(shape),))


def concat_rows(arrays: Sequence[Array]) -> Array:
    """Concatenate along the leading (sequence) axis."""
    if not arrays:
        raise ShapeError("concat_rows: nothing to concatenate")
    tail = arrays[0].shape[1:]
    for x in arrays:
        if x.shape[1:] != tail:
            raise ShapeError(f"concat_rows: trailing shapes {tail} and {x.shape[1:]} differ")
    bounds = np.cumsum([0] + [x.shape[0] for x in arrays])

    def bw(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(arrays)))

    return _op(np.concatenate([x.data for x in arrays], axis=0), tuple(arrays), bw)


def reshape(a: Array, shape) -> Array:
    shape = tuple(shape)
    if int(np.prod(shape)) != a.data.size:
        raise ShapeError(f"reshape: cannot view shape {a.shape} as {shape}")
    old = a.shape
    return _op(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def clip(a: Array, lo: float, hi: float) -> Array:
    x = a.data
    inside = (x >= lo) & (x <= hi)
    return _op(np.clip(x, lo, hi), (a,), lambda g: (g * inside,))


def minimum(a: Array, b: Array) -> Array:
    """Elementwise minimum; ties send the gradient to ``a``."""
    if a.shape != b.shape:
        raise ShapeError(f"minimum: shapes {a.shape} and {b.shape} differ")
    take_a = a.data <= b.data
    return _op(np.where(take_a, a.data, b.data), (a, b),
               lambda g: (g * take_a, g * ~take_a))


def cross_entropy(logits: Array, targets) -> Array:
    """Mean token cross-entropy of ``logits`` (m, V) against integer targets."""
    return neg(mean(pick(log_softmax(logits), targets)))


# ------------------------------------------------------------ gradient check

def finite_diff_check(f: Callable, params, step: float = 1e-3) -> float:
    """Compare tape gradients of scalar ``f(params)`` to central differences.

    ``params`` is an :class:`Array` or a mapping of name -> Array; ``f`` is
    called with the same structure. Returns the max over coordinates of
    ``|analytic - numeric| / (|numeric| + 1e-8)``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    single = isinstance(params, Array)
    named: dict = {"_": params} if single else dict(params)

    def call(d: Mapping) -> Array:
        return f(d["_"] if single else d)

    tracked = {k: Array._wrap(v.data.copy(), requires_grad=True) for k, v in named.items()}
    with Tape() as tape:
        loss = call(tracked)
    if not np.isfinite(loss.data).all():
        raise ValueError("finite_diff_check: f returned a non-finite value")
    grads = tape.backward(loss, wrt=tracked.values())

    worst = 0.0
    for key, base in named.items():
        analytic = grads[tracked[key]].reshape(-1).astype(np.float64)
        flat = base.data.reshape(-1)
        for i in range(flat.size):
            vals = []
            for sgn in (1.0, -1.0):
                pert = flat.copy()
                pert[i] = pert[i] + sgn * step
                trial = dict(named)
                trial[key] = Array._wrap(pert.reshape(base.shape))
                out = call(trial).item()
                if not np.isfinite(out):
                    raise ValueError("finite_diff_check: f returned a non-finite value")
                vals.append(out)
            numeric = (vals[0] - vals[1]) / (2.0 * step)
            err = abs(analytic[i] - numeric) / (abs(numeric) + 1e-8)
            worst = max(worst, err)
    return worst
