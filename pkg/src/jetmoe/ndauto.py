"""Dense tensors with tape-based reverse-mode automatic differentiation.

A :class:`Tensor` wraps a float32/float64 numpy array. Gradients are only
tracked for tensors explicitly watched by a :class:`Tape`; any operation with
at least one tracked input is recorded on that tape, and
:meth:`Tape.backward` replays the record in reverse.

    with Tape() as tape:
        tape.watch(w)
        loss = ndauto.sum(w * w)
        tape.backward(loss)
    w.grad  # -> 2 * w.data

Leaving the ``with`` block releases the watched tensors so later forward
passes (evaluation, finite differences) run untracked. The record itself
survives, so ``backward`` may still be called after the block.
"""
from __future__ import annotations

import weakref
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DimensionError, PrecisionError, StateError

FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

# large finite negative: masked logits vanish under exp() without inf - inf
MASK_VALUE = -1e30

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """n-dimensional float array that can participate in a gradient tape."""

    __slots__ = ("data", "grad", "name", "_tape_ref", "__weakref__")
    __array_priority__ = 100  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in FLOAT_DTYPES:
            if dtype is None and (arr.dtype.kind in "iub" or arr.dtype.kind == "f"):
                arr = arr.astype(np.float64)
            else:
                raise TypeError(f"unsupported tensor dtype {arr.dtype}")
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.name = name
        self._tape_ref: weakref.ref | None = None

    # weak so that tape -> node -> tensor -> tape is not a reference cycle
    @property
    def _tape(self) -> "Tape | None":
        return self._tape_ref() if self._tape_ref is not None else None

    @_tape.setter
    def _tape(self, tape: "Tape | None") -> None:
        self._tape_ref = weakref.ref(tape) if tape is not None else None

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def tracked(self) -> bool:
        return self._tape is not None and self._tape.active

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    # -- operator sugar ------------------------------------------------
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

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims: bool = False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)


class Tape:
    """Ordered record of differentiable operations.

    Only tensors passed to :meth:`watch` (and values derived from them while
    the tape is active) are recorded.
    """

    def __init__(self):
        self.active = True
        self._nodes: list[tuple[Tensor, tuple[Tensor, ...], BackwardFn]] = []
        self._watched: list[Tensor] = []
        self._members: set[int] = set()

    def __enter__(self) -> "Tape":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def __len__(self) -> int:
        return len(self._nodes)

    def watch(self, *tensors) -> None:
        for t in _flatten(tensors):
            if not isinstance(t, Tensor):
                raise TypeError(f"can only watch Tensors, got {type(t).__name__}")
            if not self.active:
                raise StateError("cannot watch tensors on a closed tape")
            other = t._tape
            if other is not None and other is not self and other.active:
                raise StateError(f"{t!r} is already watched by another active tape")
            if id(t) in self._members:
                continue
            t._tape = self
            self._watched.append(t)
            self._members.add(id(t))

    def close(self) -> None:
        """Stop recording and release watched tensors (the record is kept)."""
        self.active = False
        for t in self._watched:
            if t._tape is self:
                t._tape = None

    def record(self, out: Tensor, parents: tuple[Tensor, ...], backward: BackwardFn) -> None:
        out._tape = self
        self._members.add(id(out))
        self._nodes.append((out, parents, backward))

    def backward(self, loss: Tensor) -> list[np.ndarray]:
        """Fill ``.grad`` of every watched tensor with d(loss)/d(tensor).

        Gradients are recomputed from scratch on each call, so repeated calls
        without new forward operations give identical results. Watched
        tensors that ``loss`` does not depend on get zero gradients.
        """
        if loss.size != 1:
            raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
        if id(loss) not in self._members:
            raise StateError("loss was not produced on this tape")
        adjoint: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for out, parents, fn in reversed(self._nodes):
            g = adjoint.pop(id(out), None)
            if g is None:
                continue
            for parent, pg in zip(parents, fn(g)):
                if pg is None or id(parent) not in self._members:
                    continue
                key = id(parent)
                prev = adjoint.get(key)
                adjoint[key] = pg if prev is None else prev + pg
        grads = []
        for t in self._watched:
            g = adjoint.get(id(t))
            if g is None:
                g = np.zeros_like(t.data)
            t.grad = np.asarray(g, dtype=t.dtype).reshape(t.shape)
            grads.append(t.grad)
        return grads


def _flatten(items) -> Iterable:
    for item in items:
        if isinstance(item, Tensor):
            yield item
        elif isinstance(item, dict):
            yield from _flatten(item.values())
        elif isinstance(item, (list, tuple)) or hasattr(item, "__iter__") and not isinstance(item, np.ndarray):
            yield from _flatten(item)
        else:
            yield item


def backward(loss: Tensor) -> list[np.ndarray]:
    """Run the reverse pass on the tape that produced ``loss``."""
    if loss._tape is None:
        raise StateError("no active tape: loss is untracked or its tape was discarded")
    return loss._tape.backward(loss)


# ----------------------------------------------------------------------
# plumbing


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


def _tape_of(parents: Sequence[Tensor]) -> Tape | None:
    tape = None
    for p in parents:
        t = p._tape
        if t is None or not t.active:
            continue
        if tape is None:
            tape = t
        elif t is not tape:
            raise StateError("operation mixes tensors from two different tapes")
    return tape


def _emit(data: np.ndarray, parents: tuple[Tensor, ...], fn: BackwardFn) -> Tensor:
    out = Tensor(data)
    tape = _tape_of(parents)
    if tape is not None:
        tape.record(out, parents, fn)
    return out


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        b = as_tensor(b, like=a)
    else:
        a = as_tensor(a, like=b)
    if a.dtype != b.dtype:
        raise TypeError(f"dtype mismatch: {a.dtype} vs {b.dtype}")
    return a, b


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ----------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _emit(a.data + b.data, (a, b),
                 lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _emit(a.data - b.data, (a, b),
                 lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _emit(a.data * b.data, (a, b),
                 lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data
    return _emit(out, (a, b),
                 lambda g: (unbroadcast(g / b.data, a.shape),
                            unbroadcast(-g * out / b.data, b.shape)))


def neg(x: Tensor) -> Tensor:
    return _emit(-x.data, (x,), lambda g: (-g,))


def power(x: Tensor, exponent: float) -> Tensor:
    p = float(exponent)
    out = x.data ** p
    return _emit(out, (x,), lambda g: (g * p * x.data ** (p - 1),))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _emit(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return _emit(np.log(x.data), (x,), lambda g: (g / x.data,))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return _emit(s, (x,), lambda g: (g * s * (1 - s),))


def silu(x: Tensor) -> Tensor:
    """x * sigmoid(x)."""
    s = _sigmoid(x.data)
    return _emit(x.data * s, (x,), lambda g: (g * s * (1 + x.data * (1 - s)),))


def log_sigmoid(x: Tensor) -> Tensor:
    """log(sigmoid(x)) = -log(1 + exp(-x)), stable for large |x|."""
    out = -np.logaddexp(0.0, -x.data).astype(x.dtype)
    return _emit(out, (x,), lambda g: (g * _sigmoid(-x.data),))


def masked_fill(x: Tensor, mask: np.ndarray, value: float = MASK_VALUE) -> Tensor:
    """Replace entries where ``mask`` is true by a constant (no gradient there)."""
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, np.asarray(value, dtype=x.dtype), x.data)
    return _emit(out, (x,), lambda g: (unbroadcast(np.where(mask, 0, g), x.shape),))


# ----------------------------------------------------------------------
# linear algebra and shape ops


ROW_BLOCK = 64


def _mm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``a @ b`` whose rows do not depend on how many rows ``a`` has.

    BLAS picks kernels (and hence summation orders) by problem size, so a
    token's output could change when other tokens join its expert bucket.
    Running every product on zero-padded blocks of ROW_BLOCK rows makes each
    row's result a function of that row alone.
    """
    m = a.shape[-2]
    pad = -m % ROW_BLOCK
    if pad:
        a = np.concatenate([a, np.zeros(a.shape[:-2] + (pad, a.shape[-1]), a.dtype)], axis=-2)
    if a.shape[-2] == ROW_BLOCK:
        return (a @ b)[..., :m, :]
    blocks = [a[..., i:i + ROW_BLOCK, :] @ b for i in range(0, a.shape[-2], ROW_BLOCK)]
    return np.concatenate(blocks, axis=-2)[..., :m, :]


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes must match exactly."""
    a, b = _pair(a, b)
    if (a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]
            or a.shape[:-2] != b.shape[:-2]):
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return _emit(_mm(a.data, b.data), (a, b),
                 lambda g: (g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g))


def linear(x: Tensor, w: Tensor) -> Tensor:
    """``x @ w.T`` for x [..., d_in] and a weight matrix w [d_out, d_in]."""
    x, w = _pair(x, w)
    if w.ndim != 2 or x.shape[-1] != w.shape[1]:
        raise DimensionError(f"linear shape mismatch: x {x.shape}, w {w.shape}")

    def fn(g):
        g2 = g.reshape(-1, w.shape[0])
        return g @ w.data, g2.T @ x.data.reshape(-1, w.shape[1])

    x2 = x.data.reshape(-1, w.shape[1])
    return _emit(_mm(x2, w.data.T).reshape(x.shape[:-1] + (w.shape[0],)), (x, w), fn)


def cast(x: Tensor, dtype) -> Tensor:
    dtype = np.dtype(dtype)
    if dtype not in FLOAT_DTYPES:
        raise TypeError(f"unsupported tensor dtype {dtype}")
    if x.dtype == dtype:
        return x
    return _emit(x.data.astype(dtype), (x,), lambda g: (g.astype(x.dtype),))


def reshape(x: Tensor, shape) -> Tensor:
    return _emit(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def _is_basic_index(key) -> bool:
    key = key if isinstance(key, tuple) else (key,)
    return all(k is None or k is Ellipsis or isinstance(k, (slice, int, np.integer)) for k in key)


def getitem(x: Tensor, key) -> Tensor:
    """Numpy indexing (basic or advanced); gradients scatter-add back."""
    basic = _is_basic_index(key)

    def fn(g):
        gx = np.zeros_like(x.data)
        if basic:
            gx[key] += g
        else:
            np.add.at(gx, key, g)
        return (gx,)

    return _emit(x.data[key], (x,), fn)


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]`` for an integer array of any shape."""
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise TypeError("embedding ids must be integers")
    return getitem(table, ids)


def scatter_add(src: Tensor, index: np.ndarray, n: int) -> Tensor:
    """Rows of ``src`` summed into a zero tensor of leading extent ``n``.

    Rows are accumulated in the order they appear in ``index``.
    """
    index = np.asarray(index)
    if index.ndim != 1 or len(index) != src.shape[0]:
        raise DimensionError(f"scatter index of shape {index.shape} does not match source {src.shape}")
    out = np.zeros((n,) + src.shape[1:], dtype=src.dtype)
    np.add.at(out, index, src.data)
    return _emit(out, (src,), lambda g: (g[index],))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _emit(np.concatenate([t.data for t in tensors], axis=axis), tensors,
                 lambda g: tuple(np.split(g, sizes, axis=axis)))


# ----------------------------------------------------------------------
# reductions and normalizers


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _emit(np.asarray(out, dtype=x.dtype), (x,), fn)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        n = int(np.prod([x.shape[a] for a in axes]))
    return sum(x, axis=axis, keepdims=keepdims) * (1.0 / n)


def _check_last(x: Tensor, what: str) -> None:
    if x.ndim == 0 or x.shape[-1] == 0:
        raise DimensionError(f"{what} needs a nonempty last dimension, got shape {x.shape}")


def _softmax_np(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def row_softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilized by max subtraction."""
    _check_last(x, "row_softmax")
    y = _softmax_np(x.data)
    return _emit(y, (x,), lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),))


def log_softmax(x: Tensor) -> Tensor:
    _check_last(x, "log_softmax")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))

    def fn(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _emit(out, (x,), fn)


def logsumexp(x: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    """log(sum(exp(x))) along one axis, stabilized by max subtraction."""
    _check_last(x, "logsumexp")
    m = x.data.max(axis=axis, keepdims=True)
    lse = m + np.log(np.exp(x.data - m).sum(axis=axis, keepdims=True))
    out = lse if keepdims else np.squeeze(lse, axis=axis)

    def fn(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * np.exp(x.data - lse),)

    return _emit(out, (x,), fn)


# ----------------------------------------------------------------------
# finite-difference check


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    Error per element is ``|a - c| / max(|a|, |c|, 1e-12)``. ``x`` must be
    float64; ``f`` must map it to a scalar Tensor. Element i is perturbed by
    ``eps * max(1, |x_i|)``. Rounding in ``f`` limits accuracy to roughly
    ``ulp(f) / eps``, so entries whose true gradient is near that level can
    show large relative error; a larger ``eps`` trades it for truncation error.
    """
    if x.dtype != np.float64:
        raise PrecisionError(f"grad_check needs float64 input, got {x.dtype}")
    with Tape() as tape:
        tape.watch(x)
        y = f(x)
        tape.backward(y)
    analytic = x.grad.copy()

    flat = x.data.reshape(-1)
    numeric = np.empty(flat.size)
    for i in range(flat.size):
        orig = flat[i]
        h = eps * max(1.0, abs(float(orig)))
        up, down = orig + h, orig - h
        flat[i] = up
        hi = f(x).item()
        flat[i] = down
        lo = f(x).item()
        flat[i] = orig
        # divide by the step actually taken, not the nominal 2 * eps
        numeric[i] = (hi - lo) / (up - down)
    a = analytic.reshape(-1)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-12)
    return float(np.max(np.abs(a - numeric) / denom)) if a.size else 0.0
