"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every differentiable operation appends one record to the active :class:`Tape`.
:func:`backward` replays the tape in reverse, visiting each record once, and
accumulates gradients into the leaf tensors that asked for them.
"""
from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

_ids = itertools.count()
_state = threading.local()


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node_id", "_tape", "_leaf", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node_id = next(_ids)
        self._tape: Tape | None = None
        self._leaf = True
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
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # operator sugar; the functions below are the real ops
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __neg__(self): return scale(self, -1.0)
    def __matmul__(self, other): return matmul(self, other)
    def __getitem__(self, idx): return slice_(self, idx)

    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)
    def transpose(self, *axes): return transpose(self, axes if axes else None)
    def sum(self, axis=None, keepdims=False): return sum_(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)
    def relu(self): return relu(self)
    def exp(self): return exp(self)
    def log(self): return log(self)


class _Record:
    __slots__ = ("inputs", "out_id", "backward")

    def __init__(self, inputs: tuple[Tensor, ...], out_id: int, backward: Callable):
        self.inputs = inputs
        self.out_id = out_id
        self.backward = backward


class Tape:
    """Ordered log of recorded operations for one forward pass."""

    def __init__(self):
        self.records: list[_Record] = []

    def __len__(self) -> int:
        return len(self.records)

    def clear(self) -> None:
        self.records.clear()

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()


def _stack() -> list[Tape]:
    if not hasattr(_state, "tapes"):
        _state.tapes = [Tape()]
        _state.grad_enabled = True
    return _state.tapes


def active_tape() -> Tape:
    return _stack()[-1]


def grad_enabled() -> bool:
    _stack()
    return _state.grad_enabled


@contextmanager
def no_grad():
    _stack()
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def record(out: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap ``out`` as a tensor and log how to push gradients back to ``inputs``.

    ``backward(g)`` receives the output gradient and returns one array (or None)
    per input, each shaped like that input.
    """
    t = Tensor.__new__(Tensor)
    t.data = out if out.dtype == np.float64 else out.astype(np.float64)
    t.grad = None
    t.node_id = next(_ids)
    t._leaf = False
    t.name = ""
    t._tape = None
    t.requires_grad = grad_enabled() and any(x.requires_grad for x in inputs)
    if t.requires_grad:
        tape = active_tape()
        tape.records.append(_Record(tuple(inputs), t.node_id, backward))
        t._tape = tape
    return t


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every leaf that ``loss`` depends on."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise RuntimeError("loss does not depend on any tensor that requires grad")
    if loss._leaf:
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
        return
    tape = loss._tape
    pending = {loss.node_id: np.ones_like(loss.data)}
    for rec in reversed(tape.records):
        g = pending.pop(rec.out_id, None)
        if g is None:
            continue
        grads = rec.backward(g)
        for x, gx in zip(rec.inputs, grads):
            if gx is None or not x.requires_grad:
                continue
            if x._leaf:
                x.grad = gx.copy() if x.grad is None else x.grad + gx
            elif x.node_id in pending:
                pending[x.node_id] = pending[x.node_id] + gx
            else:
                pending[x.node_id] = gx
    tape.clear()


# ---------------------------------------------------------------- elementwise

def _broadcast_check(a: Tensor, b: Tensor) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb:
        return
    short, long_ = (sa, sb) if len(sa) <= len(sb) else (sb, sa)
    if len(short) == 0 or long_[len(long_) - len(short):] == short:
        return
    raise ShapeError(f"shapes {sa} and {sb} are not broadcastable (only leading-dimension expansion is allowed)")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead))).reshape(shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b)
    return record(a.data + b.data, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b)
    return record(a.data - b.data, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b)
    ad, bd = a.data, b.data
    return record(ad * bd, (a, b),
                  lambda g: (_unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return record(a.data * c, (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return record(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return record(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return record(np.log(ad), (a,), lambda g: (g / ad,))


def elementwise(op: str, a, b=None) -> Tensor:
    """Dispatch by name: add, sub, mul, relu, exp, log, scale (b is the factor)."""
    binary = {"add": add, "sub": sub, "mul": mul}
    unary = {"relu": relu, "exp": exp, "log": log}
    if op in binary:
        if b is None:
            raise TypeError(f"{op} needs two operands")
        return binary[op](a, b)
    if op in unary:
        return unary[op](as_tensor(a))
    if op == "scale":
        return scale(as_tensor(a), b)
    raise ValueError(f"unknown elementwise op {op!r}")


# ----------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a[..., m, k] @ b[..., k, n]``; a 2-D ``b`` is shared across a's leading dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def _back(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return record(ad @ bd, (a, b), _back)


# ---------------------------------------------------------------- shape ops

def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"cannot reshape {src} to {shape}") from e
    return record(out, (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"invalid transpose axes {axes} for shape {a.shape}")
    inv = tuple(np.argsort(axes))
    return record(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def slice_(a: Tensor, idx) -> Tensor:
    """Basic (non-fancy) indexing; gradient lands only in the selected region."""
    shape = a.shape

    def _back(g):
        out = np.zeros(shape)
        out[idx] = g
        return (out,)

    return record(a.data[idx], (a,), _back)


def _check_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise ShapeError(f"axis {axis} out of range for a {ndim}-d tensor")
    return axis % ndim


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat of an empty list")
    axis = _check_axis(axis, tensors[0].ndim)
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != axis):
            raise ShapeError(f"concat along axis {axis}: shapes {ref} and {t.shape} disagree off-axis")
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return record(out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)))


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    if axis is not None:
        axis = _check_axis(axis, a.ndim)

    def _back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return record(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), _back)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else a.shape[_check_axis(axis, a.ndim)]
    return scale(sum_(a, axis, keepdims), 1.0 / n)


def shape_ops(op: str, *args, **kwargs) -> Tensor:
    table = {"reshape": reshape, "transpose": transpose, "slice": slice_,
             "concat": concat, "mean": mean, "sum": sum_}
    if op not in table:
        raise ValueError(f"unknown shape op {op!r}")
    return table[op](*args, **kwargs)


def pad_zero(a: Tensor, pad_width) -> Tensor:
    """Constant-zero padding; ``pad_width`` is one (before, after) pair per axis."""
    pad_width = tuple(tuple(p) for p in pad_width)
    inner = tuple(slice(b, b + n) for (b, _), n in zip(pad_width, a.shape))
    return record(np.pad(a.data, pad_width), (a,), lambda g: (g[inner],))


# ---------------------------------------------------------------- normalizers

def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    p = np.exp(out)
    return record(out, (a,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    p = e / e.sum(axis=axis, keepdims=True)
    return record(p, (a,), lambda g: (p * (g - (g * p).sum(axis=axis, keepdims=True)),))


def pick(a: Tensor, index) -> Tensor:
    """``out[i] = a[i, index[i]]`` for a 2-D ``a``."""
    index = np.asarray(index, dtype=np.int64)
    rows = np.arange(a.shape[0])
    shape = a.shape

    def _back(g):
        out = np.zeros(shape)
        np.add.at(out, (rows, index), g)
        return (out,)

    return record(a.data[rows, index], (a,), _back)


# ---------------------------------------------------------------- checking

def numerical_grad(fn: Callable[[], Tensor], t: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of the scalar ``fn()`` with respect to ``t``."""
    out = np.zeros_like(t.data)
    flat, gflat = t.data.reshape(-1), out.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = fn().item()
            flat[i] = orig - h
            fm = fn().item()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * h)
    return out


def gradcheck(fn: Callable[[], Tensor], tensors: Sequence[Tensor], h: float = 1e-5) -> float:
    """Largest relative error between analytic and central-difference gradients.

    Errors are ``max|analytic - numeric|`` over every checked element, divided
    by the largest gradient magnitude seen across all checked tensors (floored
    at 1e-10), so exactly-zero gradients are not judged against rounding noise.
    """
    for t in tensors:
        t.grad = None
    with Tape():
        backward(fn())
    pairs = []
    for t in tensors:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        pairs.append((analytic, numerical_grad(fn, t, h)))
    scale_ = max(max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0)) for a, n in pairs)
    worst = max(np.abs(a - n).max(initial=0.0) for a, n in pairs)
    return float(worst / max(scale_, 1e-10))
