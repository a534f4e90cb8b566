"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable op appends one record to the active :class:`Tape`
when at least one input requires a gradient. ``backward`` walks the tape
in reverse, so the recording order is already a valid topological order.
"""
from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Dict, Iterable, List, Optional, Sequence

import numpy as np

from ..errors import DimensionError, UsageError

GradientMap = Dict[str, np.ndarray]

_name_counter = itertools.count()


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        if name is None and requires_grad:
            name = f"tensor{next(_name_counter)}"
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{rg})"

    # operator sugar; the real work lives in the functions below
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def sum(self):
        return tsum(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Record:
    __slots__ = ("out", "inputs", "backward_fn")

    def __init__(self, out, inputs, backward_fn):
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tape:
    """Ordered list of recorded ops. Cleared by :func:`backward`."""

    def __init__(self):
        self.records: List[_Record] = []

    def __len__(self):
        return len(self.records)

    def record(self, out: Tensor, inputs: Sequence[Tensor], backward_fn: Callable) -> None:
        self.records.append(_Record(out, tuple(inputs), backward_fn))

    def clear(self) -> None:
        self.records.clear()


class _State(threading.local):
    def __init__(self):
        self.tape = Tape()
        self.enabled = True


_state = _State()


def active_tape() -> Tape:
    return _state.tape


def grad_enabled() -> bool:
    return _state.enabled


@contextmanager
def no_grad():
    prev = _state.enabled
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


@contextmanager
def using_tape(tape: Tape):
    prev = _state.tape
    _state.tape = tape
    try:
        yield tape
    finally:
        _state.tape = prev


def make_result(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap ``data`` and, when any input tracks gradients, record the op.

    ``backward_fn(grad_out)`` returns one gradient (or None) per input.
    """
    track = _state.enabled and any(t.requires_grad for t in inputs)
    out = Tensor(data)
    if track:
        out.requires_grad = True
        _state.tape.record(out, inputs, backward_fn)
    return out


def backward(loss: Tensor, tape: Optional[Tape] = None,
             params: Optional[Iterable[Tensor]] = None) -> GradientMap:
    """Reverse sweep from a scalar ``loss``.

    Returns gradients keyed by leaf name. If ``params`` is given, every one
    of them gets an entry (zeros when unreachable from the loss).
    """
    tape = _state.tape if tape is None else tape
    if loss.data.size != 1:
        tape.clear()
        raise UsageError(f"backward needs a scalar root, got shape {loss.data.shape}")
    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    produced = set()
    leaves: Dict[int, Tensor] = {}
    for rec in reversed(tape.records):
        produced.add(id(rec.out))
        g = grads.pop(id(rec.out), None)
        if g is None:
            continue
        in_grads = rec.backward_fn(g)
        for inp, gi in zip(rec.inputs, in_grads):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            leaves.setdefault(key, inp)
    tape.clear()
    out: GradientMap = {}
    for key, t in leaves.items():
        if key in produced or key not in grads:
            continue
        out[t.name] = grads[key]
    if loss.requires_grad and id(loss) not in produced and id(loss) in grads:
        out[loss.name] = grads[id(loss)]
    if params is not None:
        for p in params:
            if p.name not in out:
                out[p.name] = np.zeros_like(p.data)
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_result(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return make_result(a.data * b.data, (a, b), bw)


def square(a: Tensor) -> Tensor:
    def bw(g):
        return (2.0 * a.data * g,)

    return make_result(a.data * a.data, (a,), bw)


def tsum(a: Tensor) -> Tensor:
    def bw(g):
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_result(np.sum(a.data), (a,), bw)


def mean(a: Tensor) -> Tensor:
    n = a.data.size

    def bw(g):
        return (np.full(a.shape, float(g) / n),)

    return make_result(np.mean(a.data), (a,), bw)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {a.shape} as {shape}") from None

    def bw(g):
        return (g.reshape(a.shape),)

    return make_result(data, (a,), bw)


def flatten(a: Tensor) -> Tensor:
    return reshape(a, (a.shape[0], -1))


def take_columns(a: Tensor, k: int) -> Tensor:
    """First ``k`` columns of a 2-D tensor."""
    if a.data.ndim != 2 or k > a.shape[1]:
        raise DimensionError(f"take_columns: cannot take {k} columns from {a.shape}")

    def bw(g):
        full = np.zeros_like(a.data)
        full[:, :k] = g
        return (full,)

    return make_result(a.data[:, :k].copy(), (a,), bw)
