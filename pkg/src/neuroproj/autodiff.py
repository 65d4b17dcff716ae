"""Reverse-mode automatic differentiation on dense numpy arrays.

Every differentiable operation produces a :class:`Var`.  While a :class:`Tape`
is active the operation is appended to it, so the tape is a Wengert list in
topological order.  Vector-Jacobian products are themselves written with
``Var`` operations; calling :meth:`Tape.gradient` with ``create_graph=True``
records the reverse sweep on the same tape, which is what makes a second
reverse sweep (parameter gradients through input gradients) possible.
"""
from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Var",
    "Tape",
    "TapeError",
    "current_tape",
    "paused",
    "matmul",
    "leaky_relu",
    "take",
    "scatter",
]

_state = threading.local()


class TapeError(RuntimeError):
    """Raised when a released tape is swept again."""


def current_tape() -> Tape | None:
    return getattr(_state, "tape", None)


def _set_tape(tape: Tape | None) -> Tape | None:
    prev = current_tape()
    _state.tape = tape
    return prev


class paused:
    """Context manager that stops recording on the active tape."""

    def __enter__(self):
        self._prev = _set_tape(None)
        return self

    def __exit__(self, *exc):
        _set_tape(self._prev)
        return False


class _recording:
    def __init__(self, tape: Tape):
        self.tape = tape

    def __enter__(self):
        self._prev = _set_tape(self.tape)
        return self.tape

    def __exit__(self, *exc):
        _set_tape(self._prev)
        return False


class Var:
    """A node in the computation graph holding a float64 array."""

    __slots__ = ("value", "parents", "vjps", "op", "__weakref__")
    __array_priority__ = 100.0

    def __init__(self, value, parents=(), vjps=(), op=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents: tuple[Var, ...] = tuple(parents)
        self.vjps: tuple[Callable[[Var], Var], ...] = tuple(vjps)
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __repr__(self) -> str:
        return f"Var(shape={self.shape}, op={getattr(self.op, '__name__', None)})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_wrap(other)))

    def __rsub__(self, other):
        return add(_wrap(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(_wrap(other), self)

    @property
    def T(self) -> Var:
        return transpose(self)

    def sum(self, axis=None, keepdims=False) -> Var:
        return vsum(self, axis=axis, keepdims=keepdims)


def _wrap(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def _node(value, parents, vjps, op) -> Var:
    out = Var(value)
    tape = current_tape()
    if tape is not None:
        out.parents = tuple(parents)
        out.vjps = tuple(vjps)
        out.op = op
        tape.nodes.append(out)
    return out


class Tape:
    """Records operations executed inside its ``with`` block.

    A non-persistent tape is released by its first first-order sweep
    (``create_graph=False``); sweeps with ``create_graph=True`` extend the
    tape instead and keep it usable.
    """

    def __init__(self, persistent: bool = False):
        self.persistent = persistent
        self.nodes: list[Var] = []
        self._released = False
        self._prev: Tape | None = None

    def __enter__(self) -> Tape:
        self._prev = _set_tape(self)
        return self

    def __exit__(self, *exc):
        _set_tape(self._prev)
        return False

    def watch(self, value) -> Var:
        """Create a leaf variable that gradients can be taken against."""
        return Var(np.array(value, dtype=np.float64))

    def gradient(
        self,
        target: Var,
        sources: Sequence[Var],
        seed: Var | np.ndarray | None = None,
        create_graph: bool = False,
    ) -> list[Var]:
        if self._released:
            raise TapeError("tape already consumed by a first-order sweep; use persistent=True")
        nodes = list(self.nodes)
        src_ids = {id(s) for s in sources}
        relevant = set(src_ids)
        for n in nodes:
            for p in n.parents:
                if id(p) in relevant:
                    relevant.add(id(n))
                    break
        ctx = _recording(self) if create_graph else paused()
        with ctx:
            if seed is None:
                if target.value.size != 1:
                    raise ValueError("non-scalar target needs an explicit seed")
                seed_var = Var(np.ones_like(target.value))
            else:
                seed_var = _wrap(seed)
            adj: dict[int, Var] = {id(target): seed_var}
            if id(target) in relevant:
                for n in reversed(nodes):
                    nid = id(n)
                    g = adj.get(nid) if nid in src_ids else adj.pop(nid, None)
                    if g is None:
                        continue
                    for p, vjp in zip(n.parents, n.vjps):
                        pid = id(p)
                        if pid not in relevant:
                            continue
                        contrib = vjp(g)
                        prev = adj.get(pid)
                        adj[pid] = contrib if prev is None else prev + contrib
            out = []
            for s in sources:
                g = adj.get(id(s))
                out.append(g if g is not None else Var(np.zeros_like(s.value)))
        if not create_graph and not self.persistent:
            self._released = True
        return out

    def replay(self, leaves: dict[int, np.ndarray] | None = None) -> dict[int, np.ndarray]:
        """Recompute every recorded node from its parents' values.

        Returns the recomputed arrays keyed by node id; leaves keep their
        stored values unless overridden through ``leaves``.
        """
        values: dict[int, np.ndarray] = dict(leaves or {})
        for n in self.nodes:
            args = [values.get(id(p), p.value) for p in n.parents]
            values[id(n)] = n.op(*args)
        return values


# -- elementwise -------------------------------------------------------------

def _np_sum_to(a: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if a.shape == shape:
        return a
    lead = a.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and a.shape[i + lead] != 1
    )
    out = a.sum(axis=axes, keepdims=True)
    return out.reshape(shape)


def sum_to(x: Var, shape: tuple[int, ...]) -> Var:
    if x.shape == shape:
        return x
    src = x.shape

    def op(a):
        return _np_sum_to(a, shape)

    return _node(op(x.value), (x,), (lambda g: broadcast_to(g, src),), op)


def broadcast_to(x: Var, shape: tuple[int, ...]) -> Var:
    if x.shape == shape:
        return x
    src = x.shape

    def op(a):
        return np.broadcast_to(a, shape).copy()

    return _node(op(x.value), (x,), (lambda g: sum_to(g, src),), op)


def add(a, b) -> Var:
    a, b = _wrap(a), _wrap(b)
    sa, sb = a.shape, b.shape
    return _node(
        a.value + b.value,
        (a, b),
        (lambda g: sum_to(g, sa), lambda g: sum_to(g, sb)),
        np.add,
    )


def neg(a: Var) -> Var:
    return _node(-a.value, (a,), (lambda g: neg(g),), np.negative)


def mul(a, b) -> Var:
    a, b = _wrap(a), _wrap(b)
    sa, sb = a.shape, b.shape
    return _node(
        a.value * b.value,
        (a, b),
        (lambda g: sum_to(g * b, sa), lambda g: sum_to(g * a, sb)),
        np.multiply,
    )


def div(a, b) -> Var:
    a, b = _wrap(a), _wrap(b)
    sa, sb = a.shape, b.shape
    return _node(
        a.value / b.value,
        (a, b),
        (lambda g: sum_to(g / b, sa), lambda g: sum_to(neg(g * a) / (b * b), sb)),
        np.divide,
    )


def leaky_relu(x: Var, slope: float) -> Var:
    """LeakyReLU; the slope pattern is frozen so its derivative is piecewise constant."""
    s = np.where(x.value > 0, 1.0, slope)

    def op(a):
        return np.where(a > 0, a, slope * a)

    return _node(op(x.value), (x,), (lambda g: g * s,), op)


# -- linear algebra / reductions --------------------------------------------

def matmul(a, b) -> Var:
    a, b = _wrap(a), _wrap(b)
    return _node(
        a.value @ b.value,
        (a, b),
        (lambda g: matmul(g, transpose(b)), lambda g: matmul(transpose(a), g)),
        np.matmul,
    )


def transpose(a: Var) -> Var:
    return _node(a.value.T, (a,), (lambda g: transpose(g),), np.transpose)


def vsum(x: Var, axis=None, keepdims=False) -> Var:
    src = x.shape

    def op(a):
        return np.sum(a, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = reshape(g, np.expand_dims(np.empty(g.shape), axis).shape)
        elif axis is None and not keepdims:
            g = reshape(g, (1,) * len(src))
        return broadcast_to(g, src)

    return _node(op(x.value), (x,), (vjp,), op)


def reshape(x: Var, shape: tuple[int, ...]) -> Var:
    src = x.shape

    def op(a):
        return np.reshape(a, shape)

    return _node(op(x.value), (x,), (lambda g: reshape(g, src),), op)


def take(x: Var, idx: np.ndarray) -> Var:
    """Gather columns ``idx`` from a 2-D variable."""
    idx = np.asarray(idx, dtype=np.intp)
    width = x.shape[1]

    def op(a):
        return a[:, idx]

    return _node(op(x.value), (x,), (lambda g: scatter(g, idx, width),), op)


def scatter(x: Var, idx: np.ndarray, width: int) -> Var:
    """Place the columns of ``x`` at positions ``idx`` of a zero (B, width) array."""
    idx = np.asarray(idx, dtype=np.intp)

    def op(a):
        out = np.zeros((a.shape[0], width))
        out[:, idx] = a
        return out

    return _node(op(x.value), (x,), (lambda g: take(g, idx),), op)
