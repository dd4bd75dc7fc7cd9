"""Minimal tape-based reverse-mode autodiff over float64 numpy arrays.

Operations record themselves on the tape that is active in the current
thread (see :class:`Tape`).  Outside a tape they only compute values, which
is what evaluation and finite-difference probing use.

Example::

    w = Parameter(np.ones((3, 2)))
    with Tape() as tape:
        loss = mean(sum_of_squares(matmul(x, w), axis=1))
    tape.backward(loss)
    w.grad  # populated
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import ContractError, DimensionError

__all__ = [
    "Tensor",
    "Parameter",
    "Tape",
    "as_tensor",
    "matmul",
    "add",
    "sub",
    "mul",
    "relu",
    "scale",
    "sum",
    "mean",
    "sum_of_squares",
    "take",
    "softmax_cross_entropy",
    "stop_gradient",
    "check_gradients",
]

_builtin_sum = sum
_local = threading.local()


class Tensor:
    """A node holding a float64 array value."""

    __slots__ = ("value", "name", "__weakref__")

    def __init__(self, value, name: Optional[str] = None):
        self.value = np.array(value, dtype=np.float64)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"{type(self).__name__}{label}(shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter(Tensor):
    """A trainable leaf with persistent gradient and momentum buffers."""

    __slots__ = ("grad", "velocity")

    def __init__(self, value, name: Optional[str] = None):
        super().__init__(value, name)
        self.grad = np.zeros_like(self.value)
        self.velocity = np.zeros_like(self.value)

    def zero_grad(self) -> None:
        self.grad.fill(0.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Record:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of executed operations.

    A tape is used as a context manager; every primitive executed inside the
    ``with`` block is appended in execution order.  :meth:`backward` replays
    the records in reverse and accumulates into ``Parameter.grad``.  Tapes
    are thread-local and intended to live for a single training step.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self._grads: dict[int, np.ndarray] = {}
        self._refs: dict[int, Tensor] = {}

    def __enter__(self) -> "Tape":
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise RuntimeError("tape stack corrupted")
        stack.pop()

    def __len__(self) -> int:
        return len(self.records)

    def _append(self, out: Tensor, inputs: tuple[Tensor, ...], backward) -> None:
        for t in (out, *inputs):
            self._refs[id(t)] = t
        self.records.append(_Record(out, inputs, backward))

    def backward(self, loss: Tensor) -> None:
        """Propagate d(loss)/d(node) for every node reachable from ``loss``.

        Gradients for Parameters are *added* to their ``grad`` buffers, so
        several losses may be back-propagated in turn on the same tape.
        """
        if loss.value.size != 1:
            raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
        for rec in reversed(self.records):
            g = grads.get(id(rec.out))
            if g is None:
                continue
            for inp, ig in zip(rec.inputs, rec.backward(g)):
                if ig is None:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig
        for key, g in grads.items():
            t = self._refs.get(key, loss if key == id(loss) else None)
            if isinstance(t, Parameter):
                t.grad += g
        self._grads = grads

    def gradient(self, t: Tensor) -> np.ndarray:
        """Gradient of the most recent backward call with respect to ``t``."""
        g = self._grads.get(id(t))
        return np.zeros_like(t.value) if g is None else g


def _tape_stack() -> list[Tape]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def _record(out: Tensor, inputs: Sequence[Tensor], backward) -> Tensor:
    stack = _tape_stack()
    if stack:
        stack[-1]._append(out, tuple(inputs), backward)
    return out


def _broadcast_shape(a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"operand shapes {a.shape} and {b.shape} do not match") from None


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- primitives


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    out = Tensor(a.value @ b.value)
    av, bv = a.value, b.value
    return _record(out, (a, b), lambda g: (g @ bv.T, av.T @ g))


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    out = Tensor(a.value + b.value)
    sa, sb = a.shape, b.shape
    return _record(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    out = Tensor(a.value - b.value)
    sa, sb = a.shape, b.shape
    return _record(out, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    out = Tensor(a.value * b.value)
    av, bv = a.value, b.value
    return _record(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
    )


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.value > 0
    out = Tensor(np.where(mask, a.value, 0.0))
    return _record(out, (a,), lambda g: (g * mask,))


def scale(a, c: float) -> Tensor:
    """Multiply by a constant that is not itself differentiated."""
    a = as_tensor(a)
    c = float(c)
    out = Tensor(a.value * c)
    return _record(out, (a,), lambda g: (g * c,))


def _check_axis(a: Tensor, axis: Optional[int]) -> None:
    if axis is not None and not -a.value.ndim <= axis < a.value.ndim:
        raise DimensionError(f"axis {axis} invalid for shape {a.shape}")


def _expand(g: np.ndarray, shape: tuple[int, ...], axis: Optional[int]) -> np.ndarray:
    if axis is not None:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum(a, axis: Optional[int] = None) -> Tensor:  # noqa: A001 - mirrors numpy
    a = as_tensor(a)
    _check_axis(a, axis)
    out = Tensor(a.value.sum(axis=axis))
    shape = a.shape
    return _record(out, (a,), lambda g: (_expand(g, shape, axis).copy(),))


def mean(a, axis: Optional[int] = None) -> Tensor:
    a = as_tensor(a)
    _check_axis(a, axis)
    n = a.value.size if axis is None else a.shape[axis]
    out = Tensor(a.value.mean(axis=axis))
    shape = a.shape
    return _record(out, (a,), lambda g: (_expand(g / n, shape, axis).copy(),))


def sum_of_squares(a, axis: Optional[int] = None) -> Tensor:
    a = as_tensor(a)
    _check_axis(a, axis)
    av = a.value
    out = Tensor((av * av).sum(axis=axis))
    return _record(out, (a,), lambda g: (2.0 * av * _expand(g, av.shape, axis),))


def take(a, indices, axis: int = 0) -> Tensor:
    """Select rows (axis 0) or columns (axis 1) by integer index."""
    a = as_tensor(a)
    _check_axis(a, axis)
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise DimensionError("take expects a 1-d index array")
    n = a.shape[axis]
    if idx.size and (idx.min() < -n or idx.max() >= n):
        raise DimensionError(f"index out of range for axis of length {n}")
    out = Tensor(np.take(a.value, idx, axis=axis))
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        if axis in (0, -len(shape)):
            np.add.at(full, idx, g)
        else:
            moved = np.moveaxis(full, axis, 0)
            np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return (full,)

    return _record(out, (a,), backward)


def log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(z))


def softmax_cross_entropy(logits, targets) -> Tensor:
    """Batch-mean cross-entropy between softmax(logits) and target rows.

    ``targets`` is a plain array of one-hot or mixed rows, each summing to 1.
    """
    logits = as_tensor(logits)
    t = np.asarray(targets, dtype=np.float64)
    if logits.value.ndim != 2 or t.shape != logits.shape:
        raise DimensionError(f"logits {logits.shape} vs targets {t.shape}")
    b, c = logits.shape
    if c < 2:
        raise DimensionError("cross-entropy needs at least two categories")
    if b == 0:
        raise ContractError("cross-entropy on an empty batch")
    if np.any(np.abs(t.sum(axis=1) - 1.0) > 1e-9):
        raise ContractError("every target row must sum to 1")
    logp = log_softmax(logits.value)
    out = Tensor(-(t * logp).sum() / b)
    p = np.exp(logp)
    return _record(out, (logits,), lambda g: ((p - t) * (g / b),))


def stop_gradient(a) -> Tensor:
    """Identity on values; blocks every gradient flowing back through it."""
    a = as_tensor(a)
    out = Tensor(a.value)
    return _record(out, (a,), lambda g: (None,))


# ------------------------------------------------------------ verification


def check_gradients(
    f: Callable[[], Tensor], params: Iterable[Parameter], step: float = 1e-5
) -> float:
    """Compare analytic gradients of ``f`` with central differences.

    ``f`` takes no arguments and builds a scalar from the current parameter
    values.  Returns the largest ``|analytic - numeric| / max(1, |numeric|)``
    over every parameter entry.  Parameter gradients are left holding the
    analytic values.
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = f()
    if not np.all(np.isfinite(loss.value)):
        raise ContractError("function value is not finite")
    tape.backward(loss)

    worst = 0.0
    for p in params:
        flat = p.value.reshape(-1)
        analytic = p.grad.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + step
            up = float(f().value)
            flat[k] = orig - step
            down = float(f().value)
            flat[k] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise ContractError("function value is not finite near the probe point")
            numeric = (up - down) / (2.0 * step)
            err = abs(analytic[k] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst
