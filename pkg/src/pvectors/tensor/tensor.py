"""Dense float64 tensors and the gradient tape that records operations on them."""

from __future__ import annotations

import threading
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np

from pvectors.errors import UsageError

_local = threading.local()


class Record(NamedTuple):
    op: str
    inputs: tuple
    out: "Tensor"
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tape:
    """Ordered log of differentiable operations.

    Operations are recorded only while a tape is active (``with Tape():``) and
    at least one input requires a gradient. Tapes are thread-local, so separate
    threads can run independent forward/backward passes.
    """

    def __init__(self):
        self.records: list[Record] = []
        self._prev: Optional[Tape] = None

    def __enter__(self) -> "Tape":
        self._prev = getattr(_local, "tape", None)
        _local.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _local.tape = self._prev
        self._prev = None

    def __len__(self) -> int:
        return len(self.records)

    def clear(self) -> None:
        """Drop every record, breaking the tape <-> output reference cycle."""
        for rec in self.records:
            rec.out._tape = None
        self.records.clear()

    def record(self, op, inputs, out, backward_fn) -> None:
        self.records.append(Record(op, tuple(inputs), out, backward_fn))
        out._tape = self


def active_tape() -> Optional[Tape]:
    return getattr(_local, "tape", None)


class Tensor:
    """A dense row-major float64 array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "_tape", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._tape: Optional[Tape] = None
        self.name = name

    @classmethod
    def _wrap(cls, data: np.ndarray, requires_grad: bool) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = requires_grad
        out.grad = None
        out._tape = None
        out.name = None
        return out

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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # Arithmetic is defined in ops; bound here so expressions read naturally.
    def __add__(self, other):
        return _ops().add(self, other)

    def __radd__(self, other):
        return _ops().add(other, self)

    def __sub__(self, other):
        return _ops().sub(self, other)

    def __rsub__(self, other):
        return _ops().sub(other, self)

    def __mul__(self, other):
        return _ops().mul(self, other)

    def __rmul__(self, other):
        return _ops().mul(other, self)

    def __truediv__(self, other):
        return _ops().div(self, other)

    def __rtruediv__(self, other):
        return _ops().div(other, self)

    def __neg__(self):
        return _ops().mul(self, -1.0)

    def __matmul__(self, other):
        return _ops().matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return _ops().sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return _ops().mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _ops().reshape(self, shape)

    def permute(self, *order):
        if len(order) == 1 and isinstance(order[0], (tuple, list)):
            order = tuple(order[0])
        return _ops().permute(self, order)

    def backward(self) -> None:
        backward(self)


def _ops():
    from pvectors.tensor import ops

    return ops


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every tensor on loss's tape."""
    if loss.data.size != 1 or loss.data.ndim > 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise UsageError("loss was not produced under an active tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.out), None)
        if g is None:
            continue
        out = rec.out
        out.grad = g if out.grad is None else out.grad + g
        for t, gi in zip(rec.inputs, rec.backward(g)):
            if gi is None or not isinstance(t, Tensor) or not t.requires_grad:
                continue
            if t._tape is tape:
                prev = grads.get(id(t))
                grads[id(t)] = gi if prev is None else prev + gi
            else:
                t.grad = np.array(gi, dtype=np.float64) if t.grad is None else t.grad + gi
