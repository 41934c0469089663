"""Tensor values and the tape that records primitive applications.

Values are 64-bit numpy arrays. Each primitive evaluates eagerly and, when a
Tape is recording, appends a record holding the inputs, the output and a
closure mapping the output cotangent to input cotangents. Records land in
execution order, which is a valid topological order by construction, so
backward is a single reverse sweep that touches every record at most once.
Tapes are thread-confined: the active tape lives in thread-local state and a
tape must only be used on the thread that opened it.
"""

from __future__ import annotations

import threading

import numpy as np


class ShapeError(ValueError):
    """Input shapes do not conform to a primitive's signature."""


class NumericError(RuntimeError):
    """A computation produced non-finite values where finite ones are required."""


_TLS = threading.local()


def _tape_stack() -> list:
    stack = getattr(_TLS, "tapes", None)
    if stack is None:
        stack = []
        _TLS.tapes = stack
    return stack


def active_tape():
    """Innermost tape currently recording on this thread, or None."""
    stack = _tape_stack()
    return stack[-1] if stack else None


class TapeRecord:
    """One primitive application: op name, inputs, output, and its vjp."""

    __slots__ = ("op", "inputs", "output", "vjp")

    def __init__(self, op, inputs, output, vjp):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.vjp = vjp


class Tape:
    """Execution-ordered record of primitive applications.

    Use as a context manager around a forward pass; a fresh tape is built for
    every pass. Outside any tape, primitives evaluate without recording and
    their outputs do not require gradients.
    """

    def __init__(self):
        self.records: list[TapeRecord] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack().pop()
        if popped is not self:
            raise RuntimeError("tape stack corrupted; tapes must unwind in LIFO order")
        return False

    def __len__(self) -> int:
        return len(self.records)


class Tensor:
    """A float64 n-dimensional value, optionally tracked for gradients.

    ``grad`` is allocated zero-filled exactly when ``requires_grad`` is set
    and accumulates contributions from every consumer across backward passes
    until ``zero_grad`` resets it.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Arithmetic sugar; the implementations live in numcore.ops.

    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops

        return ops.subtract(self, other)

    def __rsub__(self, other):
        from . import ops

        return ops.subtract(other, self)

    def __mul__(self, other):
        from . import ops

        return ops.multiply(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops

        return ops.divide(self, other)

    def __rtruediv__(self, other):
        from . import ops

        return ops.divide(other, self)

    def __neg__(self):
        from . import ops

        return ops.negate(self)

    def __matmul__(self, other):
        from . import ops

        return ops.matmul(self, other)

    def __getitem__(self, index):
        from . import ops

        return ops.slice_(self, index)


def record(op: str, inputs, output: Tensor, vjp) -> None:
    """Append one application to the active tape. Callers only record when the
    output requires gradients, which implies a tape is open."""
    tape = active_tape()
    if tape is None:
        raise RuntimeError(f"primitive '{op}' produced a tracked output with no open tape")
    tape.records.append(TapeRecord(op, tuple(inputs), output, vjp))


def backward(root: Tensor, tape: Tape | None = None) -> None:
    """Accumulate d(root)/d(leaf) into ``grad`` for every tracked tensor.

    ``root`` must be a single-element tensor recorded on ``tape`` (default:
    the currently active tape). Tracked leaves the root does not depend on
    keep their zero gradient.
    """
    if tape is None:
        tape = active_tape()
    if tape is None:
        raise RuntimeError("backward needs a tape; call inside `with Tape() as t:` or pass one")
    if root.data.size != 1:
        raise ShapeError(f"backward root must be scalar, got shape {root.shape}")
    if not root.requires_grad:
        raise RuntimeError("backward root is not tracked; it was not produced on a recording tape")
    root.grad += np.ones_like(root.data)
    reached = {id(root)}
    for rec in reversed(tape.records):
        if id(rec.output) not in reached:
            continue
        grads = rec.vjp(rec.output.grad)
        for tensor, grad in zip(rec.inputs, grads):
            if grad is None or not tensor.requires_grad:
                continue
            tensor.grad += grad
            reached.add(id(tensor))
