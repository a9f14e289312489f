"""Dense FP32 tensors with a define-by-run reverse-mode tape.

Every differentiable operation in :mod:`reparamquant.ops` appends a record to
the active :class:`Tape` when at least one input requires a gradient.
:func:`backward` replays the tape in reverse, accumulates gradients into the
inputs and clears the tape.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Iterator, Optional, Sequence

import numpy as np


class Tensor:
    """An n-dimensional FP32 array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.asarray(data, dtype=np.float32)
        # ascontiguousarray would promote 0-d scalars to shape (1,)
        self.data = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dims(self) -> list:
        return list(self.data.shape)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"


@dataclass
class TapeRecord:
    inputs: Sequence[Tensor]
    output: Tensor
    # maps d(loss)/d(output) to one gradient (or None) per input
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
    op: str = ""


class Tape:
    """Ordered log of executed operations."""

    def __init__(self) -> None:
        self.records: list[TapeRecord] = []
        self.enabled = True

    def record(self, op: str, inputs: Sequence[Tensor], output: Tensor, backward_fn) -> None:
        if self.enabled:
            self.records.append(TapeRecord(tuple(inputs), output, backward_fn, op))

    def clear(self) -> None:
        self.records.clear()

    def __len__(self) -> int:
        return len(self.records)


_default_tape = Tape()


def get_tape() -> Tape:
    return _default_tape


@contextlib.contextmanager
def no_grad(tape: Optional[Tape] = None) -> Iterator[None]:
    """Run operations without recording them (evaluation, merging, calibration)."""
    tape = tape or _default_tape
    prev = tape.enabled
    tape.enabled = False
    try:
        yield
    finally:
        tape.enabled = prev


def needs_grad(*tensors: Optional[Tensor]) -> bool:
    return _default_tape.enabled and any(t is not None and t.requires_grad for t in tensors)


def backward(loss: Tensor, tape: Optional[Tape] = None) -> None:
    """Populate ``.grad`` of every tensor reachable from ``loss``.

    Gradients of leaf tensors accumulate across calls until an optimizer step
    zeroes them. The tape is cleared afterwards.
    """
    tape = tape or _default_tape
    if loss.data.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    # intermediate grads live only for this pass; leaves accumulate
    intermediates = {id(rec.output) for rec in tape.records}
    for rec in tape.records:
        if id(rec.output) in intermediates:
            rec.output.grad = None
    loss.grad = np.ones_like(loss.data)
    for rec in reversed(tape.records):
        g_out = rec.output.grad
        if g_out is None:
            continue
        grads = rec.backward(g_out)
        for inp, g in zip(rec.inputs, grads):
            if g is None or inp is None or not inp.requires_grad:
                continue
            g = np.asarray(g, dtype=np.float32).reshape(inp.shape)
            if inp.grad is None:
                inp.grad = g.copy()
            else:
                inp.grad += g
    tape.clear()
