"""Dense float64 tensors with tape-based reverse-mode differentiation.

The kernel is deliberately small: it carries exactly the operation set the
counting network needs (see ops.py) and records every differentiable call
onto an explicit Tape. Backward is a single reverse sweep over the recording
order, which is a valid reverse-topological order by construction.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """A tensor dimension violated an operation's contract.

    Carries the operation, the name of the offending dimension, and the
    expected/actual values so callers can report precisely what mismatched.
    """

    def __init__(self, op: str, dim: str, expected, got):
        self.op = op
        self.dim = dim
        self.expected = expected
        self.got = got
        super().__init__(f"{op}: {dim} expected {expected}, got {got}")


class AutodiffError(RuntimeError):
    """Backward-pass misuse: non-scalar loss, detached graph, reused tape."""


class Tensor:
    """N-d float64 array, optionally tracked for gradients.

    Image tensors are laid out (N, C, H, W) row-major with W fastest; bias
    vectors are rank 1. `grad` is populated by `backward` for leaf tensors
    created with requires_grad=True and always matches `data`'s shape.
    """

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._tape: Optional[Tape] = None

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item", "size", 1, self.data.size)
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class _Record:
    __slots__ = ("out", "inputs", "backward_fn")

    def __init__(self, out, inputs, backward_fn):
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn


_TAPE_STACK: list["Tape"] = []


class Tape:
    """Ordered recording of differentiable operations.

    Use as a context manager around the forward pass; `backward` replays the
    records once, in reverse. A tape is single-shot: a second backward on the
    same recording raises, forcing an explicit new recording per step.
    """

    def __init__(self):
        self._records: list[_Record] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def __len__(self):
        return len(self._records)

    def backward(self, loss: Tensor):
        if loss.data.size != 1:
            raise AutodiffError(
                f"backward: loss must be scalar, got shape {loss.data.shape}"
            )
        if loss._tape is not self:
            raise AutodiffError("backward: loss was not recorded on this tape")
        if self._consumed:
            raise AutodiffError(
                "backward: tape already consumed; record a new forward pass"
            )
        self._consumed = True

        # grads maps id(tensor) -> accumulated gradient. Arrays handed back by
        # backward_fns may alias each other (e.g. add returns gy twice), so a
        # freshly inserted array is "borrowed" and only owned after the first
        # out-of-place accumulation.
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        borrowed: set[int] = set()
        produced = {id(rec.out) for rec in self._records}
        for rec in reversed(self._records):
            gy = grads.pop(id(rec.out), None)
            if gy is None:
                continue  # recorded op did not feed the loss
            borrowed.discard(id(rec.out))
            in_grads = rec.backward_fn(gy)
            for inp, g in zip(rec.inputs, in_grads):
                if g is None:
                    continue
                key = id(inp)
                if key in grads:
                    if key in borrowed:
                        grads[key] = grads[key] + g
                        borrowed.discard(key)
                    else:
                        grads[key] += g
                else:
                    grads[key] = g
                    borrowed.add(key)

        # whatever remains was never produced on this tape: the leaves
        for rec in self._records:
            for inp in rec.inputs:
                key = id(inp)
                if key in grads and inp.requires_grad and key not in produced:
                    g = grads.pop(key)
                    if key in borrowed:
                        g = g.copy()
                    if inp.grad is None:
                        inp.grad = g
                    else:
                        inp.grad += g

        # The recording is consumed; drop it so the tensors of this pass are
        # freed by refcount alone (tensor._tape -> tape -> record -> tensor
        # would otherwise be a cycle waiting on the garbage collector).
        self._records.clear()


def active_tape() -> Optional[Tape]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def record(
    out: Tensor,
    inputs: Sequence[Tensor],
    backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]],
) -> Tensor:
    """Attach `out` to the active tape if any input is tracked.

    Without an active tape the call is a no-op and `out` stays untracked,
    which is the inference path.
    """
    tape = active_tape()
    if tape is not None and any(
        inp.requires_grad or inp._tape is tape for inp in inputs
    ):
        out.requires_grad = True
        out._tape = tape
        tape._records.append(_Record(out, tuple(inputs), backward_fn))
    return out


def backward(loss: Tensor):
    """Populate .grad on every requires_grad leaf reachable from `loss`."""
    if loss._tape is None:
        raise AutodiffError(
            "backward: loss is not attached to a tape (detached graph)"
        )
    loss._tape.backward(loss)


def zero_grad(params):
    """Reset gradients on a dict or iterable of tensors."""
    tensors = params.values() if isinstance(params, dict) else params
    for t in tensors:
        t.zero_grad()
