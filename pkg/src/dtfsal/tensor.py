"""Dense tensor with tape-based reverse-mode automatic differentiation.

Every value flowing through the model is a ``Tensor`` wrapping a contiguous
numpy buffer (float64 by default, float32 selectable).  Operations executed
inside a ``GradTape`` context are recorded; ``tape.backward(loss)`` replays
them in reverse execution order, which is a valid reverse topological order,
and deposits gradients on every leaf with ``requires_grad``.

Forward results are checked for NaN/Inf: a non-finite value raises
``NumericsError`` instead of propagating silently.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64

_FINITE_CHECKS = True


class NumericsError(RuntimeError):
    """A forward op produced NaN/Inf, or a numeric precondition failed."""


class ShapeError(ValueError):
    """Operand shapes violate an op's contract."""


def set_finite_checks(enabled: bool) -> bool:
    """Toggle per-op NaN/Inf validation. Returns the previous setting."""
    global _FINITE_CHECKS
    prev = _FINITE_CHECKS
    _FINITE_CHECKS = bool(enabled)
    return prev


def _check_finite(arr: np.ndarray, op: str) -> None:
    if _FINITE_CHECKS and not np.all(np.isfinite(arr)):
        raise NumericsError(f"non-finite values produced by '{op}'")


class Tensor:
    """N-dimensional float array with optional gradient tracking."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # Arithmetic sugar; the actual rules live in ops.py and are attached at
    # import time to avoid a circular import.
    def __add__(self, other):
        return _OPS["add"](self, other)

    def __radd__(self, other):
        return _OPS["add"](other, self)

    def __sub__(self, other):
        return _OPS["sub"](self, other)

    def __rsub__(self, other):
        return _OPS["sub"](other, self)

    def __mul__(self, other):
        return _OPS["mul"](self, other)

    def __rmul__(self, other):
        return _OPS["mul"](other, self)

    def __truediv__(self, other):
        return _OPS["div"](self, other)

    def __rtruediv__(self, other):
        return _OPS["div"](other, self)

    def __neg__(self):
        return _OPS["mul"](self, -1.0)

    def __matmul__(self, other):
        return _OPS["matmul"](self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _OPS["reshape"](self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return _OPS["transpose"](self, axes)

    def sum(self, axis=None, keepdims: bool = False):
        return _OPS["sum"](self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return _OPS["mean"](self, axis, keepdims)


_OPS: dict = {}


def register_op_sugar(name: str, fn: Callable) -> None:
    _OPS[name] = fn


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else DEFAULT_DTYPE))


class _TapeEntry:
    __slots__ = ("output", "inputs", "backward_fn")

    def __init__(self, output: Tensor, inputs: Sequence[Tensor], backward_fn):
        self.output = output
        self.inputs = tuple(inputs)
        self.backward_fn = backward_fn


_TAPE_STACK: list["GradTape"] = []


def active_tape() -> Optional["GradTape"]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class GradTape:
    """Ordered record of differentiable operations.

    Use as a context manager around a forward computation, then call
    ``backward(loss)`` once.  Calling backward a second time without
    ``reset()`` is an error: intermediate state is discarded after replay.
    """

    def __init__(self):
        self._entries: list[_TapeEntry] = []
        self._consumed = False

    def __enter__(self) -> "GradTape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPE_STACK.pop()
        if popped is not self:
            raise RuntimeError("GradTape stack corrupted")

    def __len__(self) -> int:
        return len(self._entries)

    def record(self, output: Tensor, inputs: Sequence[Tensor], backward_fn) -> None:
        if self._consumed:
            raise RuntimeError("recording on a consumed tape; call reset() first")
        self._entries.append(_TapeEntry(output, inputs, backward_fn))

    def reset(self) -> None:
        self._entries.clear()
        self._consumed = False

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf."""
        if self._consumed:
            raise RuntimeError("backward() called twice on the same tape; call reset() first")
        if loss.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {tuple(loss.shape)}")
        self._consumed = True

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        produced = {id(e.output) for e in self._entries}
        for entry in reversed(self._entries):
            out_grad = grads.pop(id(entry.output), None)
            if out_grad is None:
                continue
            in_grads = entry.backward_fn(out_grad)
            for tensor, g in zip(entry.inputs, in_grads):
                if g is None or not tensor.requires_grad:
                    continue
                if g.shape != tensor.data.shape:
                    raise ShapeError(
                        f"backward produced gradient of shape {g.shape} for tensor of shape {tensor.data.shape}"
                    )
                if id(tensor) in produced:
                    key = id(tensor)
                    if key in grads:
                        grads[key] = grads[key] + g
                    else:
                        grads[key] = g
                else:
                    # Leaf: deposit on .grad, accumulating across calls.
                    if tensor.grad is None:
                        tensor.grad = g.copy()
                    else:
                        tensor.grad = tensor.grad + g
        # A loss that is itself a leaf parameter.
        if id(loss) not in produced and loss.requires_grad:
            seed = np.ones_like(loss.data)
            loss.grad = seed if loss.grad is None else loss.grad + seed


def record_op(
    name: str,
    out_data: np.ndarray,
    inputs: Sequence,
    backward_fn,
) -> Tensor:
    """Wrap an op result, validate finiteness, and record it on the active tape.

    ``inputs`` may contain non-Tensor constants; only Tensor inputs take part
    in gradient flow.  ``backward_fn(out_grad)`` must return one gradient
    array (or None) per Tensor input, in order.
    """
    _check_finite(out_data, name)
    tensor_inputs = [t for t in inputs if isinstance(t, Tensor)]
    tape = active_tape()
    needs_grad = tape is not None and any(t.requires_grad for t in tensor_inputs)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out.requires_grad = needs_grad
    if needs_grad:
        tape.record(out, tensor_inputs, backward_fn)
    return out
