"""Dense tensors and the reverse-mode differentiation tape.

A Tensor is an immutable numpy array (float32 or float64) plus an optional
gradient buffer.  Differentiable operations (see avcc.ops) record themselves
on the thread-local active Tape; Tape.backward replays the records in reverse
order and accumulates d(loss)/d(leaf) into each requires_grad leaf exactly
once per pass.

Tapes are confined to one thread for the duration of one forward+backward
pass.  Running ops with no active tape performs plain forward evaluation.
"""

from __future__ import annotations

import threading

import numpy as np

from .errors import UsageError

_tls = threading.local()


def active_tape() -> "Tape | None":
    return getattr(_tls, "tape", None)


class Tensor:
    """N-dimensional array of real scalars with an optional gradient."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple:
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
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    # Operator sugar used mostly by tests; model code calls avcc.ops directly.
    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    def __sub__(self, other):
        from . import ops

        return ops.sub(self, other)

    def __mul__(self, other):
        from . import ops

        return ops.mul(self, other)

    def __matmul__(self, other):
        from . import ops

        return ops.matmul(self, other)

    def __neg__(self):
        from . import ops

        return ops.affine(self, scale=-1.0)

    def __repr__(self) -> str:
        grad = "grad" if self.requires_grad else "nograd"
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, {grad})"


class Tape:
    """Ordered record of operations for one forward+backward pass."""

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], object]] = []

    def __len__(self) -> int:
        return len(self._records)

    def __enter__(self) -> "Tape":
        if active_tape() is not None:
            raise UsageError("nested tapes are not supported")
        _tls.tape = self
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _tls.tape = None

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward) -> None:
        """backward maps d(out) to a tuple of d(input) arrays (None = no grad)."""
        self._records.append((out, inputs, backward))

    def backward(self, loss: Tensor, into: dict | None = None):
        """Populate grad for every requires_grad leaf reachable from loss.

        With `into` given, gradients are returned in that dict keyed by id(leaf)
        instead of being written to the leaves (used for parallel batch workers).
        """
        if loss.data.shape != ():
            raise UsageError(
                f"backward requires a scalar loss, got shape {loss.data.shape}"
            )
        outputs = {id(out) for out, _, _ in self._records}
        if id(loss) not in outputs:
            raise UsageError("loss tensor was not produced on this tape")

        grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.data.dtype)}
        leaves: dict[int, Tensor] = {}
        for out, inputs, backward in reversed(self._records):
            gout = grads.pop(id(out), None)
            if gout is None:
                continue
            for tensor, gin in zip(inputs, backward(gout)):
                if gin is None or not tensor.requires_grad:
                    continue
                key = id(tensor)
                if key in grads:
                    grads[key] = grads[key] + gin
                else:
                    grads[key] = gin
                if key not in outputs:
                    leaves[key] = tensor

        if into is not None:
            for key, tensor in leaves.items():
                into[key] = grads[key]
            return into
        for key, tensor in leaves.items():
            if tensor.grad is None:
                tensor.grad = np.zeros_like(tensor.data)
            tensor.grad += grads[key]
        return None


def as_tensor(value, dtype=None) -> Tensor:
    """Wrap a value as a constant Tensor (no-op on Tensor inputs)."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value, dtype=dtype)
