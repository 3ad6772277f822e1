"""Dense float64 tensors and the tape that records them for reverse-mode differentiation.

Each thread opens its own `Tape`; ops record on the tape active in the current context.
"""

from collections.abc import Callable, Iterator
from contextvars import ContextVar
from dataclasses import dataclass
from typing import Self

import numpy as np
import numpy.typing as npt

from py_rce_detect.exception import ShapeError

type Array = npt.NDArray[np.float64]
type BackwardFn = Callable[[Array], tuple[Array | None, ...]]

_ACTIVE_TAPE: ContextVar["Tape | None"] = ContextVar("active_tape", default=None)


class Tensor:
    __slots__ = ("_data",)

    def __init__(self, data: npt.ArrayLike) -> None:
        array = np.array(data, dtype=np.float64, order="C")
        if any(extent <= 0 for extent in array.shape):
            msg = f"Tensor extents must be positive, got {array.shape}."
            raise ShapeError(msg)
        self._data: Array = array

    @property
    def data(self) -> Array:
        return self._data

    @property
    def shape(self) -> tuple[int, ...]:
        return self._data.shape

    @property
    def size(self) -> int:
        return self._data.size

    def item(self) -> float:
        if self._data.size != 1:
            msg = f"Only single-element tensors convert to float, got shape {self.shape}."
            raise ShapeError(msg)
        return float(self._data.reshape(()))

    def numpy(self) -> Array:
        return self._data.copy()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"

    def __neg__(self) -> "Tensor":
        from py_rce_detect import ops  # noqa: PLC0415

        return ops.neg(self)

    def __add__(self, other: "Tensor") -> "Tensor":
        from py_rce_detect import ops  # noqa: PLC0415

        return ops.add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        from py_rce_detect import ops  # noqa: PLC0415

        return ops.sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        from py_rce_detect import ops  # noqa: PLC0415

        return ops.mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        from py_rce_detect import ops  # noqa: PLC0415

        return ops.matmul(self, other)


@dataclass(frozen=True, slots=True)
class TapeEntry:
    op: str
    output: Tensor
    inputs: tuple[Tensor, ...]
    backward: BackwardFn


class Gradients:
    """Gradients produced by one backward pass, looked up by tensor identity."""

    def __init__(self) -> None:
        self._grads: dict[int, Array] = {}
        self._tensors: dict[int, Tensor] = {}

    def __contains__(self, tensor: Tensor) -> bool:
        return id(tensor) in self._grads

    def __getitem__(self, tensor: Tensor) -> Array:
        try:
            return self._grads[id(tensor)]
        except KeyError:
            # Tensors that did not influence the loss have a zero gradient.
            return np.zeros(tensor.shape)

    def __len__(self) -> int:
        return len(self._grads)

    def __iter__(self) -> Iterator[Tensor]:
        return iter(self._tensors.values())

    def accumulate(self, tensor: Tensor, grad: Array) -> None:
        key = id(tensor)
        if key in self._grads:
            self._grads[key] = self._grads[key] + grad
        else:
            self._grads[key] = grad
            self._tensors[key] = tensor


class Tape:
    """Ordered record of primitive ops. Use as a context manager to make it the active tape."""

    def __init__(self) -> None:
        self._entries: list[TapeEntry] = []
        self._token: object | None = None

    def __enter__(self) -> Self:
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *_exc: object) -> None:
        if self._token is not None:
            _ACTIVE_TAPE.reset(self._token)  # type: ignore[arg-type]
            self._token = None

    @property
    def entries(self) -> tuple[TapeEntry, ...]:
        return tuple(self._entries)

    def record(self, op: str, output: Tensor, inputs: tuple[Tensor, ...], backward_fn: BackwardFn) -> None:
        self._entries.append(TapeEntry(op, output, inputs, backward_fn))

    def produced(self, tensor: Tensor) -> bool:
        return any(entry.output is tensor for entry in self._entries)


def active_tape() -> Tape | None:
    return _ACTIVE_TAPE.get()


def record(op: str, output: Tensor, inputs: tuple[Tensor, ...], backward_fn: BackwardFn) -> Tensor:
    """Register `output` on the active tape, if any, and return it."""
    tape = _ACTIVE_TAPE.get()
    if tape is not None:
        tape.record(op, output, inputs, backward_fn)
    return output


def backward(tape: Tape, loss: Tensor) -> Gradients:
    """Reverse-mode pass over `tape`, seeded with d(loss)/d(loss) = 1."""
    if loss.size != 1:
        msg = f"Loss must be a scalar, got shape {loss.shape}."
        raise ShapeError(msg)
    if not tape.produced(loss):
        raise ShapeError("Loss was not produced on this tape.")

    grads = Gradients()
    grads.accumulate(loss, np.ones(loss.shape))
    # Entries were appended in execution order, so reversing them is a valid topological order.
    for entry in reversed(tape.entries):
        if entry.output not in grads:
            continue
        input_grads = entry.backward(grads[entry.output])
        for tensor, grad in zip(entry.inputs, input_grads, strict=True):
            if grad is not None:
                grads.accumulate(tensor, grad)
    return grads
