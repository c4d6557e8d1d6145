"""Dense float64 tensors with tape-recorded reverse-mode differentiation.

Every differentiable operation appends one node to the active :class:`Tape`.
:func:`backward` replays the recorded adjoints in exact reverse order and
accumulates gradients into :class:`Parameter` buffers.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "NumericError",
    "TapeError",
    "Tensor",
    "Parameter",
    "Tape",
    "backward",
    "as_tensor",
    "active_tape",
]


class NumericError(ArithmeticError):
    """Raised when a forward computation produces or consumes non-finite values."""


class TapeError(RuntimeError):
    """Misuse of a tape: consumed, unbound loss, non-scalar loss."""


_TAPE_STACK: list["Tape"] = []


def active_tape() -> "Tape | None":
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tensor:
    """An n-dimensional float64 array that may take part in a recorded computation."""

    __slots__ = ("data", "grad", "requires_grad", "_tape")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.base is not None or not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
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
        return float(self.data)

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        kind = type(self).__name__
        return f"{kind}(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; implementations live in ops.py
    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops

        return ops.add(self, ops.neg(as_tensor(other)))

    def __rsub__(self, other):
        from . import ops

        return ops.add(as_tensor(other), ops.neg(self))

    def __mul__(self, other):
        from . import ops

        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops

        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops

        return ops.matmul(self, other)

    def __getitem__(self, index):
        from . import ops

        return ops.slice_(self, index)

    def reshape(self, *shape):
        from . import ops

        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def sum(self, axis=None):
        from . import ops

        return ops.sum_(self, axis)

    def mean(self, axis=None):
        from . import ops

        return ops.mean(self, axis)


class Parameter(Tensor):
    """A named leaf tensor whose gradient accumulates across backward calls."""

    __slots__ = ("name", "frozen")

    def __init__(self, data, name: str, frozen: bool = False):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=not frozen)
        self.name = name
        self.frozen = frozen
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad.fill(0.0)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


class Tape:
    """Records one forward pass.

    Used as a context manager; floating-point overflow and invalid operations
    raise :class:`NumericError` while the tape is active.
    """

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], object]] = []
        self.consumed = False
        self._errstate = None

    def __enter__(self) -> "Tape":
        if self.consumed:
            raise TapeError("tape already consumed by backward; record a new one")
        _TAPE_STACK.append(self)
        self._errstate = np.errstate(over="raise", invalid="raise", divide="raise")
        self._errstate.__enter__()
        return self

    def __exit__(self, exc_type, exc, tb):
        self._errstate.__exit__(exc_type, exc, tb)
        _TAPE_STACK.remove(self)
        if isinstance(exc, FloatingPointError):
            raise NumericError(f"non-finite value in forward pass: {exc}") from exc
        return False

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], adjoint) -> Tensor:
        if self.consumed:
            raise TapeError("cannot record on a consumed tape")
        out.requires_grad = True
        out._tape = self
        self.nodes.append((out, inputs, adjoint))
        return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if isinstance(t, Parameter):
        if not t.frozen:
            t.grad += g
    elif t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def backward(tape: Tape, loss: Tensor) -> None:
    """Propagate d(loss)/d(.) to every parameter reachable through ``tape``."""
    if tape.consumed:
        raise TapeError("backward called on a consumed tape")
    if loss.data.size != 1 or loss.ndim != 0:
        raise TapeError(f"loss must be a scalar, got shape {loss.shape}")
    if loss._tape is not tape:
        raise TapeError("loss was not produced under this tape")
    tape.consumed = True
    loss.grad = np.ones((), dtype=np.float64)
    with np.errstate(over="raise", invalid="raise"):
        for out, inputs, adjoint in reversed(tape.nodes):
            g = out.grad
            if g is None:
                continue
            grads = adjoint(g)
            for t, gi in zip(inputs, grads):
                if gi is not None and t.requires_grad:
                    _accumulate(t, gi)
    for out, _, _ in tape.nodes:
        out.grad = None
    tape.nodes.clear()
