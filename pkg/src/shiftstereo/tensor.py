"""Dense 4D tensors with tape-based reverse-mode differentiation.

Every tensor is a (batch, channel, height, width) array of float32
("standard" mode) or float64 ("high" mode, used by all numerical
oracles and gradient checks). Operations in :mod:`shiftstereo.ops`
record themselves onto the innermost active :class:`Tape`; calling
:func:`backward` on a scalar loss replays the tape in exact reverse
execution order and accumulates gradients into ``.grad`` buffers.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError

STANDARD = np.float32
HIGH = np.float64

_MODES = {"standard": STANDARD, "high": HIGH}


def dtype_for_mode(mode: str):
    """Map a precision-mode name ("standard" | "high") to a numpy dtype."""
    try:
        return _MODES[mode]
    except KeyError:
        raise ShapeError(f"unknown scalar mode {mode!r}; expected one of {sorted(_MODES)}")


class Tensor:
    """A dense (batch, channel, height, width) value with an optional gradient.

    ``data`` is always a contiguous row-major array (width fastest).
    ``grad`` is lazily created by :func:`backward` and has the same shape
    and dtype as ``data``. Leaf tensors (weights, inputs) are created
    directly; op outputs are produced by :mod:`shiftstereo.ops`.
    """

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(STANDARD)
        if arr.ndim != 4:
            raise ShapeError(f"tensors are (batch, channel, height, width); got ndim={arr.ndim}")
        self.data = np.ascontiguousarray(arr)
        self.grad = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        req = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{req})"

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """A view of the same data with no gradient tracking."""
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.grad = None
        out.requires_grad = False
        return out

    def assert_finite(self, label: str = "tensor") -> None:
        """Debug hook for the all-scalars-finite invariant."""
        if not np.all(np.isfinite(self.data)):
            raise ShapeError(f"{label} contains non-finite values")


def zeros(shape, dtype=STANDARD, requires_grad=False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def full(shape, value, dtype=STANDARD, requires_grad=False) -> Tensor:
    return Tensor(np.full(shape, value, dtype=dtype), requires_grad=requires_grad)


class _Node:
    """One executed operation: output, inputs, and the gradient closure.

    ``grad_fn(out_grad)`` returns one gradient array (or None) per input,
    in input order. Returned arrays may alias ``out_grad``; the backward
    driver copies on first accumulation so aliasing stays safe.
    """

    __slots__ = ("op", "output", "inputs", "grad_fn")

    def __init__(self, op, output, inputs, grad_fn):
        self.op = op
        self.output = output
        self.inputs = inputs
        self.grad_fn = grad_fn


_TAPE_STACK: list["Tape"] = []


class Tape:
    """Ordered record of executed operations for one forward pass.

    Use as a context manager; ops executed inside record themselves here.
    A tape belongs to exactly one training step and is replayed at most
    once by :func:`backward`.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def record(self, op: str, output: Tensor, inputs, grad_fn) -> None:
        output.requires_grad = True
        self.nodes.append(_Node(op, output, tuple(inputs), grad_fn))

    def count_ops(self, op: str) -> int:
        return sum(1 for node in self.nodes if node.op == op)


def active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def record_op(op: str, output: Tensor, inputs, grad_fn) -> Tensor:
    """Attach ``output`` to the active tape if any input is differentiable."""
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(op, output, inputs, grad_fn)
    return output


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate ``.grad`` on every requires_grad tensor reachable from ``loss``.

    ``loss`` must have extent 1 in every dimension. Gradients accumulate;
    callers zero leaf grads between steps. The first contribution to a
    tensor is copied, so grad buffers never alias each other.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        out_grad = node.output.grad
        if out_grad is None:
            continue
        grads = node.grad_fn(out_grad)
        for tensor, grad in zip(node.inputs, grads):
            if grad is None or not tensor.requires_grad:
                continue
            if grad.shape != tensor.data.shape:
                raise ShapeError(
                    f"{node.op} backward produced grad shape {grad.shape} "
                    f"for input shape {tensor.data.shape}"
                )
            if tensor.grad is None:
                tensor.grad = np.array(grad)
            else:
                tensor.grad += grad
