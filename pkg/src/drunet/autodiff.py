"""Tensors, the computation tape and reverse-mode gradient propagation.

Every differentiable primitive in :mod:`drunet.ops` takes an optional
:class:`Tape`. When one is supplied the primitive appends a :class:`Node`
holding a closure that maps the output gradient to input gradients;
:func:`backward` then replays the tape in exact reverse order.
"""

from __future__ import annotations

import contextlib
import contextvars
import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

_dtype: contextvars.ContextVar[type] = contextvars.ContextVar("drunet_dtype", default=np.float32)
_ids = itertools.count()


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def default_dtype():
    return _dtype.get()


@contextlib.contextmanager
def float64_mode() -> Iterator[None]:
    """Create new tensors in 64-bit precision inside the block.

    Only meant for gradient checking; the engine otherwise runs in float32.
    """
    token = _dtype.set(np.float64)
    try:
        yield
    finally:
        _dtype.reset(token)


class Tensor:
    """A dense array plus an identity used to key gradients.

    Image tensors use the (batch, channel, height, width) layout. Scalars
    (losses) and 1-D parameters (biases, BN scale/shift) are also Tensors.
    """

    __slots__ = ("data", "name", "id")

    def __init__(self, data, name: str | None = None, dtype=None):
        self.data = np.asarray(data, dtype=dtype or default_dtype())
        self.name = name
        self.id = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"


def check_tensor4(x: Tensor, what: str = "input") -> None:
    if x.data.ndim != 4:
        raise ShapeError(f"{what} must be 4-D (n, c, h, w), got shape {x.shape}")
    if min(x.shape) < 1:
        raise ShapeError(f"{what} has an empty dimension: {x.shape}")


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    grad_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of forward operations.

    Nodes are appended as ops execute, so inputs always precede their
    consumers. A tape is not thread safe; use one tape per thread.
    """

    nodes: list[Node] = field(default_factory=list)

    def record(self, op, inputs, output, grad_fn) -> None:
        self.nodes.append(Node(op, tuple(inputs), output, grad_fn))

    def __len__(self) -> int:
        return len(self.nodes)

    def clear(self) -> None:
        self.nodes.clear()


class Gradients:
    """Gradient store keyed by tensor id.

    Looking up a tensor the loss never reached yields zeros of its shape.
    """

    def __init__(self, grads: dict[int, np.ndarray]):
        self._grads = grads

    def __getitem__(self, t: Tensor) -> np.ndarray:
        g = self._grads.get(t.id)
        if g is None:
            return np.zeros_like(t.data)
        return g

    def __contains__(self, t: Tensor) -> bool:
        return t.id in self._grads

    def reached(self, t: Tensor) -> bool:
        return t.id in self._grads


def backward(tape: Tape, loss: Tensor) -> Gradients:
    """Propagate d(loss)/d(.) through every node on ``tape``."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g_out = grads.get(node.output.id)
        if g_out is None:
            continue
        for inp, g in zip(node.inputs, node.grad_fn(g_out)):
            if g is None:
                continue
            prev = grads.get(inp.id)
            grads[inp.id] = g if prev is None else prev + g
    return Gradients(grads)
