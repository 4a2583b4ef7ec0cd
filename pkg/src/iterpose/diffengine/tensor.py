"""Reverse-mode autodiff core: tensors, the op tape, and the backward pass.

A ``Tensor`` wraps a numpy array. Differentiable ops (see ``ops``) record a
node on a per-thread ``Tape``; ``backward`` replays the tape in reverse and
accumulates gradients on every tracked leaf. Arrays are float32 by default;
build the same graph from float64 inputs for finite-difference checks.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np

DEFAULT_DTYPE = np.float32


class Tensor:
    """N-dimensional array with optional gradient tracking."""

    __slots__ = ("data", "grad", "tracked")

    def __init__(self, data, tracked: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.tracked = bool(tracked)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        """Same data, cut off from the graph (never tracked)."""
        return Tensor(self.data, tracked=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, tracked={self.tracked})"

    def __len__(self):
        return len(self.data)

    # Arithmetic/shape operators are attached by iterpose.diffengine.ops at
    # import time so this module stays free of op definitions.


def param(data, dtype=None) -> Tensor:
    """A tracked leaf tensor (learnable parameter); owns a copy of its buffer."""
    return Tensor(np.array(data), tracked=True, dtype=dtype)


class _Node:
    __slots__ = ("out", "inputs", "backward_fn")

    def __init__(self, out, inputs, backward_fn):
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tape:
    """Execution-ordered record of differentiable ops.

    Appending in execution order makes the record topologically sorted by
    construction, so one reverse sweep visits every node exactly once.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __len__(self):
        return len(self.nodes)

    def clear(self):
        self.nodes.clear()


_state = threading.local()


def _tls():
    if not hasattr(_state, "tape"):
        _state.tape = Tape()
        _state.recording = True
    return _state


def active_tape() -> Tape:
    return _tls().tape


def is_recording() -> bool:
    return _tls().recording


@contextmanager
def no_grad():
    """Disable tape recording; forwards run as plain numpy."""
    tls = _tls()
    prev = tls.recording
    tls.recording = False
    try:
        yield
    finally:
        tls.recording = prev


def record(out: Tensor, inputs, backward_fn):
    """Register ``out = op(inputs)`` on the active tape.

    ``backward_fn(out_grad)`` must return one gradient array (or None) per
    input, in order. Recording only happens when enabled and at least one
    input is tracked; otherwise the output is left untracked.
    """
    tls = _tls()
    if tls.recording and any(t.tracked for t in inputs):
        out.tracked = True
        tls.tape.nodes.append(_Node(out, inputs, backward_fn))
    return out


def backward(loss: Tensor):
    """Accumulate d(loss)/d(leaf) on every tracked leaf, then clear the tape.

    Raises ValueError for a non-scalar loss and RuntimeError when the loss is
    not connected to the active tape.
    """
    tape = _tls().tape
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if not loss.tracked or not tape.nodes:
        raise RuntimeError("loss is not attached to any recorded computation")

    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        out_grad = node.out.grad
        if out_grad is None:
            continue
        grads = node.backward_fn(out_grad)
        for t, g in zip(node.inputs, grads):
            if g is None or not t.tracked:
                continue
            if t.grad is None:
                t.grad = g.copy() if g.base is not None or g is out_grad else g
            else:
                t.grad += g
        # Node outputs are interior by construction; free their grads early.
        node.out.grad = None
    tape.clear()


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)
