"""Tensor container and the gradient tape.

Operations record themselves on the innermost active :class:`Tape` when at
least one operand requires a gradient.  Outside a tape everything runs as
plain numpy, which is what solvers use for the "fixed" block of an
alternating update.
"""

from __future__ import annotations

import contextlib
import threading

import numpy as np

from gendeblur.errors import NumericError, UsageError

_state = threading.local()


def _stack():
    if not hasattr(_state, "tapes"):
        _state.tapes = []
    return _state.tapes


def default_dtype():
    return getattr(_state, "dtype", np.float32)


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the storage dtype of newly created tensors.

    Gradient checks run under ``precision(np.float64)`` so that central
    differences are not swamped by single-precision rounding.
    """
    old = default_dtype()
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = old


def active_tape():
    tapes = _stack()
    return tapes[-1] if tapes else None


class Tensor:
    """Dense array of reals with optional participation in a gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "_tape", "__weakref__")
    # make ``ndarray - Tensor`` defer to Tensor.__rsub__ instead of broadcasting
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data)
        dtype = default_dtype()
        if arr.dtype != dtype:
            arr = arr.astype(dtype)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._tape = None
        if self.requires_grad:
            tape = active_tape()
            if tape is not None:
                tape.watch(self)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def is_finite(self):
        return bool(np.isfinite(self.data).all())

    def check_finite(self, what="tensor"):
        if not self.is_finite():
            raise NumericError(f"non-finite values in {what}")
        return self

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self):
        return len(self.data)

    # arithmetic is defined in ops; bound at import time there
    def __array__(self, dtype=None, copy=None):
        return self.data if dtype is None else self.data.astype(dtype)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("out", "parents", "vjp", "name")

    def __init__(self, out, parents, vjp, name):
        self.out = out
        self.parents = parents
        self.vjp = vjp
        self.name = name


class Tape:
    """Ordered record of primitive operations for one reverse sweep.

    Nodes are appended in execution order, so every node's parents were
    produced either by an earlier node or are leaves.

    >>> z = Tensor([3.0, 4.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = (z * z).sum()
    >>> tape.backward(loss)
    >>> z.grad.tolist()
    [6.0, 8.0]
    """

    def __init__(self):
        self.nodes = []
        self._leaves = {}

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().remove(self)
        return False

    def watch(self, tensor):
        if tensor._tape is None:
            self._leaves[id(tensor)] = tensor

    def record(self, out, parents, vjp, name):
        for p in parents:
            if p.requires_grad and p._tape is None:
                self._leaves.setdefault(id(p), p)
        out.requires_grad = True
        out._tape = self
        self.nodes.append(_Node(out, parents, vjp, name))

    def backward(self, loss):
        """Reverse sweep from a scalar ``loss``; assigns ``grad`` on leaves.

        Gradients are assigned, not accumulated.  Leaves watched by this tape
        but not reachable from ``loss`` receive zeros.
        """
        if not isinstance(loss, Tensor) or loss.size != 1:
            raise UsageError("backward() needs a scalar loss tensor")
        if loss._tape is not self:
            raise UsageError("loss was not recorded on this tape")
        grads = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        for key, leaf in self._leaves.items():
            g = grads.get(key)
            if g is None:
                leaf.grad = np.zeros_like(leaf.data)
            else:
                leaf.grad = np.asarray(g, dtype=leaf.data.dtype).reshape(leaf.shape)


def backward(loss):
    """Run the reverse sweep on the tape that produced ``loss``."""
    if not isinstance(loss, Tensor):
        raise UsageError("backward() needs a Tensor")
    if loss._tape is None:
        raise UsageError("loss is not on a tape; build it inside `with Tape():`")
    loss._tape.backward(loss)


def make_result(data, parents, vjp, name):
    """Wrap an op output, recording it when some parent needs a gradient."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = False
    out.grad = None
    out._tape = None
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        tape.record(out, parents, vjp, name)
    return out
