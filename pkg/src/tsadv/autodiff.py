"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Every differentiable operation appends a node to a :class:`Graph` (a tape).
Tensors produced by an op remember the graph they live on; combining leaves
starts a fresh tape, so each forward pass builds its own graph.  Calling
:func:`backward` on a scalar walks the tape in exact reverse insertion order
and accumulates gradients into every tensor that requires them.

Ops whose inputs do not require gradients are evaluated eagerly and recorded
nowhere, which keeps inference (scoring) free of tape overhead.
"""
from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np

from . import kernels


class NonFiniteError(FloatingPointError):
    """A NaN or infinity showed up where only finite values are allowed."""


class ShapeError(ValueError):
    pass


_tensor_ids = itertools.count()


class Tensor:
    """Dense float64 array that can participate in a differentiation tape.

    ``data`` is a C-contiguous numpy array; ``shape`` mirrors ``data.shape``.
    Construction validates finiteness.  Ops build their outputs through
    :meth:`_wrap`, which skips that check.
    """

    __slots__ = ("data", "requires_grad", "grad", "graph", "id", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64, order="C", copy=True)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor values must be finite")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.graph: Graph | None = None
        self.id = next(_tensor_ids)

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t.graph = None
        t.id = next(_tensor_ids)
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _as_tensor(other, self.shape))

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.shape))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def _as_tensor(x, shape) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.full(shape, float(x)))


def tensor_from(shape: Sequence[int], values: Sequence[float], requires_grad: bool = False) -> Tensor:
    """Build a tensor from a shape and a flat row-major list of values."""
    shape = tuple(int(s) for s in shape)
    flat = np.asarray(values, dtype=np.float64).reshape(-1)
    if int(np.prod(shape, dtype=np.int64)) != flat.size:
        raise ShapeError(f"shape {shape} needs {int(np.prod(shape))} values, got {flat.size}")
    return Tensor(flat.reshape(shape), requires_grad=requires_grad)


class Node:
    __slots__ = ("kind", "inputs", "output", "backward_fn")

    def __init__(self, kind: str, inputs: tuple[Tensor, ...], output: Tensor, backward_fn):
        self.kind = kind
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Graph:
    """Append-only tape of recorded operations.

    Two independent tapes meeting in one op are merged: the second tape's
    nodes are appended to the first and the second forwards to it.  The
    tapes share no tensors, so the concatenation stays topologically ordered.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.merged_into: Graph | None = None

    def root(self) -> "Graph":
        g = self
        while g.merged_into is not None:
            g = g.merged_into
        return g

    def absorb(self, other: "Graph") -> None:
        if other is self:
            return
        self.nodes.extend(other.nodes)
        other.nodes = []
        other.merged_into = self

    def record(self, kind, inputs, output, backward_fn) -> None:
        output.graph = self
        self.nodes.append(Node(kind, inputs, output, backward_fn))

    def __len__(self) -> int:
        return len(self.nodes)


def _record(kind: str, inputs: tuple[Tensor, ...], out_arr: np.ndarray, backward_fn) -> Tensor:
    if not any(t.requires_grad for t in inputs):
        return Tensor._wrap(out_arr)
    graphs = list({id(g): g for g in (t.graph.root() for t in inputs if t.graph is not None)}.values())
    graph = graphs[0] if graphs else Graph()
    for other in graphs[1:]:
        graph.absorb(other)
    out = Tensor._wrap(out_arr, requires_grad=True)
    graph.record(kind, inputs, out, backward_fn)
    return out


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------- forward ops


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _record("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _record("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _record("mul", (a, b), ad * bd, lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    return _record("scale", (a,), a.data * c, lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product; ``a`` may be a vector treated as a single row."""
    if b.data.ndim != 2 or a.data.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        if ad.ndim == 1:
            return g @ bd.T, np.outer(ad, g)
        return g @ bd.T, ad.T @ g

    return _record("matmul", (a, b), ad @ bd, backward)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a vector along the last axis of ``x`` (the only broadcast we allow)."""
    if b.data.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"add_bias: bias {b.shape} does not fit {x.shape}")
    lead = tuple(range(x.data.ndim - 1))
    return _record("add_bias", (x, b), x.data + b.data, lambda g: (g, g.sum(axis=lead)))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _record("tanh", (x,), y, lambda g: (g * (1.0 - y * y),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _record("relu", (x,), np.where(mask, x.data, 0.0), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _record("sigmoid", (x,), y, lambda g: (g * y * (1.0 - y),))


def reduce_sum(x: Tensor, axis=None) -> Tensor:
    shape = x.shape
    out = np.sum(x.data, axis=axis)

    def backward(g):
        if axis is None:
            return (np.full(shape, float(g)),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _record("reduce_sum", (x,), np.asarray(out, dtype=np.float64), backward)


def reduce_mean(x: Tensor, axis=None) -> Tensor:
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return scale(reduce_sum(x, axis), 1.0 / n)


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean over all elements of ``(pred - target) ** 2``."""
    _same_shape("mse_loss", pred, target)
    diff = pred.data - target.data
    n = diff.size
    out = np.asarray(np.mean(diff * diff))

    def backward(g):
        d = (2.0 / n) * float(g) * diff
        return d, -d

    return _record("mse_loss", (pred, target), out, backward)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    return _record("reshape", (x,), x.data.reshape(shape), lambda g: (g.reshape(src),))


def take(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice ``[start:stop]`` along ``axis``."""
    src = x.shape
    index = [slice(None)] * x.data.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def backward(g):
        full = np.zeros(src)
        full[index] = g
        return (full,)

    return _record("take", (x,), np.ascontiguousarray(x.data[index]), backward)


def elman(x: Tensor, w: Tensor, u: Tensor, b: Tensor) -> Tensor:
    """Fused Elman recurrence ``h_t = tanh(x_t W + h_{t-1} U + b)`` with ``h_{-1} = 0``.

    ``x`` is ``(batch, steps, in_dim)`` and the result is the full hidden
    trajectory ``(batch, steps, hidden)``.  The time loop runs in the kernel
    backend.
    """
    if x.data.ndim != 3 or x.shape[2] != w.shape[0] or u.shape != (w.shape[1], w.shape[1]) or b.shape != (w.shape[1],):
        raise ShapeError(f"elman: incompatible shapes x{x.shape} W{w.shape} U{u.shape} b{b.shape}")
    xd, wd, ud = x.data, w.data, u.data
    h = kernels.elman_forward(xd, wd, ud, b.data)

    def backward(g):
        return kernels.elman_backward(xd, h, wd, ud, np.ascontiguousarray(g))

    return _record("elman", (x, w, u, b), h, backward)


# ------------------------------------------------------------------ backward


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every tensor reachable from ``loss`` that requires it.

    Gradients accumulate: running backward twice without zeroing doubles them.
    """
    if loss.size != 1 or loss.data.ndim > 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad or loss.graph is None:
        return
    grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
    owners: dict[int, Tensor] = {loss.id: loss}
    for node in reversed(loss.graph.root().nodes):
        g = grads.get(node.output.id)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward_fn(g)):
            if not inp.requires_grad or gi is None:
                continue
            prev = grads.get(inp.id)
            grads[inp.id] = gi if prev is None else prev + gi
            owners[inp.id] = inp
    for tid, g in grads.items():
        t = owners[tid]
        g = np.asarray(g, dtype=np.float64).reshape(t.shape)
        t.grad = g.copy() if t.grad is None else t.grad + g


def input_grad(loss_fn: Callable[[Tensor], Tensor], x) -> np.ndarray:
    """Gradient of ``loss_fn(x)`` with respect to ``x`` only.

    ``x`` is wrapped in a fresh leaf, so the caller's tensor is left untouched.
    ``loss_fn`` must not mark anything else as requiring gradients if the
    caller wants parameters left alone; detectors evaluate their networks with
    frozen parameters for exactly this reason.
    """
    data = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    leaf = Tensor._wrap(np.array(data, dtype=np.float64, order="C"), requires_grad=True)
    loss = loss_fn(leaf)
    if loss.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
    if not np.isfinite(loss.data).all():
        raise NonFiniteError("loss is not finite")
    backward(loss)
    if leaf.grad is None:
        return np.zeros_like(leaf.data)
    if not np.all(np.isfinite(leaf.grad)):
        raise NonFiniteError("input gradient is not finite")
    return leaf.grad
