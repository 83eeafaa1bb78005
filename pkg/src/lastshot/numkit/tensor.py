"""Reverse-mode automatic differentiation over a small, fixed set of array primitives.

Every primitive's backward rule is itself written with primitives, so a
gradient computed with ``create_graph=True`` can be differentiated again
(needed for exact MAML meta-gradients).
"""
from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np

from lastshot.errors import ShapeError

_state = threading.local()


def is_recording() -> bool:
    return getattr(_state, "record", True)


@contextmanager
def recording(flag: bool):
    prev = is_recording()
    _state.record = flag
    try:
        yield
    finally:
        _state.record = prev


def no_grad():
    return recording(False)


class Tensor:
    __slots__ = ("data", "parents", "vjp", "requires_grad", "op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.parents: tuple = ()
        self.vjp = None
        self.requires_grad = requires_grad
        self.op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def T(self):
        return swapaxes(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, vjp, op):
    out = Tensor(data)
    out.op = op
    if is_recording() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.vjp = vjp
    return out


def unbroadcast(g: Tensor, shape) -> Tensor:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    shape = tuple(shape)
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and g.shape[i + lead] != 1
    )
    return reshape(tsum(g, axes, keepdims=True), shape)


# elementwise arithmetic -----------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g, needs):
        return (unbroadcast(g, a.shape) if needs[0] else None,
                unbroadcast(g, b.shape) if needs[1] else None)

    return _make(a.data + b.data, (a, b), vjp, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g, needs):
        return (unbroadcast(g, a.shape) if needs[0] else None,
                unbroadcast(neg(g), b.shape) if needs[1] else None)

    return _make(a.data - b.data, (a, b), vjp, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g, needs):
        return (unbroadcast(g * b, a.shape) if needs[0] else None,
                unbroadcast(g * a, b.shape) if needs[1] else None)

    return _make(a.data * b.data, (a, b), vjp, "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g, needs):
        return (unbroadcast(g / b, a.shape) if needs[0] else None,
                unbroadcast(neg(g * a / (b * b)), b.shape) if needs[1] else None)

    return _make(a.data / b.data, (a, b), vjp, "div")


def neg(a):
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g, needs: (neg(g),), "neg")


def square(a):
    a = as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g, needs: (g * a * 2.0,), "square")


def relu(a):
    a = as_tensor(a)
    mask = (a.data > 0).astype(np.float64)
    return _make(a.data * mask, (a,), lambda g, needs: (g * Tensor(mask),), "relu")


def tanh(a):
    a = as_tensor(a)
    out = _make(np.tanh(a.data), (a,), None, "tanh")
    out.vjp = lambda g, needs: (g * (1.0 - out * out),)
    return out


def exp(a):
    a = as_tensor(a)
    out = _make(np.exp(a.data), (a,), None, "exp")
    out.vjp = lambda g, needs: (g * out,)
    return out


def log(a):
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g, needs: (g / a,), "log")


# shape manipulation ---------------------------------------------------------

def reshape(a, shape):
    a = as_tensor(a)
    src = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g, needs: (reshape(g, src),), "reshape")


def swapaxes(a):
    """Swap the last two axes."""
    a = as_tensor(a)
    return _make(np.swapaxes(a.data, -1, -2), (a,), lambda g, needs: (swapaxes(g),), "swapaxes")


def broadcast_to(a, shape):
    a = as_tensor(a)
    src = a.shape
    return _make(np.broadcast_to(a.data, shape).copy(), (a,),
                 lambda g, needs: (unbroadcast(g, src),), "broadcast_to")


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    src = a.shape
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g, needs):
        if not keepdims and axis is not None:
            g = reshape(g, _keepdims_shape(src, axis))
        elif not keepdims:
            g = reshape(g, (1,) * len(src))
        return (broadcast_to(g, src),)

    return _make(data, (a,), vjp, "sum")


def _keepdims_shape(shape, axis):
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = {ax % len(shape) for ax in axes}
    return tuple(1 if i in axes else s for i, s in enumerate(shape))


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        n = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return tsum(a, axis, keepdims) * (1.0 / n)


def getitem(a, idx):
    a = as_tensor(a)
    src = a.shape
    return _make(a.data[idx], (a,), lambda g, needs: (scatter(g, idx, src),), "getitem")


def scatter(g, idx, shape):
    """Adjoint of ``getitem``: a zero array of ``shape`` with ``g`` added at ``idx``."""
    g = as_tensor(g)
    data = np.zeros(shape)
    np.add.at(data, idx, g.data)
    return _make(data, (g,), lambda gg, needs: (getitem(gg, idx),), "scatter")


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)
    ndim = tensors[0].ndim
    ax = axis % ndim

    def vjp(g, needs):
        out = []
        for i, need in enumerate(needs):
            if not need:
                out.append(None)
                continue
            idx = [slice(None)] * ndim
            idx[ax] = slice(int(bounds[i]), int(bounds[i + 1]))
            out.append(getitem(g, tuple(idx)))
        return tuple(out)

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), vjp, "concat")


# linear algebra -------------------------------------------------------------

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape[-1]} vs {b.shape[-2]}")

    def vjp(g, needs):
        return (unbroadcast(g @ swapaxes(b), a.shape) if needs[0] else None,
                unbroadcast(swapaxes(a) @ g, b.shape) if needs[1] else None)

    return _make(a.data @ b.data, (a, b), vjp, "matmul")


def solve(A, B):
    """X = A^{-1} B for square (batched) A; backward uses the adjoint system."""
    A, B = as_tensor(A), as_tensor(B)
    out = _make(np.linalg.solve(A.data, B.data), (A, B), None, "solve")

    def vjp(g, needs):
        gB = solve(swapaxes(A), g)
        gA = unbroadcast(neg(gB @ swapaxes(out)), A.shape) if needs[0] else None
        return gA, unbroadcast(gB, B.shape) if needs[1] else None

    out.vjp = vjp
    return out


# reductions with fused stability ----------------------------------------------

def logsumexp(a, axis=-1, keepdims=False):
    a = as_tensor(a)
    m = np.max(a.data, axis=axis, keepdims=True)
    data = m + np.log(np.sum(np.exp(a.data - m), axis=axis, keepdims=True))
    out_data = data if keepdims else np.squeeze(data, axis=axis)
    out = _make(out_data, (a,), None, "logsumexp")

    def vjp(g, needs):
        lse = out if keepdims else reshape(out, data.shape)
        gk = g if keepdims else reshape(g, data.shape)
        return (gk * exp(a - lse),)

    out.vjp = vjp
    return out


def log_softmax(a, axis=-1):
    return a - logsumexp(a, axis=axis, keepdims=True)


def softmax(a, axis=-1):
    return exp(log_softmax(a, axis))


def stop_gradient(a):
    return Tensor(as_tensor(a).data)


# backward pass --------------------------------------------------------------

class GradTape:
    """Topologically ordered record of the nodes between ``output`` and its leaves.

    ``visits`` counts node visits during the last backward pass; every node on the
    tape is visited exactly once.
    """

    def __init__(self, output: Tensor, inputs=None):
        self.output = output
        order = []
        seen = set()
        stack = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        if inputs is not None:
            targets = {id(t) for t in inputs}
            relevant = set()
            for node in order:
                if id(node) in targets or any(id(p) in relevant for p in node.parents):
                    relevant.add(id(node))
            order = [n for n in order if id(n) in relevant]
            self._relevant = relevant
        else:
            self._relevant = None
        self.nodes = order
        self.visits = 0

    def backward(self, create_graph: bool = False) -> dict:
        self.visits = 0
        grads = {id(self.output): Tensor(np.ones_like(self.output.data))}
        with recording(create_graph):
            for node in reversed(self.nodes):
                self.visits += 1
                g = grads.get(id(node))
                if g is None or node.vjp is None:
                    continue
                needs = tuple(
                    p.requires_grad and (self._relevant is None or id(p) in self._relevant)
                    for p in node.parents
                )
                if not any(needs):
                    continue
                for p, need, pg in zip(node.parents, needs, node.vjp(g, needs)):
                    if not need or pg is None:
                        continue
                    key = id(p)
                    grads[key] = grads[key] + pg if key in grads else pg
        return grads


def grad(output: Tensor, inputs, create_graph: bool = False):
    """Gradients of scalar ``output`` with respect to each tensor in ``inputs``.

    Inputs that ``output`` does not depend on get exact zeros.
    """
    if output.data.size != 1:
        raise ShapeError(f"grad needs a scalar output, got shape {output.shape}")
    inputs = list(inputs)
    if not output.requires_grad:
        return [Tensor(np.zeros_like(t.data)) for t in inputs]
    tape = GradTape(output, inputs)
    grads = tape.backward(create_graph=create_graph)
    return [grads.get(id(t), Tensor(np.zeros_like(t.data))) for t in inputs]
