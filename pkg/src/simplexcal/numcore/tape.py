"""Reverse-mode gradient tape over float64 numpy values.

Deliberately small: only the primitives the training losses need (affine,
ReLU, softplus, exp, ln, log-sum-exp, lgamma, elementwise arithmetic,
reductions, clamps). Nodes are appended in creation order, so walking the
list backwards is already a valid reverse topological order.

Every op accepts either a ``Var`` or a plain array and returns a plain
array when no ``Var`` is involved, so forward code can be written once and
serve both the differentiated path and frozen inference.
"""

import numpy as np
from scipy import special as sp_special

from .. import kernels
from ..errors import ArgumentError


class Var:
    """A tracked value on a tape."""

    __slots__ = ("value", "grad", "_tape", "_vjp")

    def __init__(self, value, tape):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self._tape = tape
        self._vjp = None

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={self.value.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __neg__(self):
        return neg(self)


class Tape:
    """Ordered record of primitive ops; replaying it backward yields adjoints."""

    def __init__(self):
        self._nodes: list[Var] = []

    def var(self, value) -> Var:
        """Track a leaf value (copied, float64)."""
        v = Var(np.array(value, dtype=np.float64, copy=True), self)
        self._nodes.append(v)
        return v

    def _node(self, value, vjp) -> Var:
        v = Var(value, self)
        v._vjp = vjp
        self._nodes.append(v)
        return v

    def clear(self) -> None:
        self._nodes.clear()

    def grad(self, output: Var, inputs) -> list[np.ndarray]:
        """Adjoints of a scalar ``output`` with respect to each tracked input."""
        if not isinstance(output, Var) or output._tape is not self:
            raise ArgumentError("output was not computed on this tape")
        if output.value.size != 1:
            raise ArgumentError("grad target must be a scalar")
        inputs = list(inputs)
        for x in inputs:
            if not isinstance(x, Var) or x._tape is not self:
                raise ArgumentError("input is not tracked on this tape")
        for node in self._nodes:
            node.grad = None
        output.grad = np.ones_like(output.value)
        for node in reversed(self._nodes):
            if node.grad is not None and node._vjp is not None:
                node._vjp(node.grad)
        return [
            x.grad if x.grad is not None else np.zeros_like(x.value) for x in inputs
        ]


def grad(tape: Tape, output: Var, inputs) -> list[np.ndarray]:
    return tape.grad(output, inputs)


def _val(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def _tape_of(*args) -> Tape | None:
    tape = None
    for a in args:
        if isinstance(a, Var):
            if tape is None:
                tape = a._tape
            elif a._tape is not tape:
                raise ArgumentError("operands live on different tapes")
    return tape


def _acc(var: Var, g: np.ndarray) -> None:
    var.grad = g if var.grad is None else var.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    g = np.asarray(g)
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def add(a, b):
    tape = _tape_of(a, b)
    av, bv = _val(a), _val(b)
    if tape is None:
        return av + bv

    def vjp(g):
        if isinstance(a, Var):
            _acc(a, _unbroadcast(g, av.shape))
        if isinstance(b, Var):
            _acc(b, _unbroadcast(g, bv.shape))

    return tape._node(av + bv, vjp)


def sub(a, b):
    tape = _tape_of(a, b)
    av, bv = _val(a), _val(b)
    if tape is None:
        return av - bv

    def vjp(g):
        if isinstance(a, Var):
            _acc(a, _unbroadcast(g, av.shape))
        if isinstance(b, Var):
            _acc(b, _unbroadcast(-g, bv.shape))

    return tape._node(av - bv, vjp)


def mul(a, b):
    tape = _tape_of(a, b)
    av, bv = _val(a), _val(b)
    if tape is None:
        return av * bv

    def vjp(g):
        if isinstance(a, Var):
            _acc(a, _unbroadcast(g * bv, av.shape))
        if isinstance(b, Var):
            _acc(b, _unbroadcast(g * av, bv.shape))

    return tape._node(av * bv, vjp)


def div(a, b):
    tape = _tape_of(a, b)
    av, bv = _val(a), _val(b)
    if tape is None:
        return av / bv

    def vjp(g):
        if isinstance(a, Var):
            _acc(a, _unbroadcast(g / bv, av.shape))
        if isinstance(b, Var):
            _acc(b, _unbroadcast(-g * av / (bv * bv), bv.shape))

    return tape._node(av / bv, vjp)


def neg(a):
    if not isinstance(a, Var):
        return -_val(a)

    def vjp(g):
        _acc(a, -g)

    return a._tape._node(-a.value, vjp)


def matmul(a, b):
    tape = _tape_of(a, b)
    av, bv = _val(a), _val(b)
    if tape is None:
        return av @ bv
    if av.ndim != 2 or bv.ndim != 2:
        raise ArgumentError("matmul supports 2-D operands only")

    def vjp(g):
        if isinstance(a, Var):
            _acc(a, g @ bv.T)
        if isinstance(b, Var):
            _acc(b, av.T @ g)

    return tape._node(av @ bv, vjp)


def relu(a):
    av = _val(a)
    out = np.maximum(av, 0.0)
    if not isinstance(a, Var):
        return out

    def vjp(g):
        _acc(a, g * (av > 0.0))

    return a._tape._node(out, vjp)


def softplus(a):
    av = _val(a)
    out = kernels.softplus_arr(np.ascontiguousarray(np.atleast_1d(av))).reshape(av.shape)
    if not isinstance(a, Var):
        return out

    def vjp(g):
        _acc(a, g * sp_special.expit(av))

    return a._tape._node(out, vjp)


def exp(a):
    av = _val(a)
    out = np.exp(av)
    if not isinstance(a, Var):
        return out

    def vjp(g):
        _acc(a, g * out)

    return a._tape._node(out, vjp)


def log(a):
    av = _val(a)
    out = np.log(av)
    if not isinstance(a, Var):
        return out

    def vjp(g):
        _acc(a, g / av)

    return a._tape._node(out, vjp)


def lgamma(a):
    av = _val(a)
    out = sp_special.gammaln(av)
    if not isinstance(a, Var):
        return out

    def vjp(g):
        _acc(a, g * sp_special.digamma(av))

    return a._tape._node(out, vjp)


def logsumexp_rows(a):
    """Row-wise log-sum-exp of a (n, k) operand."""
    av = _val(a)
    out = kernels.logsumexp_rows(np.ascontiguousarray(av))
    if not isinstance(a, Var):
        return out

    def vjp(g):
        _acc(a, g[:, None] * kernels.softmax_rows(np.ascontiguousarray(av)))

    return a._tape._node(out, vjp)


def vsum(a, axis=None):
    av = _val(a)
    out = np.sum(av, axis=axis)
    if not isinstance(a, Var):
        return out

    def vjp(g):
        if axis is None:
            _acc(a, np.broadcast_to(g, av.shape))
        else:
            _acc(a, np.broadcast_to(np.expand_dims(g, axis), av.shape))

    return a._tape._node(out, vjp)


def vmean(a):
    av = _val(a)
    out = np.mean(av)
    if not isinstance(a, Var):
        return out

    def vjp(g):
        _acc(a, np.broadcast_to(g / av.size, av.shape))

    return a._tape._node(out, vjp)


def clamp_min(a, lo: float):
    av = _val(a)
    out = np.maximum(av, lo)
    if not isinstance(a, Var):
        return out

    def vjp(g):
        _acc(a, g * (av > lo))

    return a._tape._node(out, vjp)


def clamp_max(a, hi: float):
    av = _val(a)
    out = np.minimum(av, hi)
    if not isinstance(a, Var):
        return out

    def vjp(g):
        _acc(a, g * (av < hi))

    return a._tape._node(out, vjp)


def reshape(a, shape):
    av = _val(a)
    if not isinstance(a, Var):
        return av.reshape(shape)

    def vjp(g):
        _acc(a, np.asarray(g).reshape(av.shape))

    return a._tape._node(av.reshape(shape), vjp)
