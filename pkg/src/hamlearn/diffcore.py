"""Small reverse-mode differentiation engine over numpy arrays.

Every operation in this module accepts plain arrays or :class:`Node`
objects. With plain arrays the result is a plain array, so the same
model/integrator code runs eagerly (for reference integration and
evaluation) or records a graph (for training). The primitive set is
closed:

    add, sub, mul, div, neg, matmul, tanh, unary, relu, sum, dot,
    cross, solve, transpose, reshape, getitem, concatenate, stack

Input-gradients of the Hamiltonian models are written in terms of these
same primitives, so a single reverse pass through a rollout graph yields
exact parameter gradients of the rollout loss.

Graph nodes are topologically ordered by creation index; the reverse pass
walks them in decreasing index order, which keeps accumulation order (and
hence the floating point result) deterministic.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

_ids = itertools.count()


class Node:
    """A value in a recorded computation together with its local derivatives."""

    __slots__ = ("value", "parents", "vjps", "kind", "id")
    __array_priority__ = 1000.0
    __array_ufunc__ = None  # make ndarray (op) Node defer to Node

    def __init__(self, value, parents=(), vjps=(), kind="constant"):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents
        self.vjps = vjps
        self.kind = kind
        self.id = next(_ids)

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def T(self):
        return transpose(self)

    def __repr__(self):
        return f"Node({self.kind}, shape={self.value.shape})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)


def parameter(value) -> Node:
    return Node(np.array(value, dtype=np.float64), kind="parameter")


def input_node(value) -> Node:
    return Node(np.array(value, dtype=np.float64), kind="input")


def constant(value) -> Node:
    return Node(np.array(value, dtype=np.float64), kind="constant")


def value(x):
    """Underlying array of a node, or the argument itself."""
    return x.value if isinstance(x, Node) else x


def is_node(x) -> bool:
    return isinstance(x, Node)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _record(out, kind, *pairs):
    """Wrap ``out`` into a node if any operand is a node.

    ``pairs`` are (operand, vjp) tuples; constant operands are skipped.
    """
    parents = []
    vjps = []
    for operand, vjp in pairs:
        if isinstance(operand, Node):
            parents.append(operand)
            vjps.append(vjp)
    if not parents:
        return out
    return Node(out, tuple(parents), tuple(vjps), kind)


def _shape(x):
    return np.shape(value(x))


# elementwise arithmetic -----------------------------------------------------

def add(a, b):
    av, bv = value(a), value(b)
    sa, sb = np.shape(av), np.shape(bv)
    return _record(
        av + bv, "add",
        (a, lambda g: _unbroadcast(g, sa)),
        (b, lambda g: _unbroadcast(g, sb)),
    )


def sub(a, b):
    av, bv = value(a), value(b)
    sa, sb = np.shape(av), np.shape(bv)
    return _record(
        av - bv, "sub",
        (a, lambda g: _unbroadcast(g, sa)),
        (b, lambda g: -_unbroadcast(g, sb)),
    )


def mul(a, b):
    av, bv = value(a), value(b)
    sa, sb = np.shape(av), np.shape(bv)
    return _record(
        av * bv, "mul",
        (a, lambda g: _unbroadcast(g * bv, sa)),
        (b, lambda g: _unbroadcast(g * av, sb)),
    )


def div(a, b):
    av, bv = value(a), value(b)
    sa, sb = np.shape(av), np.shape(bv)
    out = av / bv
    return _record(
        out, "div",
        (a, lambda g: _unbroadcast(g / bv, sa)),
        (b, lambda g: _unbroadcast(-g * out / bv, sb)),
    )


def neg(a):
    return _record(-value(a), "neg", (a, lambda g: -g))


def tanh(a):
    out = np.tanh(value(a))
    return _record(out, "tanh", (a, lambda g: g * (1.0 - out * out)))


def relu(a):
    """max(0, a); the derivative at 0 is taken as 0."""
    av = value(a)
    mask = av > 0.0
    return _record(np.where(mask, av, 0.0), "relu", (a, lambda g: g * mask))


def unary(a, f: Callable, df: Callable, kind="unary"):
    """Elementwise scalar function with a supplied derivative."""
    av = value(a)
    return _record(f(av), kind, (a, lambda g: g * df(av)))


# reductions and products ---------------------------------------------------

def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    av = value(a)
    shape = np.shape(av)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape).copy()

    return _record(np.sum(av, axis=axis, keepdims=keepdims), "sum", (a, vjp))


def dot(a, b):
    """Inner product over the last axis, keeping it with length 1."""
    av, bv = value(a), value(b)
    sa, sb = np.shape(av), np.shape(bv)
    out = np.sum(av * bv, axis=-1, keepdims=True)
    return _record(
        out, "dot",
        (a, lambda g: _unbroadcast(g * bv, sa)),
        (b, lambda g: _unbroadcast(g * av, sb)),
    )


_ROT1 = [1, 2, 0]
_ROT2 = [2, 0, 1]


def _cross3(a, b):
    # np.cross and fancy indexing both carry heavy overhead on small batches; take() does not
    return a.take(_ROT1, -1) * b.take(_ROT2, -1) - a.take(_ROT2, -1) * b.take(_ROT1, -1)


def cross(a, b):
    """Cross product of 3-vectors over the last axis."""
    av, bv = np.asarray(value(a)), np.asarray(value(b))
    sa, sb = av.shape, bv.shape
    return _record(
        _cross3(av, bv), "cross",
        (a, lambda g: _unbroadcast(_cross3(bv, g), sa)),
        (b, lambda g: _unbroadcast(_cross3(g, av), sb)),
    )


def matmul(a, b):
    """Matrix product with numpy broadcasting over leading axes (both >= 2-D)."""
    av, bv = value(a), value(b)
    sa, sb = np.shape(av), np.shape(bv)
    return _record(
        av @ bv, "matmul",
        (a, lambda g: _unbroadcast(g @ np.swapaxes(bv, -1, -2), sa)),
        (b, lambda g: _unbroadcast(np.swapaxes(av, -1, -2) @ g, sb)),
    )


def solve(m, p):
    """Batched linear solve y = m^{-1} p, with m (..., n, n) and p (..., n).

    Reverse rule: p_bar = m^{-T} y_bar and m_bar = -(m^{-T} y_bar) y^T,
    which reduces to the usual symmetric form when m is SPD.
    """
    mv, pv = value(m), value(p)
    sm, sp = np.shape(mv), np.shape(pv)
    y = np.linalg.solve(mv, pv[..., None])[..., 0]
    last = [None, None]

    # both operand rules need m^{-T} g; solve once per incoming adjoint
    def adj(g):
        if last[0] is not g:
            last[0] = g
            last[1] = np.linalg.solve(np.swapaxes(mv, -1, -2), g[..., None])[..., 0]
        return last[1]

    return _record(
        y, "solve",
        (m, lambda g: _unbroadcast(-adj(g)[..., :, None] * y[..., None, :], sm)),
        (p, lambda g: _unbroadcast(adj(g), sp)),
    )


# shape manipulation -------------------------------------------------------

def transpose(a):
    return _record(np.swapaxes(value(a), -1, -2), "transpose",
                   (a, lambda g: np.swapaxes(g, -1, -2)))


def reshape(a, shape):
    av = value(a)
    old = np.shape(av)
    return _record(np.reshape(av, shape), "reshape", (a, lambda g: np.reshape(g, old)))


def getitem(a, idx):
    av = value(a)
    shape = np.shape(av)

    def vjp(g):
        out = np.zeros(shape)
        out[idx] = g
        return out

    return _record(np.asarray(av[idx], dtype=np.float64), "getitem", (a, vjp))


def concatenate(items: Sequence, axis=-1):
    vals = [value(x) for x in items]
    out = np.concatenate(vals, axis=axis)
    ax = axis % out.ndim
    bounds = np.cumsum([0] + [np.shape(v)[ax] for v in vals])
    pairs = []
    for i, x in enumerate(items):
        sl = [slice(None)] * out.ndim
        sl[ax] = slice(bounds[i], bounds[i + 1])
        sl = tuple(sl)
        pairs.append((x, lambda g, sl=sl: g[sl]))
    return _record(out, "concatenate", *pairs)


def stack(items: Sequence, axis=0):
    vals = [value(x) for x in items]
    out = np.stack(vals, axis=axis)
    ax = axis % out.ndim
    pairs = [(x, lambda g, i=i: np.take(g, i, axis=ax)) for i, x in enumerate(items)]
    return _record(out, "stack", *pairs)


# reverse pass ---------------------------------------------------------------

def _collect(root: Node):
    seen = {}
    stack_ = [root]
    while stack_:
        n = stack_.pop()
        if n.id in seen:
            continue
        seen[n.id] = n
        for parent in n.parents:
            if parent.id not in seen:
                stack_.append(parent)
    return [seen[i] for i in sorted(seen, reverse=True)]


def backward(root, wrt: Sequence[Node]) -> list[np.ndarray]:
    """Adjoints of a scalar ``root`` with respect to each node in ``wrt``.

    Nodes that do not influence the root get a zero adjoint. A root that is
    not a node (a plain constant) gives all-zero adjoints.
    """
    if not isinstance(root, Node):
        return [np.zeros_like(w.value) for w in wrt]
    if root.value.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.value.shape}")
    keep = {w.id for w in wrt}
    adjoints = {root.id: np.ones_like(root.value)}
    for node in _collect(root):
        if not node.parents:
            continue
        g = adjoints.get(node.id) if node.id in keep else adjoints.pop(node.id, None)
        if g is None:
            continue
        for parent, vjp in zip(node.parents, node.vjps):
            contrib = vjp(g)
            prev = adjoints.get(parent.id)
            adjoints[parent.id] = contrib if prev is None else prev + contrib
    return [adjoints.get(w.id, np.zeros_like(w.value)).reshape(w.value.shape) for w in wrt]


def gradient(f: Callable, x) -> tuple[float, np.ndarray]:
    """Value and gradient of a scalar function written with this module's ops."""
    xn = input_node(x)
    out = f(xn)
    (g,) = backward(out, [xn])
    return float(np.sum(value(out))), g


# checks -------------------------------------------------------------------

@dataclass(frozen=True)
class GradientPair:
    """H(x) and its gradient with respect to the phase point x = (q, p)."""

    value: float
    grad: np.ndarray


def eval_with_input_grad(model, x) -> GradientPair:
    """Hamiltonian value and phase-space gradient of ``model`` at one point.

    ``x`` is the flat phase vector (q, p); for chain models q and p are the
    k stacked 3-vectors. ``model`` is a :class:`hamlearn.models.ModelParams`.
    """
    from .models import hamiltonian_model_eval

    return hamiltonian_model_eval(model, x)


def loss_param_gradient(loss_root, params) -> np.ndarray:
    """Flat gradient of ``loss_root`` w.r.t. the parameter nodes of ``params``.

    ``params`` is a :class:`hamlearn.models.ModelParams` whose arrays are
    parameter nodes (see ``ModelParams.as_nodes``); the ordering is that of
    ``ModelParams.flatten``.
    """
    leaves = params.leaves()
    grads = backward(loss_root, leaves)
    if not grads:
        return np.zeros(0)
    return np.concatenate([g.ravel() for g in grads])


def finite_difference_check(f: Callable, x, analytic, step: float = 1e-5) -> float:
    """Max coordinate-wise relative error of ``analytic`` against central differences.

    The denominator is max(1, |analytic_i|). A non-finite function value or
    analytic entry yields ``inf`` instead of raising.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x = np.array(x, dtype=np.float64)
    analytic = np.asarray(analytic, dtype=np.float64).reshape(x.shape)
    flat = x.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += step
        xm[i] -= step
        fp = float(f(xp.reshape(x.shape)))
        fm = float(f(xm.reshape(x.shape)))
        fd = (fp - fm) / (2.0 * step)
        a = analytic.reshape(-1)[i]
        if not (np.isfinite(fd) and np.isfinite(a)):
            return float("inf")
        worst = max(worst, abs(fd - a) / max(1.0, abs(a)))
    return worst
