"""Tape-based reverse-mode automatic differentiation over numpy arrays.

Every primitive accepts plain arrays or :class:`Var` objects. When no input is
a gradient-tracking ``Var`` the primitive returns the bare numpy result and
nothing is recorded, so numerical code written against these functions runs
unchanged with or without a tape.

Example
-------
>>> tape = Tape()
>>> x = tape.var(np.array([0.5, -1.0]))
>>> y = sum(tanh(x) * x)
>>> grads = backward(tape, y)
>>> grads[x].shape
(2,)
"""
from __future__ import annotations

import builtins
import itertools

import numpy as np
from scipy.special import expit

from .errors import ShapeError

__all__ = [
    "Tape", "Var", "backward", "record", "value", "is_var",
    "add", "sub", "mul", "div", "neg", "power", "matmul", "dot",
    "exp", "log", "tanh", "sigmoid", "sqrt", "abs", "softplus", "clip",
    "sum", "mean", "reshape", "transpose", "swapaxes", "getitem",
    "concat", "stack", "where", "broadcast_to", "tridiag_sqrt_e1",
]

_ids = itertools.count()


class Node:
    __slots__ = ("out", "op", "parents", "vjps")

    def __init__(self, out, op, parents, vjps):
        self.out = out
        self.op = op
        self.parents = parents
        self.vjps = vjps


class Tape:
    """Append-only record of primitive operations.

    Nodes are appended as operations execute, so the list is already in
    topological order and :func:`backward` simply walks it in reverse.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.leaves: list[Var] = []

    def var(self, value, requires_grad=True, name=None) -> "Var":
        v = Var(np.array(value, dtype=np.float64), self, requires_grad, name)
        if requires_grad:
            self.leaves.append(v)
        return v

    def __len__(self):
        return len(self.nodes)


class Var:
    """A tensor value tied to a tape position."""

    __slots__ = ("value", "tape", "requires_grad", "name", "id")
    # make numpy defer binary operators to the reflected Var methods
    __array_ufunc__ = None

    def __init__(self, value, tape, requires_grad=True, name=None):
        self.value = value
        self.tape = tape
        self.requires_grad = requires_grad
        self.name = name
        self.id = next(_ids)

    shape = property(lambda self: self.value.shape)
    ndim = property(lambda self: self.value.ndim)
    size = property(lambda self: self.value.size)
    T = property(lambda self: transpose(self))

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Var{label}(shape={self.value.shape})"

    def __hash__(self):
        return self.id

    def __eq__(self, other):
        return self is other

    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def is_var(x) -> bool:
    return isinstance(x, Var) and x.requires_grad


def value(x):
    """Numeric value of ``x`` whether it is a Var or already an array."""
    return x.value if isinstance(x, Var) else x


def _make(out, op, pairs):
    live = [(p, f) for p, f in pairs if isinstance(p, Var) and p.requires_grad]
    if not live:
        return out
    tape = live[0][0].tape
    for p, _ in live[1:]:
        if p.tape is not tape:
            raise ValueError("operands were recorded on different tapes")
    res = Var(out, tape)
    tape.nodes.append(Node(res.id, op, [p for p, _ in live], [f for _, f in live]))
    return res


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


def _check_broadcast(op, *shapes):
    try:
        return np.broadcast_shapes(*shapes)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {shapes}") from None


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b):
    av, bv = value(a), value(b)
    sa, sb = np.shape(av), np.shape(bv)
    _check_broadcast("add", sa, sb)
    return _make(av + bv, "add", [(a, lambda g: _unbroadcast(g, sa)),
                                   (b, lambda g: _unbroadcast(g, sb))])


def sub(a, b):
    av, bv = value(a), value(b)
    sa, sb = np.shape(av), np.shape(bv)
    _check_broadcast("sub", sa, sb)
    return _make(av - bv, "sub", [(a, lambda g: _unbroadcast(g, sa)),
                                   (b, lambda g: _unbroadcast(-g, sb))])


def mul(a, b):
    av, bv = value(a), value(b)
    sa, sb = np.shape(av), np.shape(bv)
    _check_broadcast("mul", sa, sb)
    return _make(av * bv, "mul", [(a, lambda g: _unbroadcast(g * bv, sa)),
                                   (b, lambda g: _unbroadcast(g * av, sb))])


def div(a, b):
    av, bv = value(a), value(b)
    sa, sb = np.shape(av), np.shape(bv)
    _check_broadcast("div", sa, sb)
    out = av / bv
    return _make(out, "div", [(a, lambda g: _unbroadcast(g / bv, sa)),
                               (b, lambda g: _unbroadcast(-g * out / bv, sb))])


def neg(a):
    return _make(-value(a), "neg", [(a, lambda g: -g)])


def power(a, p):
    """``a ** p`` for a constant exponent."""
    av = value(a)
    return _make(av ** p, "power", [(a, lambda g: g * p * av ** (p - 1))])


def exp(a):
    out = np.exp(value(a))
    return _make(out, "exp", [(a, lambda g: g * out)])


def log(a):
    av = value(a)
    return _make(np.log(av), "log", [(a, lambda g: g / av)])


def tanh(a):
    out = np.tanh(value(a))
    return _make(out, "tanh", [(a, lambda g: g * (1.0 - out * out))])


def sigmoid(a):
    out = expit(value(a))
    return _make(out, "sigmoid", [(a, lambda g: g * out * (1.0 - out))])


def sqrt(a):
    out = np.sqrt(value(a))
    return _make(out, "sqrt", [(a, lambda g: g * 0.5 / out)])


def abs(a):
    av = value(a)
    return _make(np.abs(av), "abs", [(a, lambda g: g * np.sign(av))])


def softplus(a):
    av = value(a)
    return _make(np.logaddexp(0.0, av), "softplus", [(a, lambda g: g * expit(av))])


def clip(a, lo, hi):
    av = value(a)
    inside = (av >= lo) & (av <= hi)
    return _make(np.clip(av, lo, hi), "clip", [(a, lambda g: g * inside)])


def where(cond, a, b):
    """Select from ``a`` where the constant mask ``cond`` holds, else ``b``."""
    cond = np.asarray(cond, dtype=bool)
    av, bv = value(a), value(b)
    sa, sb = np.shape(av), np.shape(bv)
    _check_broadcast("where", cond.shape, sa, sb)
    return _make(np.where(cond, av, bv), "where",
                 [(a, lambda g: _unbroadcast(np.where(cond, g, 0.0), sa)),
                  (b, lambda g: _unbroadcast(np.where(cond, 0.0, g), sb))])


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    """``np.matmul`` semantics, including 1-D operands and batch broadcasting."""
    av, bv = value(a), value(b)
    try:
        out = np.matmul(av, bv)
    except ValueError as exc:
        raise ShapeError(f"matmul: {np.shape(av)} @ {np.shape(bv)}: {exc}") from None
    sa, sb = np.shape(av), np.shape(bv)

    if av.ndim == 1 and bv.ndim == 1:
        return _make(out, "matmul", [(a, lambda g: g * bv), (b, lambda g: g * av)])

    def grad_a(g):
        if av.ndim == 1:
            ga = (g[..., None, :] @ np.swapaxes(bv, -1, -2))[..., 0, :]
        elif bv.ndim == 1:
            ga = g[..., :, None] * bv
        else:
            ga = g @ np.swapaxes(bv, -1, -2)
        return _unbroadcast(ga, sa)

    def grad_b(g):
        if av.ndim == 1:
            gb = av[:, None] * g[..., None, :]
        elif bv.ndim == 1:
            gb = (np.swapaxes(av, -1, -2) @ g[..., :, None])[..., 0]
        else:
            gb = np.swapaxes(av, -1, -2) @ g
        return _unbroadcast(gb, sb)

    return _make(out, "matmul", [(a, grad_a), (b, grad_b)])


def dot(a, b):
    return matmul(a, b)


# ---------------------------------------------------------------------------
# reductions and structural ops


def sum(a, axis=None, keepdims=False):
    av = value(a)
    shape = np.shape(av)
    out = np.sum(av, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape)

    return _make(out, "sum", [(a, vjp)])


def mean(a, axis=None, keepdims=False):
    av = value(a)
    n = av.size if axis is None else np.prod([av.shape[i] for i in np.atleast_1d(axis)])
    return sum(a, axis=axis, keepdims=keepdims) / float(n)


def reshape(a, shape):
    av = value(a)
    old = np.shape(av)
    return _make(np.reshape(av, shape), "reshape", [(a, lambda g: np.reshape(g, old))])


def transpose(a, axes=None):
    av = value(a)
    out = np.transpose(av, axes)
    inv = None if axes is None else np.argsort(axes)
    return _make(out, "transpose", [(a, lambda g: np.transpose(g, inv))])


def swapaxes(a, ax1, ax2):
    return _make(np.swapaxes(value(a), ax1, ax2), "swapaxes",
                 [(a, lambda g: np.swapaxes(g, ax1, ax2))])


def broadcast_to(a, shape):
    av = value(a)
    old = np.shape(av)
    _check_broadcast("broadcast_to", old, shape)
    return _make(np.broadcast_to(av, shape), "broadcast_to",
                 [(a, lambda g: _unbroadcast(g, old))])


def _is_fancy(idx):
    parts = idx if isinstance(idx, tuple) else (idx,)
    return builtins.any(isinstance(p, (np.ndarray, list)) for p in parts)


def getitem(a, idx):
    av = value(a)
    out = av[idx]
    fancy = _is_fancy(idx)

    def vjp(g):
        z = np.zeros_like(av)
        if fancy:
            np.add.at(z, idx, g)
        else:
            z[idx] = g
        return z

    return _make(out, "getitem", [(a, vjp)])


def concat(xs, axis=0):
    vals = [value(x) for x in xs]
    try:
        out = np.concatenate(vals, axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    bounds = np.cumsum([0] + [v.shape[axis] for v in vals])

    def piece(i):
        sl = [slice(None)] * out.ndim
        sl[axis] = slice(bounds[i], bounds[i + 1])
        sl = tuple(sl)
        return lambda g: g[sl]

    return _make(out, "concat", [(x, piece(i)) for i, x in enumerate(xs)])


def stack(xs, axis=0):
    vals = [value(x) for x in xs]
    try:
        out = np.stack(vals, axis=axis)
    except ValueError as exc:
        raise ShapeError(f"stack: {exc}") from None

    def piece(i):
        return lambda g: np.take(g, i, axis=axis)

    return _make(out, "stack", [(x, piece(i)) for i, x in enumerate(xs)])


# ---------------------------------------------------------------------------
# matrix function used by the Lanczos square-root action


def _sqrt_divided_differences(lam, f):
    li, lj = lam[..., :, None], lam[..., None, :]
    fi, fj = f[..., :, None], f[..., None, :]
    both_pos = (li > 0) & (lj > 0)
    denom_pos = np.where(both_pos, fi + fj, 1.0)
    diff = li - lj
    denom = np.where(diff != 0, diff, 1.0)
    # (sqrt a - sqrt b)/(a - b) = 1/(sqrt a + sqrt b) avoids cancellation;
    # pairs with a clamped eigenvalue fall back to the plain quotient
    G = np.where(both_pos, 1.0 / denom_pos, np.where(diff != 0, (fi - fj) / denom, 0.0))
    return G


def tridiag_sqrt_e1(alpha, beta):
    """First column of the principal square root of symmetric tridiagonal H.

    ``alpha`` (..., k) is the diagonal and ``beta`` (..., k-1) the off-diagonal.
    Eigenvalues below zero are clamped. The backward pass uses the
    Daleckii-Krein formula for the derivative of a matrix function.
    """
    av, bv = value(alpha), value(beta)
    k = av.shape[-1]
    if bv.shape[-1] != k - 1 or bv.shape[:-1] != av.shape[:-1]:
        raise ShapeError(f"tridiag_sqrt_e1: alpha {av.shape} vs beta {bv.shape}")
    H = np.zeros(av.shape + (k,))
    i = np.arange(k)
    H[..., i, i] = av
    H[..., i[:-1], i[1:]] = bv
    H[..., i[1:], i[:-1]] = bv
    lam, U = np.linalg.eigh(H)
    f = np.sqrt(np.maximum(lam, 0.0))
    u0 = U[..., 0, :]
    out = (U @ (f * u0)[..., None])[..., 0]
    cache = {}

    def hbar(g):
        if cache.get("g") is not g:
            G = _sqrt_divided_differences(lam, f)
            a = (np.swapaxes(U, -1, -2) @ g[..., None])[..., 0]
            inner = G * (a[..., :, None] * u0[..., None, :])
            cache["g"] = g
            cache["H"] = U @ inner @ np.swapaxes(U, -1, -2)
        return cache["H"]

    def grad_alpha(g):
        return hbar(g)[..., i, i]

    def grad_beta(g):
        Hb = hbar(g)
        return Hb[..., i[:-1], i[1:]] + Hb[..., i[1:], i[:-1]]

    return _make(out, "tridiag_sqrt_e1", [(alpha, grad_alpha), (beta, grad_beta)])


# ---------------------------------------------------------------------------

PRIMITIVES = {
    "add": add, "sub": sub, "mul": mul, "div": div, "neg": neg, "power": power,
    "matmul": matmul, "matvec": matmul, "dot": dot, "exp": exp, "log": log,
    "tanh": tanh, "sigmoid": sigmoid, "sqrt": sqrt, "abs": abs,
    "softplus": softplus, "clip": clip, "where": where, "sum": sum,
    "mean": mean, "reshape": reshape, "transpose": transpose,
    "swapaxes": swapaxes, "broadcast_to": broadcast_to, "getitem": getitem,
    "slice": getitem, "concat": concat, "stack": stack,
    "tridiag_sqrt_e1": tridiag_sqrt_e1,
}


def record(op, *inputs, **kwargs):
    """Apply primitive ``op`` (by name) to ``inputs``, recording it if needed."""
    try:
        fn = PRIMITIVES[op]
    except KeyError:
        raise ValueError(f"unknown primitive {op!r}") from None
    return fn(*inputs, **kwargs)


def backward(tape: Tape, root: Var) -> dict:
    """Reverse sweep from scalar ``root``; returns ``{leaf: gradient}``.

    Every gradient-tracking leaf of the tape gets an entry (zeros when the
    root does not depend on it).
    """
    if not isinstance(root, Var):
        raise ValueError("backward needs a Var root recorded on the tape")
    if root.tape is not tape:
        raise ValueError("root was not recorded on this tape")
    if root.value.shape != ():
        raise ValueError(f"backward needs a scalar root, got shape {root.value.shape}")
    grads = {root.id: np.ones(())}
    for node in reversed(tape.nodes):
        g = grads.pop(node.out, None)
        if g is None:
            continue
        for parent, vjp in zip(node.parents, node.vjps):
            contrib = vjp(g)
            prev = grads.get(parent.id)
            grads[parent.id] = contrib if prev is None else prev + contrib
    out = {}
    for leaf in tape.leaves:
        g = grads.get(leaf.id)
        out[leaf] = np.zeros_like(leaf.value) if g is None else np.array(g, dtype=np.float64)
    return out
