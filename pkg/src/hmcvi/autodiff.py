"""Tape-style reverse-mode differentiation over numpy arrays, plus Adam.

Every op accepts plain ndarrays or :class:`Var` nodes. When no argument is a
``Var`` the op returns a plain ndarray and records nothing, so the same model
code runs both as a fast numeric path and as a differentiable graph.

Values are float64. Row broadcasting (a minibatch against a bias vector or a
per-row scalar) is supported; gradients are summed back onto the broadcast
shape.
"""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

_counter = itertools.count()


class DomainError(ValueError):
    """Raised when log or sqrt is applied outside its domain."""


class Var:
    """A node in the expression graph.

    ``parents`` holds ``(parent, vjp)`` pairs where ``vjp`` maps the gradient
    of this node to the gradient contribution for the parent.
    """

    __slots__ = ("value", "parents", "op", "grad", "order")

    def __init__(self, value, parents=(), op="leaf"):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents
        self.op = op
        self.grad = None
        self.order = next(_counter)

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Var(op={self.op}, shape={self.value.shape})"

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

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self):
        return transpose(self)


def value(x):
    """Numeric value of a Var or array-like."""
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def is_var(*xs) -> bool:
    return any(isinstance(x, Var) for x in xs)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _make(val, parents, op):
    return Var(val, tuple((p, f) for p, f in parents if isinstance(p, Var)), op)


# --- elementary ops -----------------------------------------------------------

def add(a, b):
    va, vb = value(a), value(b)
    out = va + vb
    if not is_var(a, b):
        return out
    return _make(out, [(a, lambda g: _unbroadcast(g, va.shape)),
                       (b, lambda g: _unbroadcast(g, vb.shape))], "add")


def sub(a, b):
    va, vb = value(a), value(b)
    out = va - vb
    if not is_var(a, b):
        return out
    return _make(out, [(a, lambda g: _unbroadcast(g, va.shape)),
                       (b, lambda g: -_unbroadcast(g, vb.shape))], "sub")


def mul(a, b):
    va, vb = value(a), value(b)
    out = va * vb
    if not is_var(a, b):
        return out
    return _make(out, [(a, lambda g: _unbroadcast(g * vb, va.shape)),
                       (b, lambda g: _unbroadcast(g * va, vb.shape))], "mul")


def div(a, b):
    va, vb = value(a), value(b)
    out = va / vb
    if not is_var(a, b):
        return out
    return _make(out, [(a, lambda g: _unbroadcast(g / vb, va.shape)),
                       (b, lambda g: _unbroadcast(-g * out / vb, vb.shape))], "div")


def neg(a):
    if not isinstance(a, Var):
        return -np.asarray(a, dtype=np.float64)
    return _make(-a.value, [(a, lambda g: -g)], "neg")


def square(a):
    return mul(a, a)


def exp(a):
    out = np.exp(value(a))
    if not isinstance(a, Var):
        return out
    return _make(out, [(a, lambda g: g * out)], "exp")


def log(a):
    va = value(a)
    if np.any(va <= 0) or np.any(np.isnan(va)):
        raise DomainError("log of non-positive value")
    out = np.log(va)
    if not isinstance(a, Var):
        return out
    return _make(out, [(a, lambda g: g / va)], "log")


def sqrt(a):
    va = value(a)
    if np.any(va < 0) or np.any(np.isnan(va)):
        raise DomainError("sqrt of negative value")
    out = np.sqrt(va)
    if not isinstance(a, Var):
        return out
    return _make(out, [(a, lambda g: g * 0.5 / out)], "sqrt")


def tanh(a):
    out = np.tanh(value(a))
    if not isinstance(a, Var):
        return out
    return _make(out, [(a, lambda g: g * (1.0 - out * out))], "tanh")


def _sigmoid(x):
    # branch-free stable logistic
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a):
    out = _sigmoid(value(a))
    if not isinstance(a, Var):
        return out
    return _make(out, [(a, lambda g: g * out * (1.0 - out))], "sigmoid")


def softplus(a):
    va = value(a)
    out = np.logaddexp(0.0, va)
    if not isinstance(a, Var):
        return out
    return _make(out, [(a, lambda g: g * _sigmoid(va))], "softplus")


def relu(a):
    va = value(a)
    mask = va > 0  # derivative at 0 is 0
    out = np.where(mask, va, 0.0)
    if not isinstance(a, Var):
        return out
    return _make(out, [(a, lambda g: g * mask)], "relu")


def matmul(a, b):
    """Matrix product; ``a`` may be a vector or a (batch, n) matrix."""
    va, vb = value(a), value(b)
    out = va @ vb
    if not is_var(a, b):
        return out

    def ga(g):
        if vb.ndim == 1:
            return np.multiply.outer(g, vb) if va.ndim > 1 else g * vb
        return g @ vb.T

    def gb(g):
        if va.ndim == 1:
            return np.multiply.outer(va, g) if vb.ndim > 1 else g * va
        if vb.ndim == 1:
            return va.T @ g
        return va.T @ g

    return _make(out, [(a, ga), (b, gb)], "matmul")


def dot(a, b):
    """Inner product over the last axis (row-wise for matrices)."""
    return sum(mul(a, b), axis=-1)


def transpose(a):
    if not isinstance(a, Var):
        return np.asarray(a).T
    return _make(a.value.T, [(a, lambda g: g.T)], "transpose")


_sum = sum


def sum(a, axis=None):  # noqa: A001 - mirrors numpy naming
    va = value(a)
    out = va.sum(axis=axis)
    if not isinstance(a, Var):
        return out

    def g_fn(g):
        if axis is None:
            return np.broadcast_to(g, va.shape).copy()
        return np.broadcast_to(np.expand_dims(g, axis), va.shape).copy()

    return _make(out, [(a, g_fn)], "sum")


def mean(a, axis=None):
    n = value(a).size if axis is None else value(a).shape[axis]
    return mul(sum(a, axis=axis), 1.0 / n)


def where(mask, a, b):
    """Select ``a`` where ``mask`` else ``b``; ``mask`` is constant data."""
    mask = np.asarray(mask, dtype=bool)
    va, vb = value(a), value(b)
    out = np.where(mask, va, vb)
    if not is_var(a, b):
        return out
    return _make(out, [(a, lambda g: _unbroadcast(np.where(mask, g, 0.0), va.shape)),
                       (b, lambda g: _unbroadcast(np.where(mask, 0.0, g), vb.shape))],
                 "where")


def clip(a, lo, hi):
    """Clamp to ``[lo, hi]``; zero derivative outside the interval."""
    va = value(a)
    out = np.clip(va, lo, hi)
    if not isinstance(a, Var):
        return out
    inside = (va >= lo) & (va <= hi)
    return _make(out, [(a, lambda g: g * inside)], "clip")


def minimum(a, c):
    """Elementwise minimum with a constant; derivative taken on the ``a`` side at ties."""
    va = value(a)
    out = np.minimum(va, c)
    if not isinstance(a, Var):
        return out
    keep = va <= c
    return _make(out, [(a, lambda g: g * keep)], "minimum")


def concat(xs, axis=-1):
    vals = [value(x) for x in xs]
    out = np.concatenate(vals, axis=axis)
    if not is_var(*xs):
        return out
    sizes = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def part(i):
        return lambda g: np.split(g, sizes, axis=axis)[i]

    return _make(out, [(x, part(i)) for i, x in enumerate(xs)], "concat")


def getitem(a, idx):
    va = value(a)
    out = va[idx]
    if not isinstance(a, Var):
        return out

    def g_fn(g):
        full = np.zeros_like(va)
        np.add.at(full, idx, g)
        return full

    return _make(out, [(a, g_fn)], "getitem")


def reshape(a, shape):
    va = value(a)
    out = va.reshape(shape)
    if not isinstance(a, Var):
        return out
    return _make(out, [(a, lambda g: g.reshape(va.shape))], "reshape")


def expand_last(a):
    """Append a unit axis so a per-row scalar broadcasts against (batch, d)."""
    return reshape(a, value(a).shape + (1,))


def broadcast_rows(a, n):
    """Tile a vector to ``(n, len(a))``."""
    va = value(a)
    out = np.broadcast_to(va, (n,) + va.shape).copy()
    if not isinstance(a, Var):
        return out
    return _make(out, [(a, lambda g: g.sum(axis=0))], "broadcast")


def stop_gradient(a):
    return value(a).copy()


# --- backward -----------------------------------------------------------------

def _toposort(root: Var):
    seen = set()
    order = []
    stack = [root]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        order.append(node)
        stack.extend(p for p, _ in node.parents)
    # creation order is a valid topological order for a tape
    order.sort(key=lambda n: n.order)
    return order


def backward(root: Var, seed=None):
    """Accumulate d root / d node into ``node.grad`` for every ancestor."""
    nodes = _toposort(root)
    for n in nodes:
        n.grad = None
    root.grad = np.ones_like(root.value) if seed is None else np.asarray(seed, dtype=np.float64)
    for node in reversed(nodes):
        g = node.grad
        if g is None:
            continue
        for parent, vjp in node.parents:
            contrib = vjp(g)
            parent.grad = contrib if parent.grad is None else parent.grad + contrib
    return root


def grad(fn, *args):
    """Gradient of scalar ``fn(*args)`` with respect to each array argument."""
    leaves = [Var(np.array(a, dtype=np.float64)) for a in args]
    out = fn(*leaves)
    if not isinstance(out, Var):
        return [np.zeros_like(leaf.value) for leaf in leaves]
    if out.value.size != 1:
        raise ValueError("grad needs a scalar output; got shape %s" % (out.value.shape,))
    backward(out)
    return [np.zeros_like(l.value) if l.grad is None else l.grad for l in leaves]


def value_and_grad(fn, params: dict):
    """Evaluate scalar ``fn(var_params)`` and return (value, grads by name)."""
    leaves = {k: Var(v) for k, v in params.items()}
    out = fn(leaves)
    backward(out)
    grads = {k: (np.zeros_like(l.value) if l.grad is None else l.grad) for k, l in leaves.items()}
    return float(out.value), grads


# --- parameters and Adam -------------------------------------------------------

class NonFiniteGradient(FloatingPointError):
    pass


@dataclass
class ParamStore:
    """Named parameter arrays with Adam moment state."""

    params: dict
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        self.params = {k: np.asarray(p, dtype=np.float64) for k, p in self.params.items()}
        for k, p in self.params.items():
            self.m.setdefault(k, np.zeros_like(p))
            self.v.setdefault(k, np.zeros_like(p))

    def __getitem__(self, name):
        return self.params[name]

    def names(self):
        return list(self.params)

    def snapshot(self) -> dict:
        return {k: p.copy() for k, p in self.params.items()}

    def adam_step(self, grads: dict, lr: float, frozen=()):
        """One Adam descent step. Non-finite gradients reject the step."""
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
        if bad:
            raise NonFiniteGradient("non-finite gradient in: " + ", ".join(sorted(bad)))
        self.step += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.step
        c2 = 1.0 - b2 ** self.step
        for k, g in grads.items():
            if k in frozen:
                continue
            if g.shape != self.params[k].shape:
                raise ValueError(f"gradient shape mismatch for {k}: {g.shape} vs {self.params[k].shape}")
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            mhat = self.m[k] / c1
            vhat = self.v[k] / c2
            self.params[k] = self.params[k] - lr * mhat / (np.sqrt(vhat) + self.eps)
        return self


def adam_step(store: ParamStore, grads: dict, lr: float) -> ParamStore:
    return store.adam_step(grads, lr)


def global_norm(grads: dict) -> float:
    return float(np.sqrt(_sum(float(np.sum(g * g)) for g in grads.values())))


def clip_by_global_norm(grads: dict, max_norm: float) -> dict:
    norm = global_norm(grads)
    if norm <= max_norm or norm == 0.0:
        return grads
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}
