"""Minimal reverse-mode automatic differentiation over numpy arrays.

Operations are recorded on a :class:`GradientTape` while it is active. Every
function in this module accepts plain arrays as well as :class:`Tensor`
objects; when no tape is recording (or no input requires a gradient) the
result is a plain ``numpy.ndarray`` so inference code pays no bookkeeping cost.

    >>> with GradientTape() as tape:
    ...     x = tape.variable(np.array(3.0))
    ...     y = x * x
    >>> float(tape.gradient(y, [x])[0])
    6.0
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from scipy import special

_ACTIVE: list["GradientTape"] = []


class Tensor:
    """A value recorded on a tape. ``vjp`` maps the output cotangent to a
    tuple of cotangents, one per parent."""

    __slots__ = ("value", "parents", "vjp", "requires_grad", "name")
    __array_ufunc__ = None  # make ndarray defer to our reflected operators

    def __init__(self, value, parents=(), vjp=None, requires_grad=False, name=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents
        self.vjp = vjp
        self.requires_grad = requires_grad
        self.name = name

    shape = property(lambda self: self.value.shape)
    ndim = property(lambda self: self.value.ndim)

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, name={self.name!r})"

    def __len__(self):
        return len(self.value)

    def __float__(self):
        return float(self.value)

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

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self):
        return swapaxes(self, -1, -2)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


class GradientTape:
    """Records operations on tensors and sweeps them in reverse once."""

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def variable(self, value, name=None) -> Tensor:
        return Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)

    def gradient(self, target, sources: Sequence[Tensor]) -> list[np.ndarray]:
        """Gradients of scalar ``target`` w.r.t. ``sources`` (zeros if unreached)."""
        if not isinstance(target, Tensor):
            return [np.zeros_like(s.value) for s in sources]
        grads: dict[int, np.ndarray] = {id(target): np.ones_like(target.value)}
        for node in reversed(self.nodes):
            g = grads.get(id(node))
            if g is None or node.vjp is None:
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                if pg is None or not isinstance(parent, Tensor) or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        return [grads.get(id(s), np.zeros_like(s.value)) for s in sources]


def recording() -> bool:
    return bool(_ACTIVE)


def value(x) -> np.ndarray:
    return x.value if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _needs_grad(*xs) -> bool:
    return bool(_ACTIVE) and any(isinstance(x, Tensor) and x.requires_grad for x in xs)


def _node(out, parents, vjp):
    """Wrap ``out`` as a recorded tensor if any parent needs a gradient."""
    if not _needs_grad(*parents):
        return out
    t = Tensor(out, parents, vjp, requires_grad=True)
    _ACTIVE[-1].nodes.append(t)
    return t


def unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum ``g`` down to ``shape`` undoing numpy broadcasting."""
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- arithmetic ---------------------------------------------------------------

def add(a, b):
    av, bv = value(a), value(b)
    return _node(av + bv, (a, b), lambda g: (unbroadcast(g, av.shape), unbroadcast(g, bv.shape)))


def sub(a, b):
    av, bv = value(a), value(b)
    return _node(av - bv, (a, b), lambda g: (unbroadcast(g, av.shape), unbroadcast(-g, bv.shape)))


def mul(a, b):
    av, bv = value(a), value(b)
    return _node(av * bv, (a, b),
                 lambda g: (unbroadcast(g * bv, av.shape), unbroadcast(g * av, bv.shape)))


def div(a, b):
    av, bv = value(a), value(b)
    out = av / bv
    return _node(out, (a, b),
                 lambda g: (unbroadcast(g / bv, av.shape), unbroadcast(-g * out / bv, bv.shape)))


def neg(a):
    return _node(-value(a), (a,), lambda g: (-g,))


def power(a, p: float):
    av = value(a)
    return _node(av ** p, (a,), lambda g: (g * p * av ** (p - 1),))


def matmul(a, b):
    av, bv = value(a), value(b)

    def vjp(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        gb = np.swapaxes(av, -1, -2) @ g
        return unbroadcast(ga, av.shape), unbroadcast(gb, bv.shape)

    return _node(av @ bv, (a, b), vjp)


# -- elementwise functions ----------------------------------------------------

def exp(a):
    out = np.exp(value(a))
    return _node(out, (a,), lambda g: (g * out,))


def log(a):
    av = value(a)
    return _node(np.log(av), (a,), lambda g: (g / av,))


def sqrt(a):
    out = np.sqrt(value(a))
    return _node(out, (a,), lambda g: (g * 0.5 / out,))


def sigmoid(a):
    out = special.expit(value(a))
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a):
    av = value(a)
    mask = av > 0
    return _node(np.where(mask, av, 0.0), (a,), lambda g: (g * mask,))


def softplus(a):
    av = value(a)
    return _node(np.logaddexp(0.0, av), (a,), lambda g: (g * special.expit(av),))


def abs_(a):
    av = value(a)
    return _node(np.abs(av), (a,), lambda g: (g * np.sign(av),))


def ndtr(a):
    """Standard normal CDF."""
    av = value(a)
    return _node(special.ndtr(av), (a,),
                 lambda g: (g * np.exp(-0.5 * av * av) / np.sqrt(2.0 * np.pi),))


def maximum(a, floor: float):
    """``max(a, floor)`` with a constant floor; no gradient where clamped."""
    av = value(a)
    mask = av >= floor
    return _node(np.where(mask, av, floor), (a,), lambda g: (g * mask,))


def clip(a, lo: float, hi: float):
    av = value(a)
    mask = (av >= lo) & (av <= hi)
    return _node(np.clip(av, lo, hi), (a,), lambda g: (g * mask,))


# -- shape manipulation -------------------------------------------------------

def sum_(a, axis=None, keepdims=False):
    av = value(a)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, av.shape).copy(),)

    return _node(av.sum(axis=axis, keepdims=keepdims), (a,), vjp)


def mean(a, axis=None, keepdims=False):
    av = value(a)
    n = av.size if axis is None else np.prod([av.shape[i] for i in np.atleast_1d(axis)])
    return sum_(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape):
    av = value(a)
    return _node(av.reshape(shape), (a,), lambda g: (g.reshape(av.shape),))


def swapaxes(a, i, j):
    return _node(np.swapaxes(value(a), i, j), (a,), lambda g: (np.swapaxes(g, i, j),))


def getitem(a, idx):
    av = value(a)

    def vjp(g):
        out = np.zeros_like(av)
        np.add.at(out, idx, g)
        return (out,)

    return _node(av[idx], (a,), vjp)


def concatenate(xs: Sequence, axis=-1):
    vals = [value(x) for x in xs]
    bounds = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _node(np.concatenate(vals, axis=axis), tuple(xs), vjp)


def stack(xs: Sequence, axis=-1):
    vals = [value(x) for x in xs]

    def vjp(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _node(np.stack(vals, axis=axis), tuple(xs), vjp)


def where(cond, a, b):
    cond = np.asarray(cond, dtype=bool)
    av, bv = value(a), value(b)
    return _node(np.where(cond, av, bv), (a, b),
                 lambda g: (unbroadcast(np.where(cond, g, 0.0), av.shape),
                            unbroadcast(np.where(cond, 0.0, g), bv.shape)))


def custom(out: np.ndarray, inputs: Sequence, vjp: Callable):
    """Record an externally computed op whose vector-Jacobian product is known."""
    return _node(out, tuple(inputs), vjp)
