"""Minimal tape-based reverse-mode automatic differentiation on numpy arrays.

Supports exactly the operations the surrogate networks need: dense affine
layers, the ELU/GELU/sigmoid activations and their first derivatives as
primitives (so Jacobian-vector products through a network are themselves
differentiable), the signed square-root power transform, log-cosh and mean
square losses. Gradients are exact reverse-mode; every primitive's
vector-Jacobian product is closed form.
"""

from __future__ import annotations

import math

import numpy as np

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
_GELU_C = 0.044715


class Var:
    """A node in the computation graph."""

    __slots__ = ("value", "grad", "parents", "vjp")

    def __init__(self, value, parents=(), vjp=None):
        self.value = np.asarray(value, dtype=float)
        self.grad = None
        self.parents = parents
        self.vjp = vjp

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={self.value.shape})"


def constant(value) -> Var:
    return Var(value)


def _unbroadcast(grad, shape):
    """Sum gradient over axes that were broadcast in the forward op."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def add(a: Var, b: Var) -> Var:
    out = Var(a.value + b.value, (a, b),
              lambda g: (_unbroadcast(g, a.value.shape), _unbroadcast(g, b.value.shape)))
    return out


def sub(a: Var, b: Var) -> Var:
    return Var(a.value - b.value, (a, b),
               lambda g: (_unbroadcast(g, a.value.shape), _unbroadcast(-g, b.value.shape)))


def mul(a: Var, b: Var) -> Var:
    return Var(a.value * b.value, (a, b),
               lambda g: (_unbroadcast(g * b.value, a.value.shape),
                          _unbroadcast(g * a.value, b.value.shape)))


def scale(a: Var, c) -> Var:
    """a * c with c a constant scalar or array (no gradient through c)."""
    c = np.asarray(c, dtype=float)
    return Var(a.value * c, (a,), lambda g: (_unbroadcast(g * c, a.value.shape),))


def shift(a: Var, c) -> Var:
    """a + c with constant c."""
    c = np.asarray(c, dtype=float)
    return Var(a.value + c, (a,), lambda g: (_unbroadcast(g, a.value.shape),))


def matmul(a: Var, b: Var) -> Var:
    av, bv = a.value, b.value

    def vjp(g):
        ga = g @ bv.swapaxes(-1, -2)
        gb = av.swapaxes(-1, -2) @ g
        return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)

    return Var(av @ bv, (a, b), vjp)


def concat(vars_: list[Var], axis: int = -1) -> Var:
    values = [v.value for v in vars_]
    sizes = [v.shape[axis] for v in values]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return Var(np.concatenate(values, axis=axis), tuple(vars_), vjp)


def getcols(a: Var, start: int, stop: int) -> Var:
    def vjp(g):
        out = np.zeros_like(a.value)
        out[..., start:stop] = g
        return (out,)

    return Var(a.value[..., start:stop], (a,), vjp)


def square(a: Var) -> Var:
    return Var(a.value ** 2, (a,), lambda g: (2.0 * a.value * g,))


def mean_all(a: Var) -> Var:
    n = a.value.size
    return Var(a.value.mean(), (a,), lambda g: (np.full_like(a.value, float(g) / n),))


def sum_all(a: Var) -> Var:
    return Var(a.value.sum(), (a,), lambda g: (np.full_like(a.value, float(g)),))


# ---------------------------------------------------------------------------
# activations (values and first derivatives as primitives)
# ---------------------------------------------------------------------------

def _elu(x):
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))


def _elu_p(x):
    return np.where(x > 0, 1.0, np.exp(np.minimum(x, 0.0)))


def elu(a: Var) -> Var:
    return Var(_elu(a.value), (a,), lambda g: (g * _elu_p(a.value),))


def elu_prime(a: Var) -> Var:
    """ELU'(x) as a differentiable node (ELU'' = exp(x) for x < 0)."""
    x = a.value
    second = np.where(x > 0, 0.0, np.exp(np.minimum(x, 0.0)))
    return Var(_elu_p(x), (a,), lambda g: (g * second,))


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Var) -> Var:
    s = _sigmoid(a.value)
    return Var(s, (a,), lambda g: (g * s * (1.0 - s),))


def sigmoid_prime(a: Var) -> Var:
    """sigmoid'(x) as a differentiable node; d/dx = s(1-s)(1-2s)."""
    s = _sigmoid(a.value)
    return Var(s * (1.0 - s), (a,), lambda g: (g * s * (1.0 - s) * (1.0 - 2.0 * s),))


def _gelu_parts(x):
    u = _SQRT_2_OVER_PI * (x + _GELU_C * x ** 3)
    t = np.tanh(u)
    return u, t


def _gelu(x):
    _, t = _gelu_parts(x)
    return 0.5 * x * (1.0 + t)


def _gelu_p(x):
    u, t = _gelu_parts(x)
    du = _SQRT_2_OVER_PI * (1.0 + 3.0 * _GELU_C * x ** 2)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * du


def gelu(a: Var) -> Var:
    """GELU in its tanh form."""
    return Var(_gelu(a.value), (a,), lambda g: (g * _gelu_p(a.value),))


def tanh(a: Var) -> Var:
    t = np.tanh(a.value)
    return Var(t, (a,), lambda g: (g * (1.0 - t ** 2),))


# ---------------------------------------------------------------------------
# transforms and losses
# ---------------------------------------------------------------------------

def trans(a: Var, offset: float = 1e-4) -> Var:
    """Signed square-root power transform, d/dx = 0.5 / sqrt(|x + c|)."""
    shifted = a.value + offset
    root = np.sqrt(np.abs(shifted))
    val = np.sign(shifted) * root

    def vjp(g):
        return (g * 0.5 / np.maximum(root, 1e-12),)

    return Var(val, (a,), vjp)


def trans_inverse(a: Var, offset: float = 1e-4) -> Var:
    """Inverse power transform x = sign(y) y^2 - c, d/dy = 2|y|."""
    y = a.value
    return Var(np.sign(y) * y * y - offset, (a,), lambda g: (g * 2.0 * np.abs(y),))


def log_cosh(a: Var) -> Var:
    """Elementwise log(cosh(x)), numerically stable; derivative tanh(x)."""
    x = a.value
    val = np.abs(x) + np.log1p(np.exp(-2.0 * np.abs(x))) - math.log(2.0)
    return Var(val, (a,), lambda g: (g * np.tanh(x),))


def logcosh_mean(residual: Var) -> Var:
    """sum log cosh(r_i) / count, the balanced multiscale loss."""
    return mean_all(log_cosh(residual))


def mse(residual: Var) -> Var:
    return mean_all(square(residual))


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def backward(root: Var):
    """Accumulate gradients of the scalar ``root`` into ``.grad`` of every
    reachable node."""
    if root.value.ndim != 0:
        raise ValueError("backward() expects a scalar loss")
    order: list[Var] = []
    seen: set[int] = set()
    stack: list[tuple[Var, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))

    root.grad = np.ones(())
    for node in reversed(order):
        if node.vjp is None or node.grad is None:
            continue
        grads = node.vjp(node.grad)
        for parent, g in zip(node.parents, grads):
            if g is None:
                continue
            if parent.grad is None:
                parent.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g)
            else:
                parent.grad = parent.grad + g


def zero_grads(vars_: list[Var]):
    for v in vars_:
        v.grad = None
