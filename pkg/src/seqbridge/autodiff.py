"""Minimal reverse-mode automatic differentiation over numpy arrays.

Loss functions in this package are built from the small op set below.
Each op accepts plain ndarrays or :class:`Var` nodes; mixing them is
fine, and a call with no ``Var`` argument falls through to numpy, so
the same forward code serves both training (taped) and fast inference
(untaped) paths.

``grad_of`` runs one backward pass from a scalar loss node; collected
gradients are exact reverse-mode derivatives.  ``finite_difference_grad``
is the independent central-difference oracle used to validate them.
"""

from __future__ import annotations

import numpy as np

from .errors import NumericalError

__all__ = [
    "Var",
    "add", "sub", "mul", "neg", "matmul", "vsum", "vmean",
    "exp", "log", "absolute", "clamp_min", "softplus",
    "log_softmax", "softmax", "sigmoid_np",
    "value_of", "grad_of", "finite_difference_grad",
]


class Var:
    """A node in the tape: a value plus how to push gradients back."""

    __slots__ = ("value", "parents", "vjps", "grad")

    def __init__(self, value, parents=(), vjps=()):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents
        self.vjps = vjps
        self.grad = None


def value_of(x):
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def _is_var(*xs):
    return any(isinstance(x, Var) for x in xs)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _node(value, pairs):
    parents = tuple(p for p, _ in pairs if isinstance(p, Var))
    vjps = tuple(v for p, v in pairs if isinstance(p, Var))
    return Var(value, parents, vjps)


def add(a, b):
    av, bv = value_of(a), value_of(b)
    out = av + bv
    if not _is_var(a, b):
        return out
    return _node(out, [(a, lambda g: _unbroadcast(g, av.shape)),
                       (b, lambda g: _unbroadcast(g, bv.shape))])


def sub(a, b):
    return add(a, neg(b))


def neg(a):
    if not _is_var(a):
        return -value_of(a)
    return _node(-a.value, [(a, lambda g: -g)])


def mul(a, b):
    av, bv = value_of(a), value_of(b)
    out = av * bv
    if not _is_var(a, b):
        return out
    return _node(out, [(a, lambda g: _unbroadcast(g * bv, av.shape)),
                       (b, lambda g: _unbroadcast(g * av, bv.shape))])


def matmul(a, b):
    av, bv = value_of(a), value_of(b)
    out = av @ bv
    if not _is_var(a, b):
        return out

    def da(g):
        ga = g @ np.swapaxes(bv, -1, -2) if bv.ndim > 1 else np.outer(g, bv)
        return _unbroadcast(ga, av.shape)

    def db(g):
        gb = np.swapaxes(av, -1, -2) @ g if av.ndim > 1 else np.outer(av, g)
        return _unbroadcast(gb, bv.shape)

    return _node(out, [(a, da), (b, db)])


def vsum(a, axis=None, keepdims=False):
    av = value_of(a)
    out = av.sum(axis=axis, keepdims=keepdims)
    if not _is_var(a):
        return out

    def back(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, av.shape).copy()

    return _node(out, [(a, back)])


def vmean(a, axis=None):
    av = value_of(a)
    n = av.size if axis is None else av.shape[axis]
    return mul(vsum(a, axis=axis), 1.0 / n)


def exp(a):
    av = value_of(a)
    out = np.exp(av)
    if not _is_var(a):
        return out
    return _node(out, [(a, lambda g: g * out)])


def log(a):
    av = value_of(a)
    out = np.log(av)
    if not _is_var(a):
        return out
    return _node(out, [(a, lambda g: g / av)])


def absolute(a):
    av = value_of(a)
    out = np.abs(av)
    if not _is_var(a):
        return out
    sign = np.sign(av)
    return _node(out, [(a, lambda g: g * sign)])


def clamp_min(a, floor: float):
    """max(a, floor); gradient flows only where a exceeds the floor."""
    av = value_of(a)
    out = np.maximum(av, floor)
    if not _is_var(a):
        return out
    mask = (av > floor).astype(np.float64)
    return _node(out, [(a, lambda g: g * mask)])


def sigmoid_np(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(a):
    """log(1 + exp(a)), numerically stable; gradient is sigmoid(a)."""
    av = value_of(a)
    out = np.logaddexp(0.0, av)
    if not _is_var(a):
        return out
    sig = sigmoid_np(av)
    return _node(out, [(a, lambda g: g * sig)])


def log_softmax(a, axis=-1):
    """Row-wise log-softmax with a detached max shift (exact gradient)."""
    shift = sub(a, value_of(a).max(axis=axis, keepdims=True))
    return sub(shift, log(vsum(exp(shift), axis=axis, keepdims=True)))


def softmax(a, axis=-1):
    return exp(log_softmax(a, axis=axis))


def grad_of(loss: Var, leaves: dict) -> dict:
    """Backward pass from a scalar loss; returns gradients per leaf name.

    ``leaves`` maps names to the Var nodes created for the parameters.
    Leaves that do not influence the loss get zero gradients.
    """
    if not isinstance(loss, Var):
        raise NumericalError("loss does not depend on any parameter")
    lval = loss.value
    if lval.shape != ():
        raise NumericalError(f"loss must be scalar, got shape {lval.shape}")
    if not np.isfinite(lval):
        raise NumericalError(f"non-finite loss value {lval}")

    order: list[Var] = []
    seen: set[int] = set()
    stack: list[tuple[Var, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))

    loss.grad = np.ones((), dtype=np.float64)
    for node in reversed(order):
        if node.grad is None:
            continue
        for parent, vjp in zip(node.parents, node.vjps):
            g = vjp(node.grad)
            if parent.grad is None:
                parent.grad = np.zeros_like(parent.value)
            parent.grad = parent.grad + g

    out = {}
    for name, leaf in leaves.items():
        g = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value)
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for '{name}'")
        out[name] = np.asarray(g, dtype=np.float64)
    return out


def finite_difference_grad(loss_fn, arrays: dict, h: float = 1e-4) -> dict:
    """Central finite differences of ``loss_fn(arrays)`` per array entry.

    The independent oracle for gradient checks: evaluates the loss at
    2 * total-entry-count perturbed points and never touches the tape.
    """
    grads = {}
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype=np.float64)
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            hi = float(loss_fn(arrays))
            flat[i] = orig - h
            lo = float(loss_fn(arrays))
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * h)
        grads[name] = g
    return grads
