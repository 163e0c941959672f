"""Reverse-mode automatic differentiation over numpy arrays.

Every node records its parents and a vector-Jacobian closure written in terms
of other ``Var`` operations.  Running the backward sweep with
``create_graph=True`` therefore records the gradient computation itself, and a
second sweep over that record yields exact second-order products such as
``J(theta)^T u`` without ever forming ``J``.

The tape is rebuilt for every evaluation point and is confined to the thread
that built it.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

from .errors import DimensionMismatch, NonFiniteValue

_state = threading.local()


def _recording() -> bool:
    return getattr(_state, "recording", True)


class _Recording:
    def __init__(self, on: bool):
        self.on = on

    def __enter__(self):
        self.prev = _recording()
        _state.recording = self.on

    def __exit__(self, *exc):
        _state.recording = self.prev


def no_grad():
    return _Recording(False)


class Var:
    """A node on the tape holding a float64 array value."""

    __slots__ = ("value", "parents", "vjp", "tracked")
    __array_ufunc__ = None

    def __init__(self, value, parents=(), vjp=None, tracked=False):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents
        self.vjp = vjp
        self.tracked = tracked

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __len__(self):
        return len(self.value)

    def __repr__(self):
        return f"Var({self.value!r})"

    # arithmetic
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
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return vsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None):
        return mean(self, axis=axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)


def variable(x) -> Var:
    """Leaf node that gradients are taken with respect to."""
    return Var(x, tracked=True)


def constant(x) -> Var:
    return Var(x)


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def _make(value, parents, vjp) -> Var:
    value = np.asarray(value, dtype=np.float64)
    if not np.isfinite(value).all():
        raise NonFiniteValue("non-finite value produced on the tape")
    if _recording() and any(p.tracked for p in parents):
        return Var(value, parents, vjp, tracked=True)
    return Var(value)


# --- broadcasting helpers ------------------------------------------------

def sum_to(x: Var, shape) -> Var:
    """Sum ``x`` down to ``shape`` (the adjoint of numpy broadcasting)."""
    shape = tuple(shape)
    if x.shape == shape:
        return x
    lead = x.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, n in enumerate(shape) if n == 1 and x.shape[i + lead] != 1
    )
    out = x.value.sum(axis=axes, keepdims=True)
    if lead:
        out = out.reshape(out.shape[lead:])
    src = x.shape
    return _make(out, (x,), lambda g: (broadcast_to(g, src),))


def broadcast_to(x: Var, shape) -> Var:
    shape = tuple(shape)
    if x.shape == shape:
        return x
    src = x.shape
    return _make(np.broadcast_to(x.value, shape), (x,), lambda g: (sum_to(g, src),))


# --- elementary operations -----------------------------------------------

def add(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    sa, sb = a.shape, b.shape
    return _make(a.value + b.value, (a, b), lambda g: (sum_to(g, sa), sum_to(g, sb)))


def sub(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    sa, sb = a.shape, b.shape
    return _make(a.value - b.value, (a, b), lambda g: (sum_to(g, sa), sum_to(neg(g), sb)))


def mul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    sa, sb = a.shape, b.shape
    return _make(
        a.value * b.value,
        (a, b),
        lambda g: (sum_to(mul(g, b), sa), sum_to(mul(g, a), sb)),
    )


def div(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    sa, sb = a.shape, b.shape

    def vjp(g):
        ga = div(g, b)
        return sum_to(ga, sa), sum_to(neg(mul(ga, div(a, b))), sb)

    return _make(a.value / b.value, (a, b), vjp)


def neg(a) -> Var:
    a = as_var(a)
    return _make(-a.value, (a,), lambda g: (neg(g),))


def power(a, p: float) -> Var:
    a = as_var(a)
    p = float(p)
    if p == 1.0:
        return a
    return _make(a.value**p, (a,), lambda g: (mul(g, mul(p, power(a, p - 1.0))),))


def exp(a) -> Var:
    a = as_var(a)
    out = _make(np.exp(a.value), (a,), None)
    if out.tracked:
        out.vjp = lambda g: (mul(g, out),)
    return out


def log(a) -> Var:
    a = as_var(a)
    return _make(np.log(a.value), (a,), lambda g: (div(g, a),))


def sqrt(a) -> Var:
    return power(a, 0.5)


def tanh(a) -> Var:
    a = as_var(a)
    out = _make(np.tanh(a.value), (a,), None)
    if out.tracked:
        out.vjp = lambda g: (mul(g, sub(1.0, mul(out, out))),)
    return out


def _sigmoid_np(x):
    # numerically stable for large |x|
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Var:
    a = as_var(a)
    out = _make(_sigmoid_np(np.atleast_1d(a.value)).reshape(a.shape), (a,), None)
    if out.tracked:
        out.vjp = lambda g: (mul(g, mul(out, sub(1.0, out))),)
    return out


def softplus(a) -> Var:
    """log(1 + exp(a)), evaluated without overflow."""
    a = as_var(a)
    v = np.logaddexp(0.0, a.value)
    return _make(v, (a,), lambda g: (mul(g, sigmoid(a)),))


def matmul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    if a.ndim != 2 or b.ndim not in (1, 2):
        raise DimensionMismatch("matmul supports (n,k)@(k,) and (n,k)@(k,m) only")

    def vjp(g):
        if b.ndim == 1:
            # g: (n,), out_i = sum_k a_ik b_k
            ga = mul(reshape(g, (-1, 1)), reshape(b, (1, -1)))
            gb = matmul(transpose(a), g)
            return ga, gb
        return matmul(g, transpose(b)), matmul(transpose(a), g)

    return _make(a.value @ b.value, (a, b), vjp)


def transpose(a) -> Var:
    a = as_var(a)
    return _make(a.value.T, (a,), lambda g: (transpose(g),))


def reshape(a, shape) -> Var:
    a = as_var(a)
    src = a.shape
    return _make(a.value.reshape(shape), (a,), lambda g: (reshape(g, src),))


def vsum(a, axis=None, keepdims=False) -> Var:
    a = as_var(a)
    src = a.shape
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            kshape = list(src)
            for ax in axes:
                kshape[ax % len(src)] = 1
            g = reshape(g, tuple(kshape))
        elif axis is None and not keepdims:
            g = reshape(g, (1,) * len(src))
        return (broadcast_to(g, src),)

    return _make(out, (a,), vjp)


def mean(a, axis=None) -> Var:
    a = as_var(a)
    n = a.value.size if axis is None else a.shape[axis]
    return mul(vsum(a, axis=axis), 1.0 / n)


def dot(a, b) -> Var:
    return vsum(mul(a, b))


def getitem(a, idx) -> Var:
    a = as_var(a)
    src = a.shape

    def vjp(g):
        return (scatter(g, idx, src),)

    return _make(a.value[idx], (a,), vjp)


def scatter(g, idx, shape) -> Var:
    """Place ``g`` into a zero array of ``shape`` at ``idx`` (adjoint of indexing)."""
    g = as_var(g)
    out = np.zeros(shape)
    np.add.at(out, idx, g.value)
    return _make(out, (g,), lambda h: (getitem(h, idx),))


def concatenate(parts: Sequence) -> Var:
    parts = [as_var(p) for p in parts]
    sizes = [p.shape[0] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(getitem(g, slice(int(bounds[i]), int(bounds[i + 1]))) for i in range(len(parts)))

    return _make(np.concatenate([p.value for p in parts]), tuple(parts), vjp)


def logsumexp(a, axis=None) -> Var:
    a = as_var(a)
    m = np.max(a.value, axis=axis, keepdims=True)
    shifted = sub(a, Var(m))
    s = vsum(exp(shifted), axis=axis)
    mm = m.sum(axis=axis) if axis is not None else m.reshape(())
    return add(log(s), Var(mm))


# --- backward sweep ------------------------------------------------------

def _toposort(root: Var):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen or not node.tracked:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.tracked and id(p) not in seen:
                stack.append((p, False))
    return order


def gradients(output: Var, inputs: Sequence[Var], grad_output=None, create_graph=False):
    """Gradients of ``output`` w.r.t. ``inputs`` as ``Var`` nodes.

    With ``create_graph=True`` the returned nodes are themselves on the tape
    and can be differentiated again.
    """
    if grad_output is None:
        if output.value.size != 1:
            raise DimensionMismatch("grad_output required for non-scalar output")
        grad_output = np.ones_like(output.value)
    seed = as_var(grad_output)
    if seed.shape != output.shape:
        raise DimensionMismatch(f"grad_output shape {seed.shape} != output shape {output.shape}")
    grads = {id(output): seed}
    with _Recording(create_graph):
        for node in reversed(_toposort(output)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.vjp is None:
                grads[id(node)] = g
                continue
            for p, pg in zip(node.parents, node.vjp(g)):
                if pg is None or not p.tracked:
                    continue
                prev = grads.get(id(p))
                grads[id(p)] = pg if prev is None else add(prev, pg)
    out = []
    for x in inputs:
        g = grads.get(id(x))
        out.append(Var(np.zeros_like(x.value)) if g is None else g)
    return out


# --- public operations ---------------------------------------------------

ScalarFn = Callable[[Var], Var]
VectorField = Callable[[Var], Var]


def _check_finite(arr, what):
    if not np.isfinite(arr).all():
        raise NonFiniteValue(f"non-finite {what}")
    return arr


def value_and_grad(fn: ScalarFn, theta):
    x = variable(np.array(theta, dtype=np.float64))
    y = fn(x)
    (g,) = gradients(y, [x])
    return float(y.value), _check_finite(g.value.copy(), "gradient")


def grad(fn: ScalarFn, theta) -> np.ndarray:
    """Gradient of a scalar program at ``theta``."""
    return value_and_grad(fn, theta)[1]


def vjp_of_vector_field(field: VectorField, theta, u) -> np.ndarray:
    """``J(theta)^T u`` for ``J = d field / d theta``, via grad of <field, u>."""
    x = variable(np.array(theta, dtype=np.float64))
    v = field(x)
    u = np.asarray(u, dtype=np.float64)
    if u.shape != v.shape:
        raise DimensionMismatch(f"u has shape {u.shape}, field has shape {v.shape}")
    (g,) = gradients(v, [x], grad_output=u)
    return _check_finite(g.value.copy(), "vector-Jacobian product")


def jvp_of_vector_field(field: VectorField, theta, w) -> np.ndarray:
    """``J(theta) w`` using two reverse sweeps (the transpose of a VJP is linear in its seed)."""
    x = variable(np.array(theta, dtype=np.float64))
    v = field(x)
    w = np.asarray(w, dtype=np.float64)
    if w.shape != x.shape:
        raise DimensionMismatch(f"w has shape {w.shape}, theta has shape {x.shape}")
    r = variable(np.zeros_like(v.value))
    (jt_r,) = gradients(v, [x], grad_output=r, create_graph=True)
    (jw,) = gradients(dot(jt_r, Var(w)), [r])
    return _check_finite(jw.value.copy(), "Jacobian-vector product")


def fd_jacobian_tvp(field: VectorField, theta, u, h: float = 1e-5) -> np.ndarray:
    """Central-difference estimate of ``J^T u``; one pair of evaluations per coordinate."""
    if h <= 0:
        raise ValueError("step must be positive")
    theta = np.array(theta, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)

    def evaluate(t):
        # the field may itself take gradients, so evaluate on a live tape
        return field(variable(t)).value

    v0 = evaluate(theta)
    if u.shape != v0.shape:
        raise DimensionMismatch(f"u has shape {u.shape}, field has shape {v0.shape}")
    out = np.empty_like(theta)
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = h
        out[i] = (np.dot(evaluate(theta + e), u) - np.dot(evaluate(theta - e), u)) / (2 * h)
    return out


def fd_grad(fn: ScalarFn, theta, h: float = 1e-5) -> np.ndarray:
    theta = np.array(theta, dtype=np.float64)

    def evaluate(t):
        return float(fn(variable(t)).value)

    out = np.empty_like(theta)
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = h
        out[i] = (evaluate(theta + e) - evaluate(theta - e)) / (2 * h)
    return out
