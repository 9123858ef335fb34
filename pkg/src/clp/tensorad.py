"""Dense reverse-mode automatic differentiation with higher-order support.

Values are float64 numpy arrays. Every vector-Jacobian product is written in
terms of the same primitives it differentiates, so ``backward(...,
create_graph=True)`` returns gradients that can themselves be differentiated
(gradient of a gradient, and through an optimizer step).

Broadcasting is deliberately restricted: elementwise operands must have equal
shapes, or one of them must be a scalar (shape ``()``). Use ``expand`` and
``sum`` to move between a vector and the rows/columns of a matrix.

Example:
    >>> x = leaf([1.0, 2.0, 3.0])
    >>> (gx,) = backward(sum_(square(x)), [x])
    >>> gx.value
    array([2., 4., 6.])
"""

from __future__ import annotations

import contextlib
import itertools

import numpy as np

from .errors import ConformanceError, ContractError, DomainError, NumericError

_next_id = itertools.count()
_grad_enabled = True


@contextlib.contextmanager
def grad_mode(enabled):
    """Temporarily switch graph recording on or off."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = bool(enabled)
    try:
        yield
    finally:
        _grad_enabled = prev


def no_grad():
    return grad_mode(False)


def as_tensor(value, name="value"):
    """Convert ``value`` to a finite float64 array (the engine's Tensor)."""
    arr = np.asarray(value, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite entries in {name}")
    return arr


class Node:
    """A value in the computation graph together with how it was produced.

    Nodes are immutable once created: ``value`` is never written in place and
    ``parents`` always point to older nodes, so the graph is acyclic.
    """

    __slots__ = ("id", "value", "op", "parents", "requires_grad", "grad", "_vjp")
    __array_priority__ = 1000

    def __init__(self, value, requires_grad=False, op="leaf", parents=(), vjp=None):
        self.id = next(_next_id)
        self.value = value
        self.op = op
        self.parents = tuple(parents)
        self.requires_grad = requires_grad
        self.grad = None
        self._vjp = vjp

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def size(self):
        return self.value.size

    def item(self):
        return float(self.value)

    def numpy(self):
        return self.value

    def __repr__(self):
        return f"Node(op={self.op}, shape={self.shape}, requires_grad={self.requires_grad})"

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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    @property
    def T(self):
        return transpose(self)


def constant(value):
    """Wrap ``value`` as a node that never receives gradients."""
    if isinstance(value, Node):
        return value
    return Node(as_tensor(value), requires_grad=False, op="const")


def leaf(value):
    """Create a differentiable input node."""
    return Node(as_tensor(value), requires_grad=True, op="leaf")


def detach(node):
    return Node(node.value, requires_grad=False, op="const")


def _wrap(x):
    return x if isinstance(x, Node) else constant(x)


def _make(op, value, parents, vjp):
    if not np.all(np.isfinite(value)):
        raise NumericError(f"{op} produced a non-finite value")
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Node(value, True, op, parents, vjp)
    return Node(value, False, op)


def _check_elementwise(op, a, b):
    if a.shape != b.shape and a.shape != () and b.shape != ():
        raise ConformanceError(f"{op}: shapes {a.shape} and {b.shape} do not conform")


def _unbroadcast(g, shape):
    # only scalar broadcasting exists, so reducing means a full sum
    if shape == () and g.shape != ():
        return sum_(g)
    return g


# ----------------------------------------------------------------- primitives


def add(a, b):
    a, b = _wrap(a), _wrap(b)
    _check_elementwise("add", a, b)

    def vjp(g, needs):
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(g, b.shape) if needs[1] else None)

    return _make("add", a.value + b.value, (a, b), vjp)


def sub(a, b):
    a, b = _wrap(a), _wrap(b)
    _check_elementwise("sub", a, b)

    def vjp(g, needs):
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(scale(g, -1.0), b.shape) if needs[1] else None)

    return _make("sub", a.value - b.value, (a, b), vjp)


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    _check_elementwise("mul", a, b)

    def vjp(g, needs):
        return (_unbroadcast(mul(g, b), a.shape) if needs[0] else None,
                _unbroadcast(mul(g, a), b.shape) if needs[1] else None)

    return _make("mul", a.value * b.value, (a, b), vjp)


def div(a, b):
    a, b = _wrap(a), _wrap(b)
    _check_elementwise("div", a, b)
    if np.any(b.value == 0):
        raise DomainError("div: division by zero")

    def vjp(g, needs):
        ga = _unbroadcast(div(g, b), a.shape) if needs[0] else None
        gb = None
        if needs[1]:
            gb = _unbroadcast(scale(div(mul(g, out), b), -1.0), b.shape)
        return ga, gb

    out = _make("div", a.value / b.value, (a, b), vjp)
    return out


def matmul(a, b):
    a, b = _wrap(a), _wrap(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ConformanceError(f"matmul: shapes {a.shape} and {b.shape} do not conform")

    def vjp(g, needs):
        return (matmul(g, transpose(b)) if needs[0] else None,
                matmul(transpose(a), g) if needs[1] else None)

    return _make("matmul", a.value @ b.value, (a, b), vjp)


def relu(x):
    x = _wrap(x)
    gate = (x.value > 0).astype(np.float64)

    def vjp(g, needs):
        return (mul(g, constant(gate)),)

    return _make("relu", x.value * gate, (x,), vjp)


def tanh(x):
    x = _wrap(x)

    def vjp(g, needs):
        return (mul(g, sub(1.0, square(out))),)

    out = _make("tanh", np.tanh(x.value), (x,), vjp)
    return out


def exp(x):
    x = _wrap(x)

    def vjp(g, needs):
        return (mul(g, out),)

    with np.errstate(over="ignore"):
        val = np.exp(x.value)
    out = _make("exp", val, (x,), vjp)
    return out


def log(x):
    x = _wrap(x)
    if np.any(x.value <= 0):
        raise DomainError("log: input must be strictly positive")

    def vjp(g, needs):
        return (div(g, x),)

    return _make("log", np.log(x.value), (x,), vjp)


def sqrt(x):
    x = _wrap(x)
    if np.any(x.value < 0):
        raise DomainError("sqrt: input must be non-negative")

    def vjp(g, needs):
        return (div(g, scale(out, 2.0)),)

    out = _make("sqrt", np.sqrt(x.value), (x,), vjp)
    return out


def square(x):
    x = _wrap(x)

    def vjp(g, needs):
        return (mul(g, scale(x, 2.0)),)

    return _make("square", x.value * x.value, (x,), vjp)


def scale(x, c):
    """Multiply by a Python constant ``c``."""
    x = _wrap(x)
    c = float(c)

    def vjp(g, needs):
        return (scale(g, c),)

    return _make("scale", x.value * c, (x,), vjp)


def clamp(x, lo=-np.inf, hi=np.inf):
    """Clip to ``[lo, hi]``; the gradient is 1 inside the interval, 0 outside."""
    x = _wrap(x)
    inside = ((x.value >= lo) & (x.value <= hi)).astype(np.float64)

    def vjp(g, needs):
        return (mul(g, constant(inside)),)

    return _make("clamp", np.clip(x.value, lo, hi), (x,), vjp)


def sign(x):
    """Forward-only sign; treated as a constant direction (zero gradient)."""
    return constant(np.sign(_wrap(x).value))


def sum_(x, axis=None):
    x = _wrap(x)
    if axis is None:
        def vjp(g, needs):
            return (mul(constant(np.ones(x.shape)), g),)

        return _make("sum", np.asarray(x.value.sum()), (x,), vjp)
    axis = _norm_axis(axis, x.ndim)
    n = x.shape[axis]

    def vjp_axis(g, needs):
        return (expand(g, axis, n),)

    return _make("sum", x.value.sum(axis=axis), (x,), vjp_axis)


def mean(x, axis=None):
    x = _wrap(x)
    n = x.size if axis is None else x.shape[_norm_axis(axis, x.ndim)]
    if n == 0:
        raise ConformanceError("mean over an empty axis")
    return scale(sum_(x, axis), 1.0 / n)


def expand(x, axis, n):
    """Insert a new axis at ``axis`` and repeat ``x`` ``n`` times along it."""
    x = _wrap(x)
    axis = _norm_axis(axis, x.ndim + 1)
    val = np.repeat(np.expand_dims(x.value, axis), n, axis=axis)

    def vjp(g, needs):
        return (sum_(g, axis),)

    return _make("expand", val, (x,), vjp)


def row_gather(x, idx):
    """Pick ``x[i, idx[i]]`` for every row ``i``."""
    x = _wrap(x)
    idx = np.asarray(idx, dtype=np.int64)
    if x.ndim != 2 or idx.shape != (x.shape[0],):
        raise ConformanceError(f"row_gather: bad shapes {x.shape} / {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[1]):
        raise ConformanceError("row_gather: index out of range")
    ncols = x.shape[1]
    rows = np.arange(x.shape[0])

    def vjp(g, needs):
        return (row_scatter(g, idx, ncols),)

    return _make("row_gather", x.value[rows, idx], (x,), vjp)


def row_scatter(g, idx, ncols):
    """Inverse of :func:`row_gather`: place ``g[i]`` at column ``idx[i]`` of a zero matrix."""
    g = _wrap(g)
    idx = np.asarray(idx, dtype=np.int64)
    if g.ndim != 1 or idx.shape != g.shape:
        raise ConformanceError("row_scatter: bad shapes")
    val = np.zeros((g.shape[0], ncols))
    val[np.arange(g.shape[0]), idx] = g.value

    def vjp(h, needs):
        return (row_gather(h, idx),)

    return _make("row_scatter", val, (g,), vjp)


def reshape(x, shape):
    x = _wrap(x)
    shape = tuple(shape)
    old = x.shape
    try:
        val = x.value.reshape(shape)
    except ValueError as exc:
        raise ConformanceError(str(exc)) from None

    def vjp(g, needs):
        return (reshape(g, old),)

    return _make("reshape", val, (x,), vjp)


def transpose(x):
    x = _wrap(x)
    if x.ndim != 2:
        raise ConformanceError("transpose expects a matrix")

    def vjp(g, needs):
        return (transpose(g),)

    return _make("transpose", x.value.T, (x,), vjp)


def slice_(x, start, stop):
    """Contiguous slice of a vector."""
    x = _wrap(x)
    if x.ndim != 1 or not 0 <= start <= stop <= x.shape[0]:
        raise ConformanceError("slice: bad bounds")
    total = x.shape[0]

    def vjp(g, needs):
        return (pad(g, start, total),)

    return _make("slice", x.value[start:stop], (x,), vjp)


def pad(x, start, total):
    """Embed a vector into zeros of length ``total`` beginning at ``start``."""
    x = _wrap(x)
    if x.ndim != 1 or start + x.shape[0] > total:
        raise ConformanceError("pad: bad bounds")
    val = np.zeros(total)
    val[start:start + x.shape[0]] = x.value
    stop = start + x.shape[0]

    def vjp(g, needs):
        return (slice_(g, start, stop),)

    return _make("pad", val, (x,), vjp)


def _norm_axis(axis, ndim):
    if not -ndim <= axis < ndim:
        raise ConformanceError(f"axis {axis} out of range for ndim {ndim}")
    return axis % ndim


_PRIMITIVES = {
    "add": add, "sub": sub, "mul": mul, "div": div, "matmul": matmul,
    "relu": relu, "tanh": tanh, "exp": exp, "log": log, "sum": sum_,
    "mean": mean, "row_gather": row_gather, "row_scatter": row_scatter,
    "clamp": clamp, "scale": scale, "square": square, "sqrt": sqrt,
    "expand": expand, "reshape": reshape, "transpose": transpose,
    "slice": slice_, "pad": pad, "sign": sign,
}


def apply_primitive(op_kind, inputs, **attrs):
    """Apply the primitive named ``op_kind`` to a list of input nodes."""
    try:
        fn = _PRIMITIVES[op_kind]
    except KeyError:
        raise ContractError(f"unknown primitive {op_kind!r}") from None
    return fn(*inputs, **attrs)


# ----------------------------------------------------------------- composites


def log_softmax(z):
    """Row-wise log-softmax of a vector or a batch of vectors (max-shifted)."""
    z = _wrap(z)
    if z.ndim not in (1, 2) or z.shape[-1] < 2:
        raise ConformanceError(f"softmax needs at least 2 classes, got shape {z.shape}")
    # the shift is a constant: log-softmax is invariant to it
    m = z.value.max(axis=-1, keepdims=True)
    shifted = sub(z, constant(np.broadcast_to(m, z.shape).copy()))
    lse = log(sum_(exp(shifted), axis=-1))
    if z.ndim == 1:
        return sub(shifted, lse)
    return sub(shifted, expand(lse, 1, z.shape[1]))


def softmax(z):
    return exp(log_softmax(z))


# ------------------------------------------------------------------- backward


def _topo_order(root):
    order, seen = [], {root.id}
    stack = [(root, iter(root.parents))]
    while stack:
        node, it = stack[-1]
        for p in it:
            if p.requires_grad and p.id not in seen:
                seen.add(p.id)
                stack.append((p, iter(p.parents)))
                break
        else:
            stack.pop()
            order.append(node)
    return order


def backward(root, wrt, create_graph=False):
    """Gradients of the scalar ``root`` with respect to each node in ``wrt``.

    With ``create_graph`` the returned gradients are graph-connected nodes that
    can be differentiated again. Nodes of ``wrt`` that ``root`` does not depend
    on get a zero gradient of matching shape.
    """
    if root.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    wrt = list(wrt)
    wrt_ids = {w.id for w in wrt}
    results = {}
    if root.requires_grad or root.id in wrt_ids:
        order = _topo_order(root)
        relevant = {}
        for n in order:
            relevant[n.id] = n.id in wrt_ids or any(
                relevant.get(p.id, False) for p in n.parents)
        grads = {root.id: constant(np.ones(root.shape))}
        with grad_mode(create_graph):
            for n in reversed(order):
                g = grads.pop(n.id, None)
                if g is None:
                    continue
                if n.id in wrt_ids:
                    results[n.id] = g
                if n._vjp is None:
                    continue
                needs = tuple(p.requires_grad and relevant.get(p.id, False)
                              for p in n.parents)
                if not any(needs):
                    continue
                for p, pg, need in zip(n.parents, n._vjp(g, needs), needs):
                    if not need or pg is None:
                        continue
                    prev = grads.get(p.id)
                    grads[p.id] = pg if prev is None else add(prev, pg)
    out = []
    for w in wrt:
        g = results.get(w.id)
        if g is None:
            g = constant(np.zeros(w.shape))
        elif not create_graph and g.requires_grad:
            g = detach(g)
        w.grad = g
        out.append(g)
    return out


grad = backward


def finite_diff_check(f, x, h=1e-5):
    """Largest relative gap between ``backward`` and central differences.

    ``f`` maps a node to a scalar node. The error per coordinate is
    ``|analytic - numeric| / max(1, |analytic|)``.
    """
    if h <= 0:
        raise ContractError("step size must be positive")
    x = as_tensor(x, "x").copy()
    xn = leaf(x)
    y = f(xn)
    if not np.isfinite(y.value).all():
        raise NumericError("f returned a non-finite value")
    (g,) = backward(y, [xn])
    analytic = g.value
    numeric = np.empty_like(x)
    flat = x.reshape(-1)
    out = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(leaf(x)).value)
        flat[i] = orig - h
        fm = float(f(leaf(x)).value)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError("f returned a non-finite value")
        out[i] = (fp - fm) / (2 * h)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(err.max()) if err.size else 0.0
