"""A small reverse-mode automatic differentiation engine on top of numpy.

A :class:`Tensor` wraps a float64 array and remembers the operation that
produced it. Calling :meth:`Tensor.backward` on a scalar walks the graph in
reverse topological order and accumulates gradients into ``.grad``.

Only the operations the networks and losses need are provided. Index
arguments (``gather_rows``) are constants: no gradient flows through them.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ShapeMismatch


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")
    __array_ufunc__ = None  # make numpy defer to our reflected operators

    def __init__(self, data, requires_grad=False, _parents=(), op="", name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = None
        self.op = op
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __len__(self):
        return self.data.shape[0]

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, op={self.op or 'leaf'})"

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        """Backpropagate from this tensor (a scalar unless ``grad`` is given)."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeMismatch("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                if node.requires_grad:
                    node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # arithmetic -------------------------------------------------------
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
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return index(self, key)

    @property
    def T(self):
        return transpose(self)


def _topological_order(root):
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def tensor(data, requires_grad=False, name=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def values(x):
    """The numpy payload of a Tensor; other inputs pass through."""
    return x.data if isinstance(x, Tensor) else x


def _make(data, parents, backward, op):
    req = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=req, _parents=parents if req else (), op=op)
    if req:
        out._backward = backward
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


# elementwise --------------------------------------------------------------
def _operands(a, b, op):
    a, b = as_tensor(a), as_tensor(b)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None
    return a, b


def add(a, b) -> Tensor:
    a, b = _operands(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _operands(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _operands(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0  # subgradient 0 at the kink
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def activation(name):
    try:
        return {"relu": relu, "tanh": tanh}[name]
    except KeyError:
        raise ValueError(f"unknown activation {name!r}") from None


# linear algebra -----------------------------------------------------------
def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim not in (1, 2) or bd.ndim not in (1, 2):
        raise ShapeMismatch(f"matmul supports 1-D/2-D operands, got {ad.shape} @ {bd.shape}")
    if ad.shape[-1] != bd.shape[0]:
        raise ShapeMismatch(f"matmul shape mismatch {ad.shape} @ {bd.shape}")

    def backward(g):
        a2 = ad.reshape(1, -1) if ad.ndim == 1 else ad
        b2 = bd.reshape(-1, 1) if bd.ndim == 1 else bd
        g2 = g.reshape(a2.shape[0], b2.shape[1])
        return (g2 @ b2.T).reshape(ad.shape), (a2.T @ g2).reshape(bd.shape)

    return _make(ad @ bd, (a, b), backward, "matmul")


def transpose(x) -> Tensor:
    x = as_tensor(x)
    return _make(x.data.T, (x,), lambda g: (g.T,), "transpose")


# reductions ---------------------------------------------------------------
def sum(x, axis=None, keepdims=False) -> Tensor:  # noqa: A001 - mirrors numpy
    x = as_tensor(x)
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(x.data.sum(axis=axis, keepdims=keepdims), (x,), backward, "sum")


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    count = x.data.size if axis is None else x.shape[axis]
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def pool_mean(x) -> Tensor:
    """Column mean of an ``(N, C)`` tensor, independent of row order bit for bit.

    Each column is sorted before summation so any permutation of the rows
    yields the identical floating-point result.
    """
    x = as_tensor(x)
    n = x.shape[0]
    out = np.sort(x.data, axis=0).sum(axis=0) / n
    shape = x.shape
    return _make(out, (x,), lambda g: (np.broadcast_to(g / n, shape).copy(),), "pool_mean")


def row_norm(x, eps=0.0) -> Tensor:
    """Euclidean norm of each row of an ``(N, C)`` tensor.

    The gradient at a zero row is taken as zero.
    """
    x = as_tensor(x)
    n = np.sqrt((x.data ** 2).sum(axis=1))
    safe = np.where(n > eps, n, 1.0)

    def backward(g):
        scale = np.where(n > eps, g / safe, 0.0)
        return (x.data * scale[:, None],)

    return _make(n, (x,), backward, "row_norm")


def norm(x) -> Tensor:
    """Euclidean norm of a whole tensor (zero subgradient at the origin)."""
    x = as_tensor(x)
    n = math.sqrt(float((x.data ** 2).sum()))

    def backward(g):
        if n == 0.0:
            return (np.zeros_like(x.data),)
        return (x.data * (g / n),)

    return _make(np.array(n), (x,), backward, "norm")


# structure ------------------------------------------------------------------
def index(x, key) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    def backward(g):
        out = np.zeros(shape)
        np.add.at(out, key, g)
        return (out,)

    return _make(x.data[key], (x,), backward, "index")


def gather_rows(x, idx) -> Tensor:
    """Rows ``x[idx]`` for a constant integer index array."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    shape = x.shape

    def backward(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _make(x.data[idx], (x,), backward, "gather")


def concat(items, axis=0) -> Tensor:
    items = [as_tensor(t) for t in items]
    sizes = [t.shape[axis] for t in items]
    splits = np.cumsum(sizes)[:-1]
    try:
        data = np.concatenate([t.data for t in items], axis=axis)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from None
    return _make(data, tuple(items), lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def stack_rows(x, n) -> Tensor:
    """Repeat a ``(C,)`` vector into an ``(n, C)`` matrix."""
    x = as_tensor(x)
    if x.ndim != 1:
        raise ShapeMismatch(f"stack_rows expects a vector, got {x.shape}")
    return _make(np.broadcast_to(x.data, (n, x.shape[0])).copy(), (x,),
                 lambda g: (g.sum(axis=0),), "stack_rows")


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


# rotations ---------------------------------------------------------------------
def _euler_parts(angles):
    a, b, c = (float(v) for v in angles)
    ca, sa, cb, sb, cc, sc = math.cos(a), math.sin(a), math.cos(b), math.sin(b), math.cos(c), math.sin(c)
    Rx = np.array([[1, 0, 0], [0, ca, -sa], [0, sa, ca]], dtype=np.float64)
    Ry = np.array([[cb, 0, sb], [0, 1, 0], [-sb, 0, cb]], dtype=np.float64)
    Rz = np.array([[cc, -sc, 0], [sc, cc, 0], [0, 0, 1]], dtype=np.float64)
    dRx = np.array([[0, 0, 0], [0, -sa, -ca], [0, ca, -sa]], dtype=np.float64)
    dRy = np.array([[-sb, 0, cb], [0, 0, 0], [-cb, 0, -sb]], dtype=np.float64)
    dRz = np.array([[-sc, -cc, 0], [cc, -sc, 0], [0, 0, 0]], dtype=np.float64)
    return Rx, Ry, Rz, dRx, dRy, dRz


def euler_to_rotation(angles) -> Tensor:
    """Differentiable ``Rz(g) Ry(b) Rx(a)`` from a ``(3,)`` tensor of angles."""
    angles = as_tensor(angles)
    if angles.shape != (3,):
        raise ShapeMismatch(f"angles must have shape (3,), got {angles.shape}")
    Rx, Ry, Rz, dRx, dRy, dRz = _euler_parts(angles.data)
    R = Rz @ Ry @ Rx
    jac = (Rz @ Ry @ dRx, Rz @ dRy @ Rx, dRz @ Ry @ Rx)

    def backward(g):
        return (np.array([(g * J).sum() for J in jac]),)

    return _make(R, (angles,), backward, "euler_to_rotation")


def rotation_to_euler(R) -> Tensor:
    """Differentiable inverse of :func:`euler_to_rotation` away from gimbal lock."""
    R = as_tensor(R)
    M = R.data
    r11, r21, r31, r32, r33 = M[0, 0], M[1, 0], M[2, 0], M[2, 1], M[2, 2]
    s2 = r11 * r11 + r21 * r21
    s = math.sqrt(s2)
    angles = np.array([math.atan2(r32, r33), math.atan2(-r31, s), math.atan2(r21, r11)])
    q23 = r32 * r32 + r33 * r33

    def backward(g):
        out = np.zeros((3, 3))
        ga, gb, gc = g
        out[2, 1] += ga * r33 / q23
        out[2, 2] += ga * -r32 / q23
        den = s2 + r31 * r31
        out[2, 0] += gb * -s / den
        if s > 0:
            out[0, 0] += gb * r31 * r11 / (s * den)
            out[1, 0] += gb * r31 * r21 / (s * den)
        out[1, 0] += gc * r11 / s2
        out[0, 0] += gc * -r21 / s2
        return (out,)

    return _make(angles, (R,), backward, "rotation_to_euler")
