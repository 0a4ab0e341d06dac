"""Reverse-mode automatic differentiation over dense float64 arrays.

Every trainable quantity in iadalab is a leaf :class:`Node`. Operations build a
directed acyclic graph; :meth:`Node.backward` walks it in reverse topological
order and accumulates ``d root / d leaf`` into each reachable leaf's ``grad``.

Gradients accumulate (``+=``) across backward calls until :func:`zero_grad` is
called, so several losses can be differentiated into the same leaves before a
single update step.
"""
import logging

import numpy as np
from scipy.special import expit

logger = logging.getLogger(__name__)


class AutodiffError(ValueError):
    """Base class for errors raised while building or differentiating a graph."""


class ShapeMismatchError(AutodiffError):
    """Raised when the operands of an operation have incompatible shapes."""

    def __init__(self, op, left_shape, right_shape):
        self.op = op
        self.left_shape = tuple(left_shape)
        self.right_shape = tuple(right_shape)
        super().__init__(f"{op}: incompatible shapes {self.left_shape} and {self.right_shape}")


class NonFiniteError(AutodiffError):
    """Raised when an operation produces inf or nan."""

    def __init__(self, op):
        self.op = op
        super().__init__(f"{op}: produced a non-finite value")


class Node:
    """A value in the computation graph together with its accumulated gradient.

    Args:
        value (array-like): The forward value, stored as a float64 array.
        parents (tuple[Node]): Input nodes. Empty for leaves.
        op (str): Tag of the producing operation ("leaf" or "const" for inputs).
        vjp (callable or None): Maps the upstream gradient to one gradient per parent.
    """

    __slots__ = ("value", "grad", "op", "parents", "_vjp")
    # Make numpy defer to the reflected operators below (ndarray * Node -> Node).
    __array_ufunc__ = None

    def __init__(self, value, parents=(), op="leaf", vjp=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.op = op
        self.parents = tuple(parents)
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
        """Returns the value of a single-element node as a Python float."""
        return float(self.value.reshape(-1)[0]) if self.value.size == 1 else float(self.value)

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)

    def backward(self):
        """Back-propagates from this scalar node into every reachable leaf.

        Leaves accumulate into ``grad``; interior nodes receive the gradient of
        this pass only.

        Raises:
            AutodiffError: If the node holds more than one element.
        """
        if self.value.size != 1:
            raise AutodiffError(f"backward: root must be a scalar, got shape {self.value.shape}")
        order = _topological_order(self)
        upstream = {id(self): np.ones_like(self.value)}
        for node in reversed(order):
            g = upstream.pop(id(node), None)
            if g is None:
                continue
            if not node.parents:
                node.grad = node.grad + g
                continue
            node.grad = g
            for parent, parent_grad in zip(node.parents, node._vjp(g)):
                if parent_grad is None:
                    continue
                key = id(parent)
                upstream[key] = upstream[key] + parent_grad if key in upstream else parent_grad

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.value.shape})"

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

    def __pow__(self, exponent):
        return power(self, exponent)


def _topological_order(root):
    # Iterative post-order DFS; deep graphs must not hit the recursion limit.
    order, seen = [], set()
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
        for parent in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def as_node(x):
    """Wraps constants as leaf nodes tagged "const"; nodes pass through."""
    return x if isinstance(x, Node) else Node(x, op="const")


def zero_grad(nodes):
    """Resets the gradient of every node in ``nodes``."""
    for node in nodes:
        node.zero_grad()


def _result(value, parents, op, vjp):
    value = np.asarray(value, dtype=np.float64)
    if not np.all(np.isfinite(value)):
        logger.debug(f"Non-finite output in op '{op}'")
        raise NonFiniteError(op)
    return Node(value, parents, op, vjp)


def _unbroadcast(grad, shape):
    """Sums ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _broadcast_check(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatchError(op, a.shape, b.shape) from None


# --- ELEMENTWISE ---
def add(a, b):
    a, b = as_node(a), as_node(b)
    _broadcast_check("add", a, b)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.value + b.value, (a, b), "add", vjp)


def sub(a, b):
    a, b = as_node(a), as_node(b)
    _broadcast_check("sub", a, b)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.value - b.value, (a, b), "sub", vjp)


def mul(a, b):
    a, b = as_node(a), as_node(b)
    _broadcast_check("mul", a, b)

    def vjp(g):
        return _unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)

    return _result(a.value * b.value, (a, b), "mul", vjp)


def div(a, b):
    a, b = as_node(a), as_node(b)
    _broadcast_check("div", a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        value = a.value / b.value

    def vjp(g):
        return (_unbroadcast(g / b.value, a.shape),
                _unbroadcast(-g * a.value / (b.value * b.value), b.shape))

    return _result(value, (a, b), "div", vjp)


def neg(a):
    a = as_node(a)
    return _result(-a.value, (a,), "neg", lambda g: (-g,))


def exp(a):
    a = as_node(a)
    with np.errstate(over="ignore"):
        value = np.exp(a.value)
    return _result(value, (a,), "exp", lambda g: (g * value,))


def log(a):
    """Natural logarithm; inputs must be strictly positive."""
    a = as_node(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        value = np.log(a.value)
    return _result(value, (a,), "log", lambda g: (g / a.value,))


def power(a, exponent):
    """Raises ``a`` to a constant real ``exponent``."""
    a = as_node(a)
    exponent = float(exponent)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        value = np.power(a.value, exponent)

    def vjp(g):
        if exponent == 0.0:
            return (np.zeros_like(a.value),)
        with np.errstate(divide="ignore", invalid="ignore"):
            local = exponent * np.power(a.value, exponent - 1.0)
        return (g * local,)

    return _result(value, (a,), f"power({exponent:g})", vjp)


def relu(a):
    a = as_node(a)
    mask = a.value > 0
    return _result(np.where(mask, a.value, 0.0), (a,), "relu", lambda g: (g * mask,))


def sigmoid(a):
    a = as_node(a)
    value = expit(a.value)
    return _result(value, (a,), "sigmoid", lambda g: (g * value * (1.0 - value),))


def clip(a, low, high):
    """Clamps values to [low, high]; gradient flows only where unclamped."""
    a = as_node(a)
    inside = (a.value >= low) & (a.value <= high)
    return _result(np.clip(a.value, low, high), (a,), "clip", lambda g: (g * inside,))


def softmax(a):
    """Softmax over the last axis, computed with max-subtraction."""
    a = as_node(a)
    shifted = a.value - a.value.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _result(s, (a,), "softmax", vjp)


# --- LINEAR ALGEBRA / SHAPE ---
def matmul(a, b):
    a, b = as_node(a), as_node(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatchError("matmul", a.shape, b.shape)

    def vjp(g):
        return g @ b.value.T, a.value.T @ g

    return _result(a.value @ b.value, (a, b), "matmul", vjp)


def transpose(a):
    a = as_node(a)
    return _result(a.value.T, (a,), "transpose", lambda g: (g.T,))


def concat(nodes, axis=0):
    nodes = [as_node(n) for n in nodes]
    if not nodes:
        raise AutodiffError("concat: needs at least one operand")
    try:
        value = np.concatenate([n.value for n in nodes], axis=axis)
    except ValueError:
        raise ShapeMismatchError("concat", nodes[0].shape, nodes[-1].shape) from None
    splits = np.cumsum([n.shape[axis] for n in nodes])[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(value, tuple(nodes), "concat", vjp)


def take_rows(a, index):
    """Selects rows ``a[index]``; the backward pass scatter-adds into the source rows."""
    a = as_node(a)
    index = np.asarray(index)

    def vjp(g):
        out = np.zeros_like(a.value)
        np.add.at(out, index, g)
        return (out,)

    return _result(a.value[index], (a,), "take_rows", vjp)


# --- REDUCTIONS ---
def reduce_sum(a, axis=None, keepdims=False):
    a = as_node(a)
    value = a.value.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(value, (a,), "sum", vjp)


def reduce_mean(a, axis=None, keepdims=False):
    a = as_node(a)
    count = a.size if axis is None else a.shape[axis]
    value = a.value.mean(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _result(value, (a,), "mean", vjp)


# --- ADVERSARIAL ---
def grad_reverse(a, scale=1.0):
    """Identity on the forward pass; multiplies the incoming gradient by ``-scale``.

    Args:
        a (Node): Input node.
        scale (float): Non-negative reversal strength.

    Raises:
        AutodiffError: If ``scale`` is negative.
    """
    if scale < 0:
        raise AutodiffError(f"grad_reverse: scale must be >= 0, got {scale}")
    a = as_node(a)
    scale = float(scale)
    return _result(a.value.copy(), (a,), "grad_reverse", lambda g: (-scale * g,))


# --- CHECKING ---
def finite_difference_gradient(fn, leaf, step=1e-5):
    """Central finite-difference gradient of a scalar function w.r.t. one leaf.

    Args:
        fn (callable): Zero-argument function that rebuilds the graph and returns a scalar Node.
        leaf (Node): The leaf whose value is perturbed in place (and restored).
        step (float): Finite-difference step.

    Returns:
        np.ndarray: Numerical gradient with the shape of ``leaf.value``.
    """
    numeric = np.zeros_like(leaf.value)
    flat = leaf.value.reshape(-1)
    out = numeric.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + step
        plus = fn().item()
        flat[i] = original - step
        minus = fn().item()
        flat[i] = original
        out[i] = (plus - minus) / (2.0 * step)
    return numeric


def relative_error(analytic, numeric):
    """Norm-wise relative error between two gradient arrays."""
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / scale)
