"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Only the handful of primitives needed for small MLPs with softmax/sigmoid
heads and the adversarial losses are provided. There is no general
broadcasting: elementwise ops require equal shapes, and the only broadcast
is a bias row added to every row of a matrix.

Usage::

    tape = Tape()
    W = tape.param("W", rng.normal(size=(3, 2)))
    x = tape.const(x_batch)
    loss = mean(relu(matmul(x, W)))
    grads = tape.backward(loss)      # {"W": ndarray}
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, DomainError, NumericalError, StateError

PROB_EPS = 1e-7


class Node:
    """A value recorded on a tape, with its adjoint buffer."""

    __slots__ = ("tape", "value", "grad", "parents", "backward_fn", "name")

    def __init__(self, tape, value, parents=(), backward_fn=None, name=None):
        self.tape = tape
        self.value = value
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        label = self.name or (self.backward_fn.__name__ if self.backward_fn else "const")
        return f"Node({label}, shape={self.value.shape})"


class Tape:
    """Records nodes in creation order, which is a valid topological order."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.params: dict[str, Node] = {}

    def _record(self, value, parents=(), backward_fn=None, name=None) -> Node:
        node = Node(self, value, parents, backward_fn, name)
        self.nodes.append(node)
        return node

    def param(self, name: str, value) -> Node:
        if name in self.params:
            raise StateError(f"parameter {name!r} already on tape")
        value = np.asarray(value, dtype=np.float64)
        if not np.all(np.isfinite(value)):
            raise NumericalError(f"parameter {name!r} has non-finite entries")
        node = self._record(value, name=name)
        self.params[name] = node
        return node

    def const(self, value) -> Node:
        value = np.asarray(value, dtype=np.float64)
        if not np.all(np.isfinite(value)):
            raise NumericalError("input has non-finite entries")
        return self._record(value)

    def backward(self, output: Node, adjoint=None) -> dict[str, np.ndarray]:
        """Propagate ``adjoint`` (default 1 for scalar outputs) back to every parameter."""
        if not self.nodes or output.tape is not self:
            raise StateError("backward called before a forward pass was recorded on this tape")
        if adjoint is None:
            if output.value.size != 1:
                raise DimensionError("adjoint required for non-scalar output")
            adjoint = np.ones_like(output.value)
        adjoint = np.asarray(adjoint, dtype=np.float64)
        if adjoint.shape != output.value.shape:
            raise DimensionError(f"adjoint shape {adjoint.shape} != output shape {output.value.shape}")

        for node in self.nodes:
            node.grad = None
        output.grad = adjoint.copy()
        stop = self.nodes.index(output)
        for node in reversed(self.nodes[: stop + 1]):
            if node.grad is None or node.backward_fn is None:
                continue
            node.backward_fn(node.grad)
        return {
            name: (p.grad if p.grad is not None else np.zeros_like(p.value))
            for name, p in self.params.items()
        }


def _accumulate(node: Node, g):
    if node.grad is None:
        node.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        node.grad = node.grad + g


def _same_shape(a: Node, b: Node, op: str):
    if a.value.shape != b.value.shape:
        raise DimensionError(f"{op}: shapes {a.value.shape} and {b.value.shape} differ")
    if a.tape is not b.tape:
        raise StateError(f"{op}: operands live on different tapes")


# -- primitives ------------------------------------------------------------


def matmul(a: Node, b: Node) -> Node:
    if a.value.ndim != 2 or b.value.ndim != 2 or a.value.shape[1] != b.value.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.value.shape} by {b.value.shape}")

    def matmul_backward(g):
        _accumulate(a, g @ b.value.T)
        _accumulate(b, a.value.T @ g)

    return a.tape._record(a.value @ b.value, (a, b), matmul_backward)


def add(a: Node, b: Node) -> Node:
    _same_shape(a, b, "add")

    def add_backward(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return a.tape._record(a.value + b.value, (a, b), add_backward)


def sub(a: Node, b: Node) -> Node:
    _same_shape(a, b, "sub")

    def sub_backward(g):
        _accumulate(a, g)
        _accumulate(b, -g)

    return a.tape._record(a.value - b.value, (a, b), sub_backward)


def mul(a: Node, b: Node) -> Node:
    _same_shape(a, b, "mul")

    def mul_backward(g):
        _accumulate(a, g * b.value)
        _accumulate(b, g * a.value)

    return a.tape._record(a.value * b.value, (a, b), mul_backward)


def add_bias(a: Node, bias: Node) -> Node:
    """Add a length-m bias vector to every row of an n x m matrix."""
    if a.value.ndim != 2 or bias.value.shape != (a.value.shape[1],):
        raise DimensionError(f"add_bias: bias {bias.value.shape} does not fit {a.value.shape}")

    def add_bias_backward(g):
        _accumulate(a, g)
        _accumulate(bias, g.sum(axis=0))

    return a.tape._record(a.value + bias.value, (a, bias), add_bias_backward)


def scale(a: Node, s: float, offset: float = 0.0) -> Node:
    """Affine map ``s * a + offset`` with scalar constants."""

    def scale_backward(g):
        _accumulate(a, s * g)

    return a.tape._record(s * a.value + offset, (a,), scale_backward)


def one_minus(a: Node) -> Node:
    return scale(a, -1.0, 1.0)


def relu(a: Node) -> Node:
    mask = a.value > 0

    def relu_backward(g):
        _accumulate(a, g * mask)

    return a.tape._record(np.where(mask, a.value, 0.0), (a,), relu_backward)


def sigmoid(a: Node) -> Node:
    out = np.empty_like(a.value)
    pos = a.value >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a.value[pos]))
    ex = np.exp(a.value[~pos])
    out[~pos] = ex / (1.0 + ex)

    def sigmoid_backward(g):
        _accumulate(a, g * out * (1.0 - out))

    return a.tape._record(out, (a,), sigmoid_backward)


def softmax(a: Node) -> Node:
    """Row-wise softmax of an n x m matrix."""
    if a.value.ndim != 2:
        raise DimensionError("softmax expects a matrix")
    z = a.value - a.value.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)

    def softmax_backward(g):
        _accumulate(a, out * (g - (g * out).sum(axis=1, keepdims=True)))

    return a.tape._record(out, (a,), softmax_backward)


def log(a: Node, eps: float = PROB_EPS) -> Node:
    """Log of a probability, clamped to [eps, 1 - eps] first.

    The clamp has zero derivative outside the interval.
    """
    clipped = np.clip(a.value, eps, 1.0 - eps)
    inside = (a.value >= eps) & (a.value <= 1.0 - eps)

    def log_backward(g):
        _accumulate(a, np.where(inside, g / clipped, 0.0))

    return a.tape._record(np.log(clipped), (a,), log_backward)


def take(a: Node, index) -> Node:
    """Pick ``a[i, index[i]]`` from each row, giving a length-n vector."""
    index = np.asarray(index, dtype=np.int64)
    n = a.value.shape[0]
    if a.value.ndim != 2 or index.shape != (n,):
        raise DimensionError(f"take: index shape {index.shape} does not match {a.value.shape}")
    rows = np.arange(n)

    def take_backward(g):
        full = np.zeros_like(a.value)
        full[rows, index] = g
        _accumulate(a, full)

    return a.tape._record(a.value[rows, index], (a,), take_backward)


def column(a: Node, j: int) -> Node:
    return take(a, np.full(a.value.shape[0], j))


def softmax_cross_entropy(logits: Node, labels) -> Node:
    """Per-row ``-log softmax(logits)[label]`` with the probability clamp."""
    return scale(log(take(softmax(logits), labels)), -1.0)


def weighted_mean(values: Node, weights) -> Node:
    """``(1/n) * sum(weights * values)`` for a length-n vector; returns a scalar node.

    The weights are constants. They do not renormalise: with class-balancing
    weights this turns the plain empirical mean into a reweighted expectation.
    """
    weights = np.asarray(weights, dtype=np.float64)
    if values.value.ndim != 1:
        raise DimensionError("weighted_mean expects a vector of per-sample values")
    n = values.value.shape[0]
    if n == 0:
        raise DomainError("weighted_mean of an empty batch")
    if weights.shape != (n,):
        raise DimensionError(f"weights shape {weights.shape} != ({n},)")
    if not np.all(np.isfinite(weights)) or np.any(weights < 0):
        raise DomainError("weights must be finite and non-negative")

    def weighted_mean_backward(g):
        _accumulate(values, g * weights / n)

    out = np.asarray(np.dot(weights, values.value) / n)
    return values.tape._record(out, (values,), weighted_mean_backward)


def mean(values: Node) -> Node:
    return weighted_mean(values, np.ones(values.value.shape[0]))


def reduce_sum(a: Node) -> Node:
    def sum_backward(g):
        _accumulate(a, np.full_like(a.value, float(g)))

    return a.tape._record(np.asarray(a.value.sum()), (a,), sum_backward)


def weighted_mean_loss(per_sample, weights) -> float:
    """Plain-array form of :func:`weighted_mean`."""
    tape = Tape()
    return float(weighted_mean(tape.const(per_sample), weights).value)
