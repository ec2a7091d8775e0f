"""Small reverse-mode differentiation engine over numpy arrays.

A :class:`Tape` records a closed set of array operations in topological
order.  :meth:`Tape.backward` sweeps the record once in reverse and
accumulates adjoints.  :class:`DualNode` carries forward-mode tangents as
ordinary tape nodes, so that Jacobian-vector products of a network can
themselves be differentiated with respect to the network parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

OPS = (
    "const", "param",
    "add", "sub", "neg", "mul", "div",
    "exp", "log", "tanh", "softplus",
    "logsumexp", "dot", "affine",
    "sum", "index", "reshape",
)


class TapeDomainError(ArithmeticError):
    """Raised when an operation leaves its domain (log of <= 0, div by 0)."""

    def __init__(self, op, index, message):
        super().__init__(f"node {index} ({op}): {message}")
        self.op = op
        self.index = index


class TapeContractError(ValueError):
    """Raised on misuse of the tape (non-scalar backward, foreign nodes)."""


def softplus(x):
    """Numerically stable log(1 + exp(x))."""
    x = np.asarray(x, dtype=float)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def sigmoid(x):
    x = np.asarray(x, dtype=float)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


@dataclass(eq=False)
class Node:
    tape: "Tape"
    index: int
    op: str
    value: np.ndarray
    operands: tuple = ()
    partials: tuple = ()
    attrs: dict = field(default_factory=dict)
    needs_grad: bool = False

    __array_ufunc__ = None  # make numpy defer to the reflected operators

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return self.tape.record("add", self, other)

    def __radd__(self, other):
        return self.tape.record("add", other, self)

    def __sub__(self, other):
        return self.tape.record("sub", self, other)

    def __rsub__(self, other):
        return self.tape.record("sub", other, self)

    def __mul__(self, other):
        return self.tape.record("mul", self, other)

    def __rmul__(self, other):
        return self.tape.record("mul", other, self)

    def __truediv__(self, other):
        return self.tape.record("div", self, other)

    def __rtruediv__(self, other):
        return self.tape.record("div", other, self)

    def __neg__(self):
        return self.tape.record("neg", self)

    def __matmul__(self, other):
        return self.tape.record("dot", self, other)

    def __getitem__(self, key):
        return self.tape.record("index", self, key=key)

    def __repr__(self):
        return f"Node({self.index}, {self.op}, shape={self.value.shape})"


class Tape:
    """Append-only record of array operations with parameter slots."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.params: list[Node] = []

    def reset(self):
        self.nodes = []
        self.params = []

    def __len__(self):
        return len(self.nodes)

    def _push(self, op, value, operands=(), partials=(), **attrs):
        node = Node(self, len(self.nodes), op, value, tuple(operands), tuple(partials), attrs)
        node.needs_grad = op == "param" or any(x.needs_grad for x in node.operands)
        self.nodes.append(node)
        return node

    def const(self, value):
        return self._push("const", np.asarray(value, dtype=float))

    def param(self, value):
        node = self._push("param", np.array(value, dtype=float))
        self.params.append(node)
        return node

    def _lift(self, x):
        if isinstance(x, Node):
            if x.tape is not self:
                raise TapeContractError(f"operand {x!r} belongs to another tape")
            return x
        return self.const(x)

    def record(self, op, *operands, **attrs):
        """Evaluate ``op`` on ``operands`` and append the result node.

        Elementwise partials are derived from the stored operand and result
        values when ``backward`` needs them (see :func:`local_partials`);
        reductions and products keep what they need at record time.
        """
        if op not in OPS or op in ("const", "param"):
            raise TapeContractError(f"unknown operation {op!r}")
        xs = [self._lift(x) for x in operands]
        vals = [x.value for x in xs]
        index = len(self.nodes)

        if op == "add":
            return self._push(op, vals[0] + vals[1], xs)
        if op == "sub":
            return self._push(op, vals[0] - vals[1], xs)
        if op == "neg":
            return self._push(op, -vals[0], xs)
        if op == "mul":
            return self._push(op, vals[0] * vals[1], xs)
        if op == "div":
            if np.any(vals[1] == 0):
                raise TapeDomainError(op, index, "division by zero")
            return self._push(op, vals[0] / vals[1], xs)
        if op == "exp":
            return self._push(op, np.exp(vals[0]), xs)
        if op == "log":
            if np.any(vals[0] <= 0):
                raise TapeDomainError(op, index, "log of non-positive value")
            return self._push(op, np.log(vals[0]), xs)
        if op == "tanh":
            return self._push(op, np.tanh(vals[0]), xs)
        if op == "softplus":
            return self._push(op, softplus(vals[0]), xs)
        if op == "logsumexp":
            axis = attrs.get("axis", -1)
            x = vals[0]
            m = np.max(x, axis=axis, keepdims=True)
            w = np.exp(x - m)
            s = w.sum(axis=axis, keepdims=True)
            v = (m + np.log(s)).squeeze(axis)
            return self._push(op, v, xs, (w / s,), axis=axis)
        if op == "dot":
            a, b = vals
            if b.ndim > 2:
                raise TapeContractError("dot expects a vector or matrix right operand")
            return self._push(op, a @ b, xs, (b, a))
        if op == "affine":
            x, w, b = vals
            return self._push(op, x @ w + b, xs, (w, x, 1.0))
        if op == "sum":
            axis = attrs.get("axis", None)
            return self._push(op, np.asarray(vals[0].sum(axis=axis)), xs, (1.0,), axis=axis)
        if op == "index":
            key = attrs["key"]
            return self._push(op, np.asarray(vals[0][key]), xs, (1.0,), key=key)
        if op == "reshape":
            shape = attrs["shape"]
            return self._push(op, vals[0].reshape(shape), xs, (1.0,), shape=shape)
        raise AssertionError(op)

    def backward(self, output):
        """Return d(output)/d(param) for every parameter slot, in slot order."""
        if not isinstance(output, Node) or output.tape is not self:
            raise TapeContractError("output must be a node of this tape")
        if output.value.size != 1:
            raise TapeContractError(f"backward needs a scalar output, got shape {output.shape}")
        adj: list = [None] * (output.index + 1)
        adj[output.index] = np.ones_like(output.value)
        for node in reversed(self.nodes[: output.index + 1]):
            g = adj[node.index]
            if g is None or not node.operands:
                continue
            for x, contrib in zip(node.operands, self._vjp(node, g)):
                if not x.needs_grad:
                    continue
                contrib = _unbroadcast(np.asarray(contrib, dtype=float), x.value.shape)
                adj[x.index] = contrib if adj[x.index] is None else adj[x.index] + contrib
        out = []
        for p in self.params:
            a = adj[p.index] if p.index < len(adj) else None
            out.append(np.zeros_like(p.value) if a is None else a)
        return out

    @staticmethod
    def _vjp(node, g):
        """Operand adjoint contributions; None for operands without grad."""
        op, p, xs = node.op, node.partials, node.operands
        want = [x.needs_grad for x in xs]
        if op in _ELEMENTWISE:
            return _elementwise_vjp(node, g, want)
        if op == "logsumexp":
            return [np.expand_dims(g, node.attrs["axis"]) * p[0]]
        if op == "dot":
            b, a = p
            return [
                _dot_left_grad(g, b) if want[0] else None,
                _dot_right_grad(a, g, b.ndim) if want[1] else None,
            ]
        if op == "affine":
            w, x, _ = p
            return [
                g @ w.T if want[0] else None,
                _dot_right_grad(x, g, 2) if want[1] else None,
                g if want[2] else None,
            ]
        if op == "sum":
            x = xs[0].value
            axis = node.attrs["axis"]
            if axis is not None:
                g = np.expand_dims(g, axis)
            return [np.broadcast_to(g, x.shape)]
        if op == "index":
            out = np.zeros_like(xs[0].value)
            key = node.attrs["key"]
            if _is_basic_index(key):
                out[key] = g
            else:
                np.add.at(out, key, g)
            return [out]
        if op == "reshape":
            return [g.reshape(xs[0].value.shape)]
        raise AssertionError(op)


_ELEMENTWISE = ("add", "sub", "neg", "mul", "div", "exp", "log", "tanh", "softplus")


def local_partials(node):
    """Partial derivatives of an elementwise node w.r.t. each operand."""
    v = node.value
    xs = [x.value for x in node.operands]
    op = node.op
    if op == "add":
        return (1.0, 1.0)
    if op == "sub":
        return (1.0, -1.0)
    if op == "neg":
        return (-1.0,)
    if op == "mul":
        return (xs[1], xs[0])
    if op == "div":
        return (1.0 / xs[1], -v / xs[1])
    if op == "exp":
        return (v,)
    if op == "log":
        return (1.0 / xs[0],)
    if op == "tanh":
        return (1.0 - v * v,)
    if op == "softplus":
        return (sigmoid(xs[0]),)
    return node.partials


def _elementwise_vjp(node, g, want):
    op = node.op
    if op == "add":
        return [g if w else None for w in want]
    if op == "sub":
        return [g if want[0] else None, -g if want[1] else None]
    if op == "neg":
        return [-g]
    if op == "mul":
        a, b = (x.value for x in node.operands)
        return [g * b if want[0] else None, g * a if want[1] else None]
    if op == "div":
        b = node.operands[1].value
        ga = g / b
        return [ga if want[0] else None, -ga * node.value if want[1] else None]
    return [g * local_partials(node)[0]]


def _is_basic_index(key):
    keys = key if isinstance(key, tuple) else (key,)
    return all(isinstance(k, (int, slice, type(None), type(Ellipsis))) for k in keys)


def _dot_left_grad(g, b):
    if b.ndim == 1:
        return np.multiply.outer(g, b)
    return g @ b.T


def _dot_right_grad(a, g, b_ndim):
    # right operand is a vector or a matrix shared across a's leading axes
    if b_ndim == 1:
        return np.tensordot(a, g, axes=(tuple(range(a.ndim - 1)), tuple(range(g.ndim))))
    if a.ndim == 1:
        return np.multiply.outer(a, g)
    return a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])


# -- forward-mode tangents living on the tape ---------------------------------


@dataclass
class DualNode:
    """A primal node with K tangent directions stacked on a leading axis.

    ``tangent.value`` has shape ``(K,) + primal.shape``.  Arithmetic on the
    tangent follows the product and chain rules and is itself recorded, so a
    later ``backward`` differentiates straight through it.
    """

    primal: Node
    tangent: Node

    @property
    def K(self):
        return self.tangent.shape[0]

    def tangent_k(self, k):
        return self.tangent[k]


def dual_affine(x: DualNode, w: Node, b: Node) -> DualNode:
    tape = x.primal.tape
    return DualNode(tape.record("affine", x.primal, w, b), tape.record("dot", x.tangent, w))


def dual_tanh(x: DualNode) -> DualNode:
    tape = x.primal.tape
    h = tape.record("tanh", x.primal)
    slope = 1.0 - h * h
    return DualNode(h, x.tangent * slope)


def dual_softplus(x: DualNode) -> DualNode:
    tape = x.primal.tape
    sp = tape.record("softplus", x.primal)
    # sigmoid(u) = exp(-softplus(-u)) keeps the slope inside the closed op set
    slope = tape.record("exp", -tape.record("softplus", -x.primal))
    return DualNode(sp, x.tangent * slope)


def tangent_forward(layers, x, seeds, tape=None):
    """Run a tanh MLP forward with K tangent directions.

    Args:
        layers: list of ``(W, b)`` pairs; each entry may be a tape node or
            an array (arrays become constants).
        x: input of shape ``(n, p)``.
        seeds: tangent seeds of shape ``(K, n, p)``.
        tape: tape to record on; a fresh one when omitted.

    Returns:
        ``DualNode`` whose primal is the output ``(n, q)`` and whose tangent
        is the Jacobian applied to the seeds, ``(K, n, q)``.
    """
    x_val = x.value if isinstance(x, Node) else np.asarray(x, dtype=float)
    s_val = seeds.value if isinstance(seeds, Node) else np.asarray(seeds, dtype=float)
    if s_val.ndim != x_val.ndim + 1 or s_val.shape[1:] != x_val.shape:
        raise TapeContractError(
            f"seed shape {s_val.shape} does not match K x input shape {x_val.shape}"
        )
    if tape is None:
        tape = x.tape if isinstance(x, Node) else Tape()
    h = DualNode(tape._lift(x), tape._lift(seeds))
    for i, (w, b) in enumerate(layers):
        h = dual_affine(h, tape._lift(w), tape._lift(b))
        if i < len(layers) - 1:
            h = dual_tanh(h)
    return h
