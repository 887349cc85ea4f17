"""Small reverse-mode automatic differentiation engine.

Nodes hold numpy arrays (0-d arrays for scalars).  Every node is recorded on
a :class:`Tape` in creation order, which is already a topological order, so
:func:`backward` is a single reverse sweep.

Example::

    tape = Tape()
    x = tape.leaf(3.0)
    y = x * x
    backward(tape, y)
    x.adjoint  # -> array(6.)
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

LOG_FLOOR = 1e-12


class GraphError(ValueError):
    """Invalid graph construction (bad operand values or shapes)."""


class UsageError(RuntimeError):
    """Tape misuse, e.g. calling backward twice or on a foreign root."""


class Node:
    __slots__ = ("value", "_adjoint", "op", "parents", "tape", "index", "_vjp")
    # make numpy defer to the reflected operators below
    __array_ufunc__ = None

    def __init__(self, tape: "Tape", value, op: str = "leaf", parents=(), vjp=None):
        self.value = np.asarray(value, dtype=np.float64)
        self._adjoint = None
        self.op = op
        self.parents = tuple(parents)
        self.tape = tape
        self._vjp = vjp
        self.index = tape._record(self)

    @property
    def adjoint(self) -> np.ndarray:
        # allocated on first use; most nodes of a forward-only tape never need one
        if self._adjoint is None:
            self._adjoint = np.zeros_like(self.value)
        return self._adjoint

    @adjoint.setter
    def adjoint(self, value):
        self._adjoint = value

    @property
    def shape(self):
        return self.value.shape

    def __len__(self):
        return len(self.value)

    def __repr__(self):
        return f"Node(op={self.op!r}, value={self.value!r})"

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

    def __getitem__(self, idx):
        return getitem(self, idx)


# DiffNode is the name used throughout the docs.
DiffNode = Node


class Tape:
    """Ordered record of nodes; creation order is the topological order."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.kinks: list[bytes] = []
        self.min_kink_distance = np.inf
        self._done = False

    def _record(self, node: Node) -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1

    def _note_kink(self, state: np.ndarray, distance: np.ndarray):
        # state identifies which side of each kink the inputs sit on; grad_check
        # compares states across perturbed evaluations.
        self.kinks.append(np.ascontiguousarray(state).tobytes())
        if np.size(distance):
            self.min_kink_distance = min(self.min_kink_distance, float(np.min(distance)))

    def leaf(self, value) -> Node:
        return Node(self, np.array(value, dtype=np.float64), "leaf")

    def const(self, value) -> Node:
        return Node(self, value, "const")

    def zero_grad(self):
        """Zero every adjoint so backward may run again."""
        for node in self.nodes:
            node._adjoint = None
        self._done = False

    def __len__(self):
        return len(self.nodes)


def _lift(tape: Tape, x) -> Node:
    if isinstance(x, Node):
        if x.tape is not tape:
            raise UsageError("operands live on different tapes")
        return x
    return tape.const(x)


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Node):
            return x.tape
    raise UsageError("at least one operand must be a Node")


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _make(tape, value, op, parents, vjp) -> Node:
    return Node(tape, value, op, parents, vjp)


# -- binary ---------------------------------------------------------------

def add(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    out = a.value + b.value
    return _make(tape, out, "add", (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    return _make(tape, a.value - b.value, "sub", (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    return _make(tape, a.value * b.value, "mul", (a, b),
                 lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)))


def div(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    if np.any(b.value == 0):
        raise GraphError("division by zero")
    out = a.value / b.value

    def vjp(g):
        return (_unbroadcast(g / b.value, a.shape),
                _unbroadcast(-g * out / b.value, b.shape))
    return _make(tape, out, "div", (a, b), vjp)


def node_binary(op: str, a, b) -> Node:
    try:
        fn = {"add": add, "sub": sub, "mul": mul, "div": div}[op]
    except KeyError:
        raise GraphError(f"unknown binary op {op!r}") from None
    return fn(a, b)


def matmul(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise GraphError("matmul expects 2-d operands")
    if a.shape[1] != b.shape[0]:
        raise GraphError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    return _make(tape, a.value @ b.value, "matmul", (a, b),
                 lambda g: (g @ b.value.T, a.value.T @ g))


# -- unary ----------------------------------------------------------------

def neg(a: Node) -> Node:
    return _make(a.tape, -a.value, "neg", (a,), lambda g: (-g,))


def exp(a: Node) -> Node:
    out = np.exp(a.value)
    return _make(a.tape, out, "exp", (a,), lambda g: (g * out,))


def log(a: Node) -> Node:
    if np.any(a.value <= 0):
        raise GraphError("log of non-positive value")
    return _make(a.tape, np.log(a.value), "log", (a,), lambda g: (g / a.value,))


def sigmoid(a: Node) -> Node:
    x = a.value
    # split by sign so neither branch overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(a.tape, out, "sigmoid", (a,), lambda g: (g * out * (1.0 - out),))


def relu(a: Node) -> Node:
    mask = a.value > 0
    a.tape._note_kink(mask, np.abs(a.value))
    return _make(a.tape, np.where(mask, a.value, 0.0), "relu", (a,), lambda g: (g * mask,))


def node_unary(op: str, a: Node) -> Node:
    try:
        fn = {"exp": exp, "log": log, "sigmoid": sigmoid, "relu": relu, "neg": neg}[op]
    except KeyError:
        raise GraphError(f"unknown unary op {op!r}") from None
    return fn(a)


def clamp(a: Node, lo: float = -np.inf, hi: float = np.inf) -> Node:
    """Clip to [lo, hi]; the gradient is zero where clipping is active."""
    inside = (a.value >= lo) & (a.value <= hi)
    dist = np.minimum(np.abs(a.value - lo), np.abs(a.value - hi))
    a.tape._note_kink(inside, dist)
    return _make(a.tape, np.clip(a.value, lo, hi), "clamp", (a,), lambda g: (g * inside,))


def safe_log(a: Node, floor: float = LOG_FLOOR) -> Node:
    return log(clamp(a, lo=floor))


# -- shape / reduction ----------------------------------------------------

def getitem(a: Node, idx) -> Node:
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)
    return _make(a.tape, a.value[idx], "getitem", (a,), vjp)


def reshape(a: Node, shape) -> Node:
    old = a.shape
    return _make(a.tape, a.value.reshape(shape), "reshape", (a,), lambda g: (g.reshape(old),))


def sum_(a: Node, axis=None, keepdims: bool = False) -> Node:
    shape = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)
    return _make(a.tape, a.value.sum(axis=axis, keepdims=keepdims), "sum", (a,), vjp)


def mean(a: Node, axis=None) -> Node:
    n = a.value.size if axis is None else a.shape[axis]
    return sum_(a, axis=axis) / float(n)


def amax(a: Node) -> Node:
    """Hard maximum of a vector; the gradient goes to the first argmax."""
    if a.value.size == 0:
        raise GraphError("max of an empty vector")
    k = int(np.argmax(a.value))
    srt = np.sort(a.value.ravel())
    gap = srt[-1] - srt[-2] if srt.size > 1 else np.inf
    a.tape._note_kink(np.array([k]), np.array([gap]))
    return getitem(a, k)


def stack(nodes: Sequence[Node]) -> Node:
    tape = _tape_of(*nodes)
    nodes = [_lift(tape, n) for n in nodes]
    return _make(tape, np.stack([n.value for n in nodes]), "stack", nodes,
                 lambda g: tuple(g[i] for i in range(len(nodes))))


def softmax(logits: Node, axis: int = -1) -> Node:
    """Softmax along ``axis`` computed from max-shifted exponentials."""
    if logits.value.size == 0:
        raise GraphError("softmax of empty logits")
    z = logits.value - logits.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)
    return _make(logits.tape, out, "softmax", (logits,), vjp)


def custom(parents: Sequence[Node], value, vjp: Callable, op: str = "custom") -> Node:
    """Register a node with a caller-supplied vector-Jacobian product."""
    tape = _tape_of(*parents)
    return _make(tape, value, op, [_lift(tape, p) for p in parents], vjp)


PRIMITIVES: dict[str, Callable] = {
    "add": add, "sub": sub, "mul": mul, "div": div,
    "exp": exp, "log": log, "sigmoid": sigmoid, "relu": relu, "neg": neg,
}


# -- backward -------------------------------------------------------------

def backward(tape: Tape, root: Node) -> dict[int, np.ndarray]:
    """Accumulate d(root)/d(node) into every node's adjoint.

    Returns a map from leaf index on the tape to its gradient.
    """
    if not isinstance(root, Node) or root.tape is not tape or tape.nodes[root.index] is not root:
        raise UsageError("root is not on this tape")
    if tape._done:
        raise UsageError("backward already ran on this tape; call zero_grad first")
    if root.value.size != 1:
        raise UsageError("root must be a scalar")
    tape._done = True
    root.adjoint = root.adjoint + 1.0
    for node in reversed(tape.nodes[: root.index + 1]):
        if node._vjp is None or node._adjoint is None or not np.any(node._adjoint):
            continue
        for parent, g in zip(node.parents, node._vjp(node.adjoint)):
            parent._adjoint = g if parent._adjoint is None else parent._adjoint + g
    return {n.index: n.adjoint for n in tape.nodes if n.op == "leaf"}


# -- gradient checking ----------------------------------------------------

@dataclass
class GradCheckReport:
    passed: bool
    worst_rel_error: float
    worst_index: int
    checked: int
    skipped: list[int] = field(default_factory=list)
    message: str = ""

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} worst_rel_error={self.worst_rel_error:.3e} at {self.worst_index} "
                f"checked={self.checked} skipped={len(self.skipped)} {self.message}").rstrip()


def grad_check(loss_builder: Callable[[Tape, Node], Node], params, step: float = 1e-5,
               tol: float = 1e-4, kink_margin: float = 1e-7,
               coords: Optional[Sequence[int]] = None) -> GradCheckReport:
    """Compare analytic gradients with central differences coordinate by coordinate.

    ``loss_builder(tape, theta)`` must build a scalar loss from the leaf
    ``theta``.  Coordinates whose perturbation moves any kink (relu, clamp,
    hard max) to a different side are skipped, as is every coordinate when the
    base point already sits within ``kink_margin`` of a kink.
    """
    if step <= 0 or tol <= 0:
        raise ValueError("step and tol must be positive")
    theta0 = np.array(params, dtype=np.float64).ravel()

    def evaluate(theta):
        tape = Tape()
        leaf = tape.leaf(theta)
        root = loss_builder(tape, leaf)
        return tape, leaf, root

    tape, leaf, root = evaluate(theta0)
    if not np.all(np.isfinite(root.value)):
        return GradCheckReport(False, np.inf, -1, 0, message="non-finite loss at base point")
    backward(tape, root)
    analytic = leaf.adjoint.copy()
    base_kinks = tape.kinks
    if tape.min_kink_distance < kink_margin:
        return GradCheckReport(True, 0.0, -1, 0, list(range(theta0.size)),
                               "base point within kink margin")

    worst, worst_i, checked, skipped = 0.0, -1, 0, []
    for i in (range(theta0.size) if coords is None else coords):
        vals = []
        same_side = True
        for sign in (1.0, -1.0):
            theta = theta0.copy()
            theta[i] += sign * step
            t, _, r = evaluate(theta)
            if not np.all(np.isfinite(r.value)):
                return GradCheckReport(False, np.inf, i, checked, skipped,
                                       f"non-finite loss when perturbing coordinate {i}")
            same_side &= t.kinks == base_kinks
            vals.append(float(r.value))
        if not same_side:
            skipped.append(i)
            continue
        numeric = (vals[0] - vals[1]) / (2 * step)
        a = float(analytic[i])
        rel = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
        checked += 1
        if rel > worst:
            worst, worst_i = rel, i
    return GradCheckReport(worst <= tol, worst, worst_i, checked, skipped)
