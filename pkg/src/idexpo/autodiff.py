"""Reverse-mode differentiation over dense float64 matrices.

A :class:`TapeGraph` records operations as they are declared. Every value is a
2-D ``float64`` array; scalars are ``(1, 1)``. There is no broadcasting: both
operands of an elementwise operation must have the same shape, and row-vector
biases are expanded with a matmul against a ones column.

Forward values are computed lazily and cached. Rebinding a parameter with
:meth:`TapeGraph.bind` invalidates every cached value that depends on
parameters, so the same graph can be re-evaluated at perturbed parameters
(this is what :func:`check_gradients` does). Constants, including values
frozen with :meth:`TapeGraph.stop_gradient`, are never recomputed.

Example
-------
>>> g = TapeGraph()
>>> w = g.parameter(np.array([[1.0, -2.0]]), name="w")
>>> loss = g.sum(g.mul(w, w))
>>> backward(g, loss)[w]
array([[ 2., -4.]])
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, UsageError

NodeId = int

# Closed set of node kinds.
KINDS = (
    "parameter",
    "constant",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "relu",
    "sigmoid",
    "log",
    "exp",
    "sum",
    "mean",
    "softmax",
    "log_softmax",
    "gather",
)


@dataclass
class _Node:
    kind: str
    inputs: tuple[NodeId, ...] = ()
    attrs: dict = field(default_factory=dict)


def as_tensor(value) -> np.ndarray:
    """Coerce ``value`` to a finite 2-D float64 array (scalars become 1x1, vectors rows)."""
    arr = np.array(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise UsageError(f"tensors are 2-D, got shape {arr.shape}")
    if arr.size == 0:
        raise UsageError("tensors need at least one row and one column")
    if not np.all(np.isfinite(arr)):
        raise UsageError("tensor values must be finite")
    return arr


def _sigmoid(a: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    e = np.exp(a[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _log_softmax(a: np.ndarray) -> np.ndarray:
    shifted = a - a.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _softmax(a: np.ndarray) -> np.ndarray:
    shifted = np.exp(a - a.max(axis=1, keepdims=True))
    return shifted / shifted.sum(axis=1, keepdims=True)


class TapeGraph:
    """Append-only record of matrix operations with a reverse sweep.

    Node ids are integers in construction order, so the inputs of a node always
    have smaller ids than the node itself and the graph is acyclic by
    construction.
    """

    def __init__(self) -> None:
        self._nodes: list[_Node] = []
        self._cache: dict[NodeId, np.ndarray] = {}
        self._bound: dict[NodeId, np.ndarray] = {}
        self.names: dict[NodeId, str] = {}

    def __len__(self) -> int:
        return len(self._nodes)

    @property
    def parameters(self) -> list[NodeId]:
        return [i for i, n in enumerate(self._nodes) if n.kind == "parameter"]

    def kind(self, node: NodeId) -> str:
        return self._nodes[node].kind

    def _append(self, kind: str, inputs: tuple[NodeId, ...] = (), **attrs) -> NodeId:
        for i in inputs:
            if not 0 <= i < len(self._nodes):
                raise UsageError(f"unknown node id {i}")
        self._nodes.append(_Node(kind, inputs, attrs))
        return len(self._nodes) - 1

    # leaves

    def parameter(self, value=None, name: str | None = None) -> NodeId:
        """Declare a differentiable root, optionally bound to ``value`` right away."""
        node = self._append("parameter")
        if name is not None:
            self.names[node] = name
        if value is not None:
            self.bind(node, value)
        return node

    def bind(self, node: NodeId, value) -> None:
        if self._nodes[node].kind != "parameter":
            raise UsageError(f"node {node} is a {self._nodes[node].kind}, not a parameter")
        arr = as_tensor(value)
        old = self._bound.get(node)
        if old is not None and old.shape != arr.shape:
            raise UsageError(f"rebinding node {node} changes shape {old.shape} -> {arr.shape}")
        self._bound[node] = arr
        self._invalidate()

    def constant(self, value) -> NodeId:
        node = self._append("constant")
        self._cache[node] = as_tensor(value)
        return node

    def stop_gradient(self, node: NodeId) -> NodeId:
        """Freeze the current value of ``node`` as a constant.

        The frozen value is not recomputed when parameters are rebound.
        """
        frozen = self._append("constant", origin=node)
        self._cache[frozen] = self.forward(node).copy()
        return frozen

    def _invalidate(self) -> None:
        self._cache = {
            i: v for i, v in self._cache.items() if self._nodes[i].kind == "constant"
        }

    # operations

    def matmul(self, a: NodeId, b: NodeId) -> NodeId:
        return self._append("matmul", (a, b))

    def add(self, a: NodeId, b: NodeId) -> NodeId:
        return self._append("add", (a, b))

    def sub(self, a: NodeId, b: NodeId) -> NodeId:
        return self._append("sub", (a, b))

    def mul(self, a: NodeId, b: NodeId) -> NodeId:
        return self._append("mul", (a, b))

    def scale(self, a: NodeId, k: float) -> NodeId:
        return self._append("scale", (a,), k=float(k))

    def relu(self, a: NodeId) -> NodeId:
        return self._append("relu", (a,))

    def sigmoid(self, a: NodeId) -> NodeId:
        return self._append("sigmoid", (a,))

    def log(self, a: NodeId) -> NodeId:
        return self._append("log", (a,))

    def exp(self, a: NodeId) -> NodeId:
        return self._append("exp", (a,))

    def sum(self, a: NodeId, axis: int | None = None) -> NodeId:
        if axis not in (None, 0, 1):
            raise UsageError(f"axis must be None, 0 or 1, got {axis}")
        return self._append("sum", (a,), axis=axis)

    def mean(self, a: NodeId, axis: int | None = None) -> NodeId:
        if axis not in (None, 0, 1):
            raise UsageError(f"axis must be None, 0 or 1, got {axis}")
        return self._append("mean", (a,), axis=axis)

    def softmax(self, a: NodeId) -> NodeId:
        """Row-wise softmax."""
        return self._append("softmax", (a,))

    def log_softmax(self, a: NodeId) -> NodeId:
        """Row-wise log-softmax (log-sum-exp shifted)."""
        return self._append("log_softmax", (a,))

    def gather(self, a: NodeId, rows, cols, shape: tuple[int, int]) -> NodeId:
        """Select ``a[rows[k], cols[k]]`` for every k and lay the picks out row-major in ``shape``.

        Covers column picks, row repetition and reshaping. Index arrays are
        fixed at construction time.
        """
        rows = np.asarray(rows, dtype=np.intp).ravel()
        cols = np.asarray(cols, dtype=np.intp).ravel()
        shape = (int(shape[0]), int(shape[1]))
        if rows.shape != cols.shape or rows.size != shape[0] * shape[1]:
            raise UsageError("gather index arrays must match the output size")
        return self._append("gather", (a,), rows=rows, cols=cols, shape=shape)

    # evaluation

    def forward(self, node: NodeId) -> np.ndarray:
        """Value of ``node``, computing and caching whatever it depends on."""
        if node in self._cache:
            return self._cache[node]
        if not 0 <= node < len(self._nodes):
            raise UsageError(f"unknown node id {node}")
        pending = []
        stack = [node]
        seen = set()
        while stack:
            i = stack.pop()
            if i in self._cache or i in seen:
                continue
            seen.add(i)
            pending.append(i)
            stack.extend(self._nodes[i].inputs)
        for i in sorted(pending):
            self._cache[i] = self._evaluate(i)
        return self._cache[node]

    def _evaluate(self, i: NodeId) -> np.ndarray:
        n = self._nodes[i]
        if n.kind == "parameter":
            if i not in self._bound:
                label = self.names.get(i, str(i))
                raise ConfigurationError(f"parameter {label!r} has no value bound")
            return self._bound[i]
        xs = [self._cache[j] for j in n.inputs]
        k = n.kind
        if k == "matmul":
            a, b = xs
            if a.shape[1] != b.shape[0]:
                raise UsageError(f"matmul shapes {a.shape} and {b.shape} do not align")
            return a @ b
        if k in ("add", "sub", "mul"):
            a, b = xs
            if a.shape != b.shape:
                raise UsageError(f"{k} needs equal shapes, got {a.shape} and {b.shape}")
            return a + b if k == "add" else a - b if k == "sub" else a * b
        a = xs[0]
        if k == "scale":
            return n.attrs["k"] * a
        if k == "relu":
            return np.maximum(a, 0.0)
        if k == "sigmoid":
            return _sigmoid(a)
        if k == "log":
            with np.errstate(divide="ignore"):
                return np.log(a)
        if k == "exp":
            return np.exp(a)
        if k in ("sum", "mean"):
            axis = n.attrs["axis"]
            red = a.sum if k == "sum" else a.mean
            if axis is None:
                return np.array([[red()]])
            return red(axis=axis, keepdims=True)
        if k == "softmax":
            return _softmax(a)
        if k == "log_softmax":
            return _log_softmax(a)
        if k == "gather":
            return a[n.attrs["rows"], n.attrs["cols"]].reshape(n.attrs["shape"])
        raise AssertionError(f"unhandled node kind {k}")

    def backward(self, loss: NodeId) -> dict[NodeId, np.ndarray]:
        """Gradients of the scalar ``loss`` for every parameter node.

        Parameters the loss does not depend on get zero gradients; constants get none.
        """
        value = self.forward(loss)
        if value.shape != (1, 1):
            raise UsageError(f"loss must be a 1x1 scalar node, got shape {value.shape}")
        grads: dict[NodeId, np.ndarray] = {loss: np.ones((1, 1))}
        for i in range(loss, -1, -1):
            g = grads.pop(i, None) if self._nodes[i].kind != "parameter" else grads.get(i)
            if g is None or self._nodes[i].kind in ("parameter", "constant"):
                continue
            for j, gj in zip(self._nodes[i].inputs, self._vjp(i, g)):
                if gj is None:
                    continue
                if j in grads:
                    grads[j] = grads[j] + gj
                else:
                    grads[j] = gj
        out = {}
        for p in self.parameters:
            if p > loss:
                continue
            out[p] = grads.get(p, np.zeros_like(self.forward(p)))
        return out

    def _vjp(self, i: NodeId, g: np.ndarray) -> list[np.ndarray | None]:
        n = self._nodes[i]
        k = n.kind
        xs = [self._cache[j] for j in n.inputs]
        y = self._cache[i]
        if k == "matmul":
            a, b = xs
            return [g @ b.T, a.T @ g]
        if k == "add":
            return [g, g]
        if k == "sub":
            return [g, -g]
        if k == "mul":
            a, b = xs
            return [g * b, g * a]
        a = xs[0]
        if k == "scale":
            return [n.attrs["k"] * g]
        if k == "relu":
            return [g * (a > 0)]
        if k == "sigmoid":
            return [g * y * (1.0 - y)]
        if k == "log":
            return [g / a]
        if k == "exp":
            return [g * y]
        if k == "sum":
            return [np.broadcast_to(g, a.shape).copy()]
        if k == "mean":
            axis = n.attrs["axis"]
            count = a.size if axis is None else a.shape[axis]
            return [np.broadcast_to(g / count, a.shape).copy()]
        if k == "softmax":
            return [y * (g - (g * y).sum(axis=1, keepdims=True))]
        if k == "log_softmax":
            return [g - np.exp(y) * g.sum(axis=1, keepdims=True)]
        if k == "gather":
            out = np.zeros_like(a)
            np.add.at(out, (n.attrs["rows"], n.attrs["cols"]), g.ravel())
            return [out]
        raise AssertionError(f"unhandled node kind {k}")


def forward(graph: TapeGraph, node: NodeId) -> np.ndarray:
    return graph.forward(node)


def backward(graph: TapeGraph, loss: NodeId) -> dict[NodeId, np.ndarray]:
    return graph.backward(loss)


@dataclass
class GradientReport:
    """Outcome of :func:`check_gradients`.

    ``errors`` maps each parameter node to the normwise relative error
    ``max|a - n| / max(max|a|, max|n|, floor)`` between its analytic gradient
    ``a`` and the central difference ``n``. Elementwise ratios are not used:
    entries far below the tensor's scale are dominated by difference roundoff.
    ``floor`` keeps parameters whose true gradient is zero from dividing noise by noise.
    """

    errors: dict[NodeId, float]
    tolerance: float
    analytic: dict[NodeId, np.ndarray]
    numeric: dict[NodeId, np.ndarray]

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance


def numeric_gradients(graph: TapeGraph, loss: NodeId, step: float = 1e-5) -> dict[NodeId, np.ndarray]:
    """Central finite differences of ``loss`` for every parameter, holding constants fixed."""
    if step <= 0:
        raise UsageError("step must be positive")
    out = {}
    for p in graph.parameters:
        if p > loss:
            continue
        base = graph.forward(p).copy()
        grad = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            shifted = base.copy()
            shifted[idx] = base[idx] + step
            graph.bind(p, shifted)
            up = graph.forward(loss)[0, 0]
            shifted[idx] = base[idx] - step
            graph.bind(p, shifted)
            down = graph.forward(loss)[0, 0]
            grad[idx] = (up - down) / (2.0 * step)
        graph.bind(p, base)
        out[p] = grad
    return out


def check_gradients(
    graph: TapeGraph,
    loss: NodeId,
    step: float = 1e-5,
    tolerance: float = 1e-6,
    floor: float = 1e-6,
) -> GradientReport:
    """Compare :func:`backward` against central finite differences."""
    analytic = backward(graph, loss)
    numeric = numeric_gradients(graph, loss, step)
    graph.forward(loss)
    errors = {}
    for p, a in analytic.items():
        n = numeric[p]
        denom = max(np.abs(a).max(), np.abs(n).max(), floor)
        errors[p] = float(np.abs(a - n).max() / denom)
    return GradientReport(errors, tolerance, analytic, numeric)
