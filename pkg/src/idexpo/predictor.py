"""MLP classifier with softmax output, plus cross-entropy and Nesterov SGD."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import NodeId, TapeGraph, _log_softmax, _softmax
from .errors import UsageError

HIDDEN = 256


@dataclass
class MlpModel:
    """Fully connected ReLU network ``Q -> hidden -> hidden -> L``.

    ``weights[k]`` has shape ``(layer_dims[k], layer_dims[k+1])`` and
    ``biases[k]`` is a ``(1, layer_dims[k+1])`` row.
    """

    layer_dims: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    data_hash: str | None = None

    @property
    def n_features(self) -> int:
        return self.layer_dims[0]

    @property
    def n_classes(self) -> int:
        return self.layer_dims[-1]

    def parameters(self) -> list[np.ndarray]:
        """Flat parameter list ``[W0, b0, W1, b1, ...]`` (the order gradients use)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "MlpModel":
        return MlpModel(
            list(self.layer_dims),
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.data_hash,
        )

    def logits(self, X: np.ndarray) -> np.ndarray:
        h = np.asarray(X, dtype=np.float64)
        if h.ndim == 1:
            h = h.reshape(1, -1)
        if h.shape[1] != self.n_features:
            raise UsageError(f"expected {self.n_features} features, got {h.shape[1]}")
        # same operation order as the tape forward, so both agree bitwise
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + np.ones((h.shape[0], 1)) @ b
            if k < last:
                h = np.maximum(h, 0.0)
        return h

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        """Class probabilities for one sample (1-D in, 1-D out) or a batch of rows."""
        X = np.asarray(X, dtype=np.float64)
        single = X.ndim == 1
        p = _softmax(self.logits(X))
        return p[0] if single else p

    def log_proba(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        single = X.ndim == 1
        lp = _log_softmax(self.logits(X))
        return lp[0] if single else lp

    def predict(self, X: np.ndarray) -> np.ndarray:
        return np.argmax(self.predict_proba(np.atleast_2d(X)), axis=1)

    # serialization

    def to_dict(self) -> dict:
        return {
            "layer_dims": list(self.layer_dims),
            "weights": [w.ravel().tolist() for w in self.weights],
            "biases": [b.ravel().tolist() for b in self.biases],
            "data_hash": self.data_hash,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MlpModel":
        dims = [int(v) for v in d["layer_dims"]]
        weights = [
            np.array(w, dtype=np.float64).reshape(dims[k], dims[k + 1])
            for k, w in enumerate(d["weights"])
        ]
        biases = [
            np.array(b, dtype=np.float64).reshape(1, dims[k + 1]) for k, b in enumerate(d["biases"])
        ]
        return cls(dims, weights, biases, d.get("data_hash"))

    def save(self, path: str | Path) -> None:
        # json writes floats with repr(), which round-trips float64 exactly
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path: str | Path) -> "MlpModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def init_model(Q: int, L: int, seed: int = 0, hidden: int = HIDDEN, depth: int = 2) -> MlpModel:
    """Uniform ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]`` init for weights and biases."""
    if Q < 1 or L < 2:
        raise UsageError(f"need Q >= 1 and L >= 2, got Q={Q}, L={L}")
    dims = [Q] + [hidden] * depth + [L]
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(rng.uniform(-bound, bound, size=(1, fan_out)))
    return MlpModel(dims, weights, biases)


def predict_proba(model: MlpModel, x: np.ndarray) -> np.ndarray:
    return model.predict_proba(x)


@dataclass
class TapeModel:
    """An :class:`MlpModel` whose parameters live on a :class:`TapeGraph`."""

    graph: TapeGraph
    model: MlpModel
    params: list[NodeId]

    @classmethod
    def attach(cls, graph: TapeGraph, model: MlpModel) -> "TapeModel":
        params = []
        for k, p in enumerate(model.parameters()):
            kind = "W" if k % 2 == 0 else "b"
            params.append(graph.parameter(p, name=f"{kind}{k // 2}"))
        return cls(graph, model, params)

    def logits(self, x: NodeId) -> NodeId:
        g = self.graph
        n = g.forward(x).shape[0]
        ones = g.constant(np.ones((n, 1)))
        h = x
        n_layers = len(self.params) // 2
        for k in range(n_layers):
            w, b = self.params[2 * k], self.params[2 * k + 1]
            h = g.add(g.matmul(h, w), g.matmul(ones, b))
            if k < n_layers - 1:
                h = g.relu(h)
        return h

    def proba(self, x: NodeId) -> NodeId:
        return self.graph.softmax(self.logits(x))

    def log_proba(self, x: NodeId) -> NodeId:
        return self.graph.log_softmax(self.logits(x))

    def gradients(self, grads: dict[NodeId, np.ndarray]) -> list[np.ndarray]:
        """Reorder a :func:`backward` result into :meth:`MlpModel.parameters` order."""
        return [grads[p] for p in self.params]


def pick(graph: TapeGraph, a: NodeId, cols) -> NodeId:
    """Column vector ``a[r, cols[r]]`` for each row ``r``."""
    cols = np.asarray(cols, dtype=np.intp).ravel()
    return graph.gather(a, np.arange(cols.size), cols, (cols.size, 1))


def cross_entropy(probs_or_logp, y: int, *, log: bool = False) -> float:
    """``-log p[y]``.

    Pass log-probabilities with ``log=True`` (the numerically preferred route;
    :meth:`MlpModel.log_proba` produces them via log-softmax).
    """
    v = np.asarray(probs_or_logp, dtype=np.float64).ravel()
    if not 0 <= y < v.size:
        raise UsageError(f"label {y} outside 0..{v.size - 1}")
    if log:
        return float(-v[y])
    # probabilities -> logits up to a constant; log-softmax of log p is log p renormalized
    with np.errstate(divide="ignore"):
        z = np.log(v)
    return float(-_log_softmax(z.reshape(1, -1))[0, y])


def cross_entropy_node(tm: TapeModel, X: np.ndarray | NodeId, y: np.ndarray, weight: float = 1.0) -> NodeId:
    """Tape node for ``weight * mean_n -log f(x_n)[y_n]``."""
    g = tm.graph
    x = g.constant(X) if isinstance(X, np.ndarray) else X
    y = np.asarray(y, dtype=np.intp)
    picked = pick(g, tm.log_proba(x), y)
    return g.scale(g.sum(picked), -weight / y.size)


@dataclass
class SgdState:
    """Nesterov momentum SGD with additive weight decay on weight matrices only."""

    learning_rate: float
    momentum: float = 0.9
    weight_decay: float = 5e-4
    nesterov: bool = True
    velocity: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise UsageError("learning_rate must be positive")


def sgd_step(model: MlpModel, state: SgdState, gradients: list[np.ndarray]) -> MlpModel:
    """One in-place update, following the usual torch.optim.SGD recurrence.

    ``g <- grad + wd * theta`` (weights only); ``v <- mu * v + g``;
    ``theta <- theta - lr * (g + mu * v)`` with Nesterov, ``theta - lr * v`` without.
    """
    params = model.parameters()
    if len(gradients) != len(params):
        raise UsageError(f"expected {len(params)} gradients, got {len(gradients)}")
    if not state.velocity:
        state.velocity = [np.zeros_like(p) for p in params]
    for k, (p, g, v) in enumerate(zip(params, gradients, state.velocity)):
        if g.shape != p.shape:
            raise UsageError(f"gradient {k} has shape {g.shape}, parameter {p.shape}")
        if state.weight_decay and k % 2 == 0:
            g = g + state.weight_decay * p
        v *= state.momentum
        v += g
        step = g + state.momentum * v if state.nesterov else v
        p -= state.learning_rate * step
    return model
