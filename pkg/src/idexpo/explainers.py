"""LIME and KernelSHAP as closed-form weighted least squares over binary masks.

For a sample ``x`` with background ``b`` we draw masks ``Z`` (M x D), build the
masked inputs, score them with the model and solve

    phi = (Z^T K Z + eps I)^-1 Z^T K f_y

where ``f_y`` holds the model's probability for label ``y`` on each masked
input and ``K`` is diagonal. The two explainers differ only in ``K``. There is
no intercept. For tabular data every feature is its own interpretable
component, so D equals the feature count Q.

Since ``Z`` and ``K`` do not depend on the model, ``W = (Z^T K Z + eps I)^-1 Z^T K``
is computed once per perturbation set and ``phi = W f_y`` is linear in the
model outputs. The tape variant (:func:`explain_tape`) uses exactly this.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy.special import comb

from .autodiff import NodeId
from .errors import NumericalError, UsageError
from .predictor import MlpModel, TapeModel, pick

LIME = "lime"
KERNELSHAP = "kernelshap"
EXPLAINERS = (LIME, KERNELSHAP)

DEFAULT_M = 200
DEFAULT_EPS = 0.01


@dataclass
class PerturbationSet:
    Z: np.ndarray
    masked_inputs: np.ndarray
    epsilon: float = DEFAULT_EPS
    kernel_weights: np.ndarray | None = None
    _operator: np.ndarray | None = field(default=None, repr=False)

    @property
    def M(self) -> int:
        return self.Z.shape[0]

    @property
    def D(self) -> int:
        return self.Z.shape[1]

    def with_kernel(self, kind: str) -> "PerturbationSet":
        """Copy carrying the kernel weights of ``kind``; ``Z`` and the masked inputs are shared."""
        return PerturbationSet(self.Z, self.masked_inputs, self.epsilon, kernel_weights(self.Z, kind))

    @property
    def operator(self) -> np.ndarray:
        """``W = (Z^T K Z + eps I)^-1 Z^T K``, shape (D, M)."""
        if self.kernel_weights is None:
            raise UsageError("perturbation set has no kernel weights; call with_kernel() first")
        if self._operator is None:
            self._operator = wls_operator(self.Z, self.kernel_weights, self.epsilon)
        return self._operator


@dataclass
class Explanation:
    contributions: np.ndarray
    label: int
    explainer_kind: str


def sample_masks(D: int, M: int, rng: np.random.Generator) -> np.ndarray:
    """Bernoulli(1/2) masks with all-zero and all-one rows redrawn."""
    if D < 2:
        raise UsageError("perturbation explainers need at least two features")
    Z = rng.integers(0, 2, size=(M, D)).astype(np.float64)
    while True:
        counts = Z.sum(axis=1)
        bad = (counts == 0) | (counts == D)
        if not bad.any():
            return Z
        Z[bad] = rng.integers(0, 2, size=(int(bad.sum()), D))


def generate_perturbations(
    x: np.ndarray,
    b: np.ndarray,
    M: int = DEFAULT_M,
    rng: np.random.Generator | None = None,
    epsilon: float = DEFAULT_EPS,
) -> PerturbationSet:
    x = np.asarray(x, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if x.shape != b.shape or x.ndim != 1:
        raise UsageError("x and b must be vectors of equal length")
    rng = np.random.default_rng() if rng is None else rng
    Z = sample_masks(x.size, M, rng)
    masked = Z * x + (1.0 - Z) * b
    return PerturbationSet(Z, masked, epsilon)


def cosine_kernel_weights(Z: np.ndarray) -> np.ndarray:
    """Cosine similarity between each mask row and the all-ones vector, ``sqrt(|z| / D)``."""
    Z = np.asarray(Z, dtype=np.float64)
    counts = Z.sum(axis=1)
    if np.any(counts == 0):
        raise UsageError("cosine kernel is undefined for an all-zero mask")
    return np.sqrt(counts / Z.shape[1])


def shapley_kernel_weights(Z: np.ndarray) -> np.ndarray:
    """``(D - 1) / (C(D, |z|) |z| (D - |z|))``; infinite at ``|z|`` in {0, D}, so those are rejected."""
    Z = np.asarray(Z, dtype=np.float64)
    D = Z.shape[1]
    counts = Z.sum(axis=1)
    if np.any((counts == 0) | (counts == D)):
        raise UsageError("Shapley kernel weight is infinite for empty or full masks")
    return (D - 1) / (comb(D, counts) * counts * (D - counts))


def kernel_weights(Z: np.ndarray, kind: str) -> np.ndarray:
    if kind == LIME:
        return cosine_kernel_weights(Z)
    if kind == KERNELSHAP:
        return shapley_kernel_weights(Z)
    raise UsageError(f"unknown explainer {kind!r}; expected one of {EXPLAINERS}")


def wls_operator(Z: np.ndarray, weights: np.ndarray, epsilon: float = DEFAULT_EPS) -> np.ndarray:
    """Matrix ``(Z^T K Z + eps I)^-1 Z^T K`` mapping model outputs to contributions."""
    Z = np.asarray(Z, dtype=np.float64)
    ZtK = Z.T * weights
    A = ZtK @ Z + epsilon * np.eye(Z.shape[1])
    tiny = np.finfo(float).eps * A.shape[0]
    try:
        c = scipy.linalg.cho_factor(A)
    except np.linalg.LinAlgError:
        if epsilon > 0:
            raise NumericalError("Cholesky failed on a regularized normal matrix") from None
    else:
        # rounding can let Cholesky through on a singular matrix with a pivot near sqrt(eps)
        d = np.diag(c[0]) ** 2
        if epsilon > 0 or d.min() > tiny * d.max():
            return scipy.linalg.cho_solve(c, ZtK)
        raise NumericalError("Z^T K Z is singular; use epsilon > 0 or more perturbations")
    lu, piv = scipy.linalg.lu_factor(A, check_finite=False)
    diag = np.abs(np.diag(lu))
    if diag.min() <= tiny * diag.max():
        raise NumericalError("Z^T K Z is singular; use epsilon > 0 or more perturbations")
    return scipy.linalg.lu_solve((lu, piv), ZtK)


def solve_wls(Z: np.ndarray, weights: np.ndarray, f: np.ndarray, epsilon: float = DEFAULT_EPS) -> np.ndarray:
    return wls_operator(Z, weights, epsilon) @ np.asarray(f, dtype=np.float64)


def explain(
    x: np.ndarray,
    y: int,
    model: MlpModel,
    pset: PerturbationSet,
    kind: str = LIME,
) -> Explanation:
    if pset.kernel_weights is None:
        pset = pset.with_kernel(kind)
    if not 0 <= y < model.n_classes:
        raise UsageError(f"label {y} outside 0..{model.n_classes - 1}")
    f = model.predict_proba(pset.masked_inputs)[:, y]
    return Explanation(pset.operator @ f, int(y), kind)


def explain_batch(
    X: np.ndarray, y: np.ndarray, model: MlpModel, psets: list[PerturbationSet]
) -> np.ndarray:
    """Contributions for many samples with one forward pass; rows of the result are ``phi_n``."""
    M = psets[0].M
    masked = np.concatenate([p.masked_inputs for p in psets])
    probs = model.predict_proba(masked)
    f = probs[np.arange(masked.shape[0]), np.repeat(np.asarray(y), M)].reshape(len(psets), M)
    return np.stack([p.operator @ f[n] for n, p in enumerate(psets)])


@dataclass
class TapeExplanation:
    """Tape nodes produced by :func:`explain_tape` for a batch of B samples.

    ``phi`` is (B, D); ``f_masked`` is the (B*M, 1) column of label
    probabilities on the masked inputs, sample-major.
    """

    phi: NodeId
    f_masked: NodeId
    psets: list[PerturbationSet]


def explain_tape(tm: TapeModel, y: np.ndarray, psets: list[PerturbationSet]) -> TapeExplanation:
    """Differentiable contributions: gradients reach the model only through the masked outputs."""
    g = tm.graph
    y = np.asarray(y, dtype=np.intp)
    B = len(psets)
    M, D = psets[0].M, psets[0].D
    masked = g.constant(np.concatenate([p.masked_inputs for p in psets]))
    f_col = pick(g, tm.proba(masked), np.repeat(y, M))
    # lay f out as one row of M values per (sample, feature) pair, then weight by W rows
    rows = np.repeat(np.arange(B * M).reshape(B, 1, M), D, axis=1)
    f_rep = g.gather(f_col, rows.ravel(), np.zeros(B * D * M), (B * D, M))
    W = g.constant(np.concatenate([p.operator for p in psets]))
    phi_col = g.sum(g.mul(f_rep, W), axis=1)
    phi = g.gather(phi_col, np.arange(B * D), np.zeros(B * D), (B, D))
    return TapeExplanation(phi, f_col, psets)
