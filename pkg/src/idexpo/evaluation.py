"""Whole-split evaluation: accuracy plus insertion, deletion and sensitivity-n of explanations."""

from __future__ import annotations

import numpy as np

from .explainers import DEFAULT_EPS, DEFAULT_M, LIME, explain_batch, generate_perturbations
from .metrics import MetricReport, default_sensitivity_n, hard_curves_batch, sensitivity_n, valscore
from .predictor import MlpModel
from .seeding import EVAL, SENSITIVITY, rng_for

CHUNK = 64


def explain_many(
    model: MlpModel,
    X: np.ndarray,
    labels: np.ndarray,
    b: np.ndarray,
    kind: str = LIME,
    seed: int = 0,
    indices: np.ndarray | None = None,
    M: int = DEFAULT_M,
    epsilon: float = DEFAULT_EPS,
) -> np.ndarray:
    """Explanations for every row of ``X``; perturbations keyed by (seed, sample index)."""
    indices = np.arange(len(X)) if indices is None else np.asarray(indices)
    out = []
    for start in range(0, len(X), CHUNK):
        sl = slice(start, start + CHUNK)
        psets = [
            generate_perturbations(x, b, M, rng_for(seed, EVAL, int(i)), epsilon).with_kernel(kind)
            for x, i in zip(X[sl], indices[sl])
        ]
        out.append(explain_batch(X[sl], labels[sl], model, psets))
    return np.concatenate(out)


def evaluate(
    model: MlpModel,
    X: np.ndarray,
    y: np.ndarray,
    b: np.ndarray,
    S: int,
    kind: str = LIME,
    seed: int = 0,
    eta: float = 2.0,
    indices: np.ndarray | None = None,
    M: int = DEFAULT_M,
    epsilon: float = DEFAULT_EPS,
    sens_n: int | None = None,
    R: int = 100,
    with_sensitivity: bool = True,
    explain_label: str = "predicted",
) -> MetricReport:
    """Score ``model`` and its explanations on one split.

    Explanations are for the predicted label by default (``explain_label="true"``
    explains the ground-truth label instead).
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.intp)
    indices = np.arange(len(X)) if indices is None else np.asarray(indices)
    pred = model.predict(X)
    hits = (pred == y).astype(np.float64)
    labels = pred if explain_label == "predicted" else y
    Phi = explain_many(model, X, labels, b, kind, seed, indices, M, epsilon)
    ins_c, del_c = [], []
    for start in range(0, len(X), CHUNK):
        sl = slice(start, start + CHUNK)
        a, d = hard_curves_batch(X[sl], labels[sl], Phi[sl], b, S, model)
        ins_c.append(a)
        del_c.append(d)
    ins_c, del_c = np.concatenate(ins_c), np.concatenate(del_c)
    ins, dele = ins_c.mean(axis=1), del_c.mean(axis=1)
    Q = X.shape[1]
    if with_sensitivity and Q >= 2:
        n = default_sensitivity_n(Q) if sens_n is None else sens_n
        sens = np.array([
            sensitivity_n(x, lab, phi, b, n, R, model, rng_for(seed, SENSITIVITY, int(i)))
            for x, lab, phi, i in zip(X, labels, Phi, indices)
        ])
    else:
        sens = np.full(len(X), np.nan)
    acc, mi, md = float(hits.mean()), float(ins.mean()), float(dele.mean())
    return MetricReport(
        accuracy=acc,
        mean_insertion=mi,
        mean_deletion=md,
        sensitivity_n=float(sens.mean()),
        valscore=valscore(acc, mi, md, eta),
        eta=eta,
        hits=hits,
        insertion=ins,
        deletion=dele,
        sensitivity=sens,
        insertion_curve=ins_c.mean(axis=0),
        deletion_curve=del_c.mean(axis=0),
    )
