"""Insertion/deletion faithfulness: hard scores, soft masks, regularizers, sensitivity-n.

Hard scores rank features by contribution (ties go to the lower feature index)
and step ``s = 1..S`` one feature at a time. The soft versions replace the
top-s indicator with ``sigmoid(T * (phi_q - t_s))`` where ``t_s`` sits halfway
between the s-th and (s+1)-th largest contribution, which makes them
differentiable in ``phi``.

Anything exposing ``predict_proba(X) -> (n, L)`` works as ``model`` for the
numpy functions here.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .autodiff import NodeId, TapeGraph, _sigmoid
from .errors import NumericalError, UsageError
from .predictor import TapeModel, pick

log = logging.getLogger(__name__)

DEL_A, DEL_B, DEL_C = "a", "b", "c"
DEL_VARIANTS = (DEL_A, DEL_B, DEL_C)
DEL_C_FLOOR = 1e-12
# spans of phi below this are treated as equal to it, which keeps T finite
SPAN_FLOOR = 1e-300


def sth_val(phi: np.ndarray, s: int) -> float:
    """The s-th largest value of ``phi`` (1-based; repeated values count separately)."""
    phi = np.asarray(phi, dtype=np.float64).ravel()
    if not 1 <= s <= phi.size:
        raise UsageError(f"s must be in 1..{phi.size}, got {s}")
    return float(np.sort(phi)[::-1][s - 1])


def top_order(phi: np.ndarray) -> np.ndarray:
    """Feature indices by decreasing contribution, ties broken by lower index."""
    return np.argsort(-np.asarray(phi, dtype=np.float64).ravel(), kind="stable")


def n_steps(Q: int, fraction: float) -> int:
    """Number of insertion/deletion steps for a feature budget ``fraction * Q``."""
    if not 0 < fraction <= 1:
        raise UsageError("S fraction must be in (0, 1]")
    return max(1, int(round(fraction * Q)))


def top_s_masks(phi: np.ndarray, S: int) -> np.ndarray:
    """(S, Q) indicator: row s-1 marks the arg-top-s features."""
    order = top_order(phi)
    Q = order.size
    if not 1 <= S <= Q:
        raise UsageError(f"S must be in 1..{Q}, got {S}")
    rank = np.empty(Q, dtype=np.intp)
    rank[order] = np.arange(Q)
    return (rank[None, :] < np.arange(1, S + 1)[:, None]).astype(np.float64)


def hard_masks(x: np.ndarray, phi: np.ndarray, b: np.ndarray, s: int) -> tuple[np.ndarray, np.ndarray]:
    """Insertion input (top-s kept, rest background) and deletion input (top-s to background)."""
    keep = top_s_masks(phi, s)[-1]
    return keep * x + (1 - keep) * b, keep * b + (1 - keep) * x


def hard_curves(x, y, phi, b, S, model) -> tuple[np.ndarray, np.ndarray]:
    """Probability of ``y`` after each insertion step and each deletion step, length S each."""
    x = np.asarray(x, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    keep = top_s_masks(phi, S)
    alpha = keep * x + (1 - keep) * b
    beta = keep * b + (1 - keep) * x
    p = model.predict_proba(np.concatenate([alpha, beta]))[:, y]
    return p[:S], p[S:]


def hard_insertion(x, y, phi, b, S, model) -> float:
    return float(np.mean(hard_curves(x, y, phi, b, S, model)[0]))


def hard_deletion(x, y, phi, b, S, model) -> float:
    return float(np.mean(hard_curves(x, y, phi, b, S, model)[1]))


def hard_curves_batch(X, y, Phi, b, S, model) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample curves for many samples with a single model call; each result is (N, S)."""
    X = np.asarray(X, dtype=np.float64)
    N, Q = X.shape
    keep = np.stack([top_s_masks(phi, S) for phi in Phi])  # (N, S, Q)
    Xr, br = X[:, None, :], np.asarray(b, dtype=np.float64)[None, None, :]
    alpha = (keep * Xr + (1 - keep) * br).reshape(N * S, Q)
    beta = (keep * br + (1 - keep) * Xr).reshape(N * S, Q)
    p = model.predict_proba(np.concatenate([alpha, beta]))
    labels = np.tile(np.repeat(np.asarray(y), S), 2)
    picked = p[np.arange(2 * N * S), labels]
    return picked[: N * S].reshape(N, S), picked[N * S :].reshape(N, S)


# soft masks


def unique_count(phi: np.ndarray) -> int:
    return int(np.unique(np.asarray(phi, dtype=np.float64)).size)


def temperature(phi: np.ndarray) -> float:
    """Inverse of the mean gap between distinct contribution values; 1 when all values are equal."""
    phi = np.asarray(phi, dtype=np.float64).ravel()
    k = unique_count(phi)
    if k == 1:
        return 1.0
    return (k - 1) / max(phi.max() - phi.min(), SPAN_FLOOR)


def thresholds(phi: np.ndarray, S: int) -> np.ndarray:
    """``t_1..t_S``; ``t_s`` is the midpoint of the s-th and (s+1)-th largest values.

    ``t_Q`` has no (s+1)-th value and is put one mean gap below the minimum.
    """
    phi = np.asarray(phi, dtype=np.float64).ravel()
    Q = phi.size
    if not 1 <= S <= Q:
        raise UsageError(f"S must be in 1..{Q}, got {S}")
    desc = np.sort(phi)[::-1]
    t = np.empty(S)
    upto = min(S, Q - 1)
    t[:upto] = (desc[:upto] + desc[1 : upto + 1]) / 2
    if S == Q:
        t[Q - 1] = desc[-1] - 1.0 / temperature(phi)
    return t


def soft_masks(x, phi, b, s: int, T: float) -> tuple[np.ndarray, np.ndarray]:
    """Soft insertion and deletion inputs for step ``s`` at temperature ``T``."""
    x = np.asarray(x, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    t = thresholds(phi, s)[s - 1]
    r = _sigmoid((T * (phi - t)).reshape(1, -1))[0]
    return r * x + (1 - r) * b, r * b + (1 - r) * x


def soft_curves(x, y, phi, b, S, model, temperature_scale: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Like :func:`hard_curves` but through the soft masks (numpy only, no tape)."""
    T = temperature(phi) * temperature_scale
    pairs = [soft_masks(x, phi, b, s, T) for s in range(1, S + 1)]
    alpha = np.stack([a for a, _ in pairs])
    beta = np.stack([bb for _, bb in pairs])
    p = model.predict_proba(np.concatenate([alpha, beta]))[:, y]
    return p[:S], p[S:]


@dataclass
class SoftMaskParams:
    T: float
    t: np.ndarray
    unique_count: int


def soft_mask_params(phi: np.ndarray, S: int) -> SoftMaskParams:
    if not np.all(np.isfinite(phi)):
        raise NumericalError("explanation has non-finite entries; the model has probably diverged")
    return SoftMaskParams(temperature(phi), thresholds(phi, S), unique_count(phi))


def _soft_mask_nodes(
    g: TapeGraph,
    phi: NodeId,
    X: np.ndarray,
    b: np.ndarray,
    S: int,
    route_selection: bool = False,
) -> tuple[NodeId, NodeId]:
    """Soft insertion/deletion inputs for every (sample, step), rows sample-major: (B*S, Q).

    With ``route_selection`` the thresholds and temperature are built from
    gathered entries of ``phi`` so gradients also flow through them;
    otherwise they are constants.
    """
    P = g.forward(phi)
    B, Q = P.shape
    rows = np.repeat(np.arange(B), S * Q)
    cols = np.tile(np.arange(Q), B * S)
    phi_rep = g.gather(phi, rows, cols, (B * S, Q))
    params = [soft_mask_params(p, S) for p in P]
    if route_selection:
        T, t = _routed_T_t(g, phi, P, S)
    else:
        T = g.constant(np.repeat([[p.T] for p in params], S * Q).reshape(B * S, Q))
        t = g.constant(np.repeat(np.concatenate([p.t for p in params]), Q).reshape(B * S, Q))
    r = g.sigmoid(g.mul(T, g.sub(phi_rep, t)))
    Xr = np.repeat(np.asarray(X, dtype=np.float64), S, axis=0)
    br = np.broadcast_to(np.asarray(b, dtype=np.float64), Xr.shape)
    diff = g.constant(Xr - br)
    alpha = g.add(g.constant(br), g.mul(r, diff))
    beta = g.sub(g.constant(Xr), g.mul(r, diff))
    return alpha, beta


def _routed_T_t(g: TapeGraph, phi: NodeId, P: np.ndarray, S: int) -> tuple[NodeId, NodeId]:
    B, Q = P.shape
    # t = ca * phi[ia] + cb * phi[ib] for every (sample, step)
    ia = np.empty((B, S), dtype=np.intp)
    ib = np.empty((B, S), dtype=np.intp)
    ca = np.full((B, S), 0.5)
    cb = np.full((B, S), 0.5)
    imax = np.empty(B, dtype=np.intp)
    imin = np.empty(B, dtype=np.intp)
    counts = np.empty(B)
    for n, p in enumerate(P):
        order = top_order(p)
        imax[n], imin[n] = order[0], order[-1]
        k = unique_count(p)
        counts[n] = k
        upto = min(S, Q - 1)
        ia[n, :upto] = order[:upto]
        ib[n, :upto] = order[1 : upto + 1]
        if S == Q:
            ia[n, -1], ib[n, -1] = order[-1], order[0]
            if k == 1:
                ca[n, -1], cb[n, -1] = 1.0, 0.0
            else:
                ca[n, -1], cb[n, -1] = 1.0 + 1.0 / (k - 1), -1.0 / (k - 1)

    def spread(idx_bs):
        # (B, S) index table -> (B*S, Q) gathered node, constant along q
        r = np.repeat(np.repeat(np.arange(B), S), Q)
        c = np.repeat(idx_bs.ravel(), Q)
        return g.gather(phi, r, c, (B * S, Q))

    def const(v_bs):
        return g.constant(np.repeat(v_bs.ravel(), Q).reshape(B * S, Q))

    t = g.add(g.mul(const(ca), spread(ia)), g.mul(const(cb), spread(ib)))
    degenerate = (counts == 1).astype(float)
    span = g.sub(spread(np.repeat(imax[:, None], S, axis=1)), spread(np.repeat(imin[:, None], S, axis=1)))
    span = g.add(span, const(np.repeat(degenerate[:, None], S, axis=1)))
    floor = const(np.full((B, S), SPAN_FLOOR))
    span = g.add(floor, g.relu(g.sub(span, floor)))
    mult = np.where(counts == 1, 1.0, counts - 1)
    T = g.mul(const(np.repeat(mult[:, None], S, axis=1)), g.exp(g.scale(g.log(span), -1.0)))
    return T, t


def _per_sample_mean(g: TapeGraph, col: NodeId, B: int, S: int) -> NodeId:
    """(B*S, 1) sample-major column -> (B, 1) per-sample means over steps."""
    table = g.gather(col, np.arange(B * S), np.zeros(B * S), (B, S))
    return g.mean(table, axis=1)


def omega_ins_nodes(
    tm: TapeModel,
    phi: NodeId,
    X: np.ndarray,
    y: np.ndarray,
    b: np.ndarray,
    S: int,
    route_selection: bool = False,
) -> NodeId:
    """Per-sample insertion regularizer, (B, 1): ``-mean_s log f(alpha_soft)_y``."""
    g = tm.graph
    B = np.asarray(X).shape[0]
    alpha, _ = _soft_mask_nodes(g, phi, X, b, S, route_selection)
    logp = pick(g, tm.log_proba(alpha), np.repeat(y, S))
    return g.scale(_per_sample_mean(g, logp, B, S), -1.0)


def omega_del_nodes(
    tm: TapeModel,
    phi: NodeId,
    X: np.ndarray,
    y: np.ndarray,
    b: np.ndarray,
    S: int,
    variant: str = DEL_A,
    route_selection: bool = False,
) -> NodeId:
    """Per-sample deletion regularizer, (B, 1), in one of the three variants.

    a: ``-mean_s log(f(x)_y / f(beta_soft)_y)``
    b: ``mean_s log f(beta_soft)_y``
    c: ``-mean_s log(1 - f(beta_soft)_y)``, argument floored at 1e-12
    """
    if variant not in DEL_VARIANTS:
        raise UsageError(f"unknown deletion variant {variant!r}; expected one of {DEL_VARIANTS}")
    g = tm.graph
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.intp)
    B = X.shape[0]
    _, beta = _soft_mask_nodes(g, phi, X, b, S, route_selection)
    ys = np.repeat(y, S)
    if variant == DEL_C:
        probs = tm.proba(beta)
        L = g.forward(probs).shape[1]
        others = np.array([[l for l in range(L) if l != c] for c in ys])
        rest = g.sum(g.gather(probs, np.repeat(np.arange(B * S), L - 1), others.ravel(), (B * S, L - 1)), axis=1)
        # max(rest, floor) = floor + relu(rest - floor)
        floor = g.constant(np.full((B * S, 1), DEL_C_FLOOR))
        rest = g.add(floor, g.relu(g.sub(rest, floor)))
        return g.scale(_per_sample_mean(g, g.log(rest), B, S), -1.0)
    logp_beta = _per_sample_mean(g, pick(g, tm.log_proba(beta), ys), B, S)
    if variant == DEL_B:
        return logp_beta
    logp_x = pick(g, tm.log_proba(g.constant(X)), y)
    return g.sub(logp_beta, logp_x)


def omega_ins(tm, phi, X, y, b, S, route_selection=False) -> NodeId:
    """Batch mean of :func:`omega_ins_nodes` as a scalar node."""
    return tm.graph.mean(omega_ins_nodes(tm, phi, X, y, b, S, route_selection))


def omega_del(tm, phi, X, y, b, S, variant=DEL_A, route_selection=False) -> NodeId:
    return tm.graph.mean(omega_del_nodes(tm, phi, X, y, b, S, variant, route_selection))


# sensitivity-n


def pearson(a: np.ndarray, b: np.ndarray) -> float:
    """Pearson correlation; 0 when either side has zero variance."""
    a = _unit_scaled(a)
    b = _unit_scaled(b)
    a, b = a - a.mean(), b - b.mean()
    na, nb = np.sqrt(a @ a), np.sqrt(b @ b)
    # both sides are scaled to max |v| = 1, so a fixed threshold is relative
    if na <= 1e-12 * np.sqrt(a.size) or nb <= 1e-12 * np.sqrt(b.size):
        log.debug("zero variance in sensitivity-n correlation; returning 0")
        return 0.0
    return float(np.clip((a @ b) / (na * nb), -1.0, 1.0))


def _unit_scaled(v) -> np.ndarray:
    # dividing by the largest magnitude keeps the dot products below from overflowing
    v = np.asarray(v, dtype=np.float64)
    m = np.abs(v).max(initial=0.0)
    return v / m if m > 0 else v


def sensitivity_n(x, y, phi, b, n: int, R: int, model, rng: np.random.Generator) -> float:
    """Correlation over R random n-subsets between summed contributions and the confidence drop."""
    x = np.asarray(x, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    Q = x.size
    if not 1 <= n < Q:
        raise UsageError(f"n must be in 1..{Q - 1}, got {n}")
    if R < 2:
        raise UsageError("need at least two random subsets")
    subsets = np.stack([rng.choice(Q, size=n, replace=False) for _ in range(R)])
    drop = np.zeros((R, Q), dtype=bool)
    drop[np.arange(R)[:, None], subsets] = True
    removed = np.where(drop, b, x)
    p = model.predict_proba(np.concatenate([x[None, :], removed]))[:, y]
    return pearson((phi * drop).sum(axis=1), p[0] - p[1:])


def default_sensitivity_n(Q: int) -> int:
    return max(1, int(round(0.25 * Q)))


# model selection score


def valscore(accuracy: float, mean_ins: float, mean_del: float, eta: float = 2.0) -> float:
    """``eta * accuracy + insertion + 1 - deletion``."""
    if eta < 0:
        raise UsageError("eta must be non-negative")
    return eta * accuracy + mean_ins + 1.0 - mean_del


@dataclass
class MetricReport:
    accuracy: float
    mean_insertion: float
    mean_deletion: float
    sensitivity_n: float
    valscore: float
    eta: float
    hits: np.ndarray = field(repr=False)
    insertion: np.ndarray = field(repr=False)
    deletion: np.ndarray = field(repr=False)
    sensitivity: np.ndarray = field(repr=False)
    insertion_curve: np.ndarray = field(repr=False)
    deletion_curve: np.ndarray = field(repr=False)

    def summary(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "mean_insertion": self.mean_insertion,
            "mean_deletion": self.mean_deletion,
            "sensitivity_n": self.sensitivity_n,
            "valscore": self.valscore,
            "eta": self.eta,
        }
