"""Fine-tuning with explanation regularizers, early stopping and grid selection.

Methods:

``id-expo``  cross-entropy + lambda12 * (insertion + deletion regularizers) + lambda3 * ||phi||^2
``expo-f``   cross-entropy + w * weighted residual of the local linear fit
``expo-s``   cross-entropy + w * weighted squared change of f(x)_y under masking
``ce-only``  cross-entropy alone

All losses are averaged over the mini-batch. Explanations are recomputed on
every visit of a sample with perturbations keyed by (seed, sample, epoch).
"""

from __future__ import annotations

import itertools
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .autodiff import NodeId, TapeGraph
from .data import PreparedSplit
from .errors import NumericalError, UsageError
from .evaluation import evaluate
from .explainers import DEFAULT_EPS, DEFAULT_M, EXPLAINERS, LIME, PerturbationSet, explain_tape, generate_perturbations
from .metrics import DEL_A, DEL_VARIANTS, n_steps, omega_del_nodes, omega_ins_nodes, valscore
from .predictor import MlpModel, SgdState, TapeModel, cross_entropy_node, init_model, pick, sgd_step
from .seeding import INIT, PERTURB, SHUFFLE, rng_for

log = logging.getLogger(__name__)

ID_EXPO, EXPO_S, EXPO_F, CE_ONLY = "id-expo", "expo-s", "expo-f", "ce-only"
METHODS = (ID_EXPO, EXPO_S, EXPO_F, CE_ONLY)

# samples per tape graph; gradients of chunks are summed into one mini-batch step
CHUNK = 32


@dataclass
class TrainConfig:
    method: str = ID_EXPO
    explainer: str = LIME
    lambda12: float = 0.01
    lambda3: float = 0.0
    expo_weight: float = 0.01
    s_fraction: float = 0.5
    del_variant: str = DEL_A
    eta: float = 2.0
    learning_rate: float = 0.01
    batch_size: int = 128
    max_epochs: int = 200
    patience: int = 20
    seed: int = 0
    M: int = DEFAULT_M
    epsilon: float = DEFAULT_EPS
    route_selection: bool = False
    momentum: float = 0.9
    weight_decay: float = 5e-4
    nesterov: bool = True
    stop_eta: float = 2.0
    lr_grid: tuple = (0.01, 0.001)
    lambda12_grid: tuple = (0.1, 0.01, 0.001)
    lambda3_grid: tuple = (0.001, 0.0)
    expo_grid: tuple = (0.1, 0.01, 0.001)

    def __post_init__(self) -> None:
        if self.method not in METHODS:
            raise UsageError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.explainer not in EXPLAINERS:
            raise UsageError(f"unknown explainer {self.explainer!r}; expected one of {EXPLAINERS}")
        if self.del_variant not in DEL_VARIANTS:
            raise UsageError(f"unknown deletion variant {self.del_variant!r}")
        if self.lambda12 < 0 or self.lambda3 < 0 or self.expo_weight < 0:
            raise UsageError("regularizer weights must be non-negative")
        if not self.patience < self.max_epochs:
            raise UsageError("patience must be smaller than max_epochs")
        for grid in (self.lr_grid, self.lambda12_grid, self.lambda3_grid, self.expo_grid):
            if len(grid) == 0:
                raise UsageError("hyperparameter grids must be non-empty")
        for name in ("lr_grid", "lambda12_grid", "lambda3_grid", "expo_grid"):
            setattr(self, name, tuple(float(v) for v in getattr(self, name)))

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def grid(self) -> list["TrainConfig"]:
        """Every hyperparameter combination relevant to this config's method."""
        if self.method == ID_EXPO:
            combos = itertools.product(self.lr_grid, self.lambda12_grid, self.lambda3_grid)
            return [replace(self, learning_rate=lr, lambda12=a, lambda3=c) for lr, a, c in combos]
        if self.method in (EXPO_S, EXPO_F):
            combos = itertools.product(self.lr_grid, self.expo_grid)
            return [replace(self, learning_rate=lr, expo_weight=w) for lr, w in combos]
        return [replace(self, learning_rate=lr) for lr in self.lr_grid]


# losses


def _perturbations(X, b, indices, cfg: TrainConfig, epoch: int) -> list[PerturbationSet]:
    return [
        generate_perturbations(x, b, cfg.M, rng_for(cfg.seed, PERTURB, int(i), epoch), cfg.epsilon).with_kernel(cfg.explainer)
        for x, i in zip(X, indices)
    ]


def _needs_explanations(cfg: TrainConfig) -> bool:
    if cfg.method == ID_EXPO:
        return cfg.lambda12 > 0 or cfg.lambda3 > 0
    if cfg.method in (EXPO_S, EXPO_F):
        return cfg.expo_weight > 0
    return False


def expo_f_nodes(tm: TapeModel, expl) -> NodeId:
    """Per-sample fidelity term, (B, 1): ``mean_m K_m (f(x_m)_y - phi . z_m)^2``."""
    g = tm.graph
    psets = expl.psets
    B, M, D = len(psets), psets[0].M, psets[0].D
    phi_rep = g.gather(expl.phi, np.repeat(np.arange(B), M * D), np.tile(np.arange(D), B * M), (B * M, D))
    Z = g.constant(np.concatenate([p.Z for p in psets]))
    linear = g.sum(g.mul(phi_rep, Z), axis=1)
    return _kernel_weighted_mean_sq(g, g.sub(expl.f_masked, linear), psets)


def expo_s_nodes(tm: TapeModel, X: np.ndarray, y: np.ndarray, expl) -> NodeId:
    """Per-sample stability term, (B, 1): ``mean_m K_m (f(x_m)_y - f(x)_y)^2``."""
    g = tm.graph
    psets = expl.psets
    B, M = len(psets), psets[0].M
    f_x = pick(g, tm.proba(g.constant(X)), y)
    f_x_rep = g.gather(f_x, np.repeat(np.arange(B), M), np.zeros(B * M), (B * M, 1))
    return _kernel_weighted_mean_sq(g, g.sub(expl.f_masked, f_x_rep), psets)


def _kernel_weighted_mean_sq(g: TapeGraph, resid: NodeId, psets) -> NodeId:
    B, M = len(psets), psets[0].M
    K = g.constant(np.concatenate([p.kernel_weights for p in psets]).reshape(-1, 1))
    weighted = g.mul(K, g.mul(resid, resid))
    table = g.gather(weighted, np.arange(B * M), np.zeros(B * M), (B, M))
    return g.mean(table, axis=1)


def expo_f_reg(tm: TapeModel, expl) -> NodeId:
    return tm.graph.mean(expo_f_nodes(tm, expl))


def expo_s_reg(tm: TapeModel, X, y, expl) -> NodeId:
    return tm.graph.mean(expo_s_nodes(tm, X, y, expl))


def batch_loss(
    tm: TapeModel,
    X: np.ndarray,
    y: np.ndarray,
    b: np.ndarray,
    cfg: TrainConfig,
    psets: list[PerturbationSet] | None = None,
    denominator: int | None = None,
) -> NodeId:
    """Scalar loss node ``(1/denominator) * sum_n per-sample objective`` for the configured method.

    ``denominator`` defaults to the number of rows; training passes the full
    mini-batch size so that chunk losses add up to the batch mean.
    """
    g = tm.graph
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.intp)
    denom = X.shape[0] if denominator is None else denominator
    loss = cross_entropy_node(tm, X, y, weight=X.shape[0] / denom)
    if not _needs_explanations(cfg):
        return loss
    if psets is None:
        raise UsageError(f"{cfg.method} needs perturbation sets")
    expl = explain_tape(tm, y, psets)
    terms: list[tuple[float, NodeId]] = []
    if cfg.method == ID_EXPO:
        S = n_steps(X.shape[1], cfg.s_fraction)
        if cfg.lambda12 > 0:
            terms.append((cfg.lambda12, omega_ins_nodes(tm, expl.phi, X, y, b, S, cfg.route_selection)))
            terms.append((cfg.lambda12, omega_del_nodes(tm, expl.phi, X, y, b, S, cfg.del_variant, cfg.route_selection)))
        if cfg.lambda3 > 0:
            terms.append((cfg.lambda3, g.sum(g.mul(expl.phi, expl.phi), axis=1)))
    elif cfg.method == EXPO_F:
        terms.append((cfg.expo_weight, expo_f_nodes(tm, expl)))
    elif cfg.method == EXPO_S:
        terms.append((cfg.expo_weight, expo_s_nodes(tm, X, y, expl)))
    for weight, per_sample in terms:
        loss = g.add(loss, g.scale(g.sum(per_sample), weight / denom))
    return loss


def idexpo_loss(tm: TapeModel, X, y, b, cfg: TrainConfig, psets=None) -> NodeId:
    if cfg.method != ID_EXPO:
        raise UsageError("idexpo_loss needs method='id-expo'")
    return batch_loss(tm, X, y, b, cfg, psets)


def batch_gradients(
    model: MlpModel,
    X: np.ndarray,
    y: np.ndarray,
    indices: np.ndarray,
    b: np.ndarray,
    cfg: TrainConfig,
    epoch: int,
) -> tuple[float, list[np.ndarray]]:
    """Mini-batch loss and parameter gradients, built chunk by chunk."""
    total = 0.0
    grads = None
    n = X.shape[0]
    for start in range(0, n, CHUNK):
        sl = slice(start, start + CHUNK)
        g = TapeGraph()
        tm = TapeModel.attach(g, model)
        psets = _perturbations(X[sl], b, indices[sl], cfg, epoch) if _needs_explanations(cfg) else None
        loss = batch_loss(tm, X[sl], y[sl], b, cfg, psets, denominator=n)
        total += float(g.forward(loss)[0, 0])
        chunk_grads = tm.gradients(g.backward(loss))
        grads = chunk_grads if grads is None else [a + c for a, c in zip(grads, chunk_grads)]
    return total, grads


# training loops


class EarlyStopper:
    """Tracks the best score; ``update`` returns True once ``patience`` epochs pass without a strict gain."""

    def __init__(self, patience: int) -> None:
        self.patience = patience
        self.best = -np.inf
        self.best_epoch = -1
        self.stale = 0

    def update(self, score: float, epoch: int) -> bool:
        if score > self.best:
            self.best, self.best_epoch, self.stale = score, epoch, 0
        else:
            self.stale += 1
        return self.stale >= self.patience


@dataclass
class RunRecord:
    config: dict
    history: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    status: str = "ok"
    best_model: MlpModel | None = field(default=None, repr=False)
    test: dict | None = None
    pretrained_hash: str | None = None
    dataset_hash: str | None = None
    split_index: int | None = None

    @property
    def best(self) -> dict:
        for h in self.history:
            if h["epoch"] == self.best_epoch:
                return h
        raise UsageError("run has no recorded best epoch")

    def selection_score(self, eta: float) -> float:
        h = self.best
        return valscore(h["accuracy"], h["insertion"], h["deletion"], eta)

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "history": self.history,
            "best_epoch": self.best_epoch,
            "status": self.status,
            "test": self.test,
            "pretrained_hash": self.pretrained_hash,
            "dataset_hash": self.dataset_hash,
            "split_index": self.split_index,
        }

    @classmethod
    def from_dict(cls, d: dict, model: MlpModel | None = None) -> "RunRecord":
        return cls(
            d["config"], d["history"], d["best_epoch"], d["status"], model,
            d.get("test"), d.get("pretrained_hash"), d.get("dataset_hash"), d.get("split_index"),
        )

    def save(self, directory: str | Path) -> dict[str, Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = {"record": directory / "run.json", "epochs": directory / "epochs.csv"}
        paths["record"].write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        lines = ["epoch,valscore,acc,ins,del"]
        for h in self.history:
            lines.append(",".join([str(h["epoch"])] + [f"{h[k]:.17g}" for k in ("valscore", "accuracy", "insertion", "deletion")]))
        paths["epochs"].write_text("\n".join(lines) + "\n")
        if self.best_model is not None:
            paths["checkpoint"] = directory / "checkpoint.json"
            self.best_model.save(paths["checkpoint"])
        return paths


def model_hash(model: MlpModel) -> str:
    import hashlib

    return hashlib.sha256(json.dumps(model.to_dict()).encode()).hexdigest()


def _validation(model: MlpModel, data: PreparedSplit, cfg: TrainConfig):
    Xv, yv = data.part("validation")
    S = n_steps(data.Q, cfg.s_fraction)
    return evaluate(
        model, Xv, yv, data.b, S, cfg.explainer, cfg.seed, cfg.stop_eta,
        indices=data.split.validation, M=cfg.M, epsilon=cfg.epsilon, with_sensitivity=False,
    )


def finetune(
    pretrained: MlpModel,
    data: PreparedSplit,
    cfg: TrainConfig,
    evaluate_test: bool = False,
    on_step=None,
) -> RunRecord:
    """Mini-batch SGD on the configured objective, keeping the best-validation-valscore checkpoint.

    ``on_step(epoch, step, model)`` is called after every parameter update.
    """
    if pretrained.n_features != data.Q or pretrained.n_classes != data.L:
        raise UsageError(
            f"model is {pretrained.n_features}->{pretrained.n_classes}, data is {data.Q}->{data.L}"
        )
    model = pretrained.copy()
    state = SgdState(cfg.learning_rate, cfg.momentum, cfg.weight_decay, cfg.nesterov)
    Xt, yt = data.part("train")
    idx = data.split.train
    rec = RunRecord(
        cfg.to_dict(), pretrained_hash=model_hash(pretrained),
        dataset_hash=data.dataset.hash, split_index=data.split.split_index,
    )
    stopper = EarlyStopper(cfg.patience)
    best_model = None
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng_for(cfg.seed, SHUFFLE, epoch).permutation(len(Xt))
        diverged = False
        for start in range(0, len(order), cfg.batch_size):
            sel = order[start : start + cfg.batch_size]
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    loss, grads = batch_gradients(model, Xt[sel], yt[sel], idx[sel], data.b, cfg, epoch)
            except NumericalError:
                diverged = True
                break
            if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
                diverged = True
                break
            sgd_step(model, state, grads)
            if on_step is not None:
                on_step(epoch, start // cfg.batch_size, model)
        if diverged or not all(np.all(np.isfinite(p)) for p in model.parameters()):
            log.warning("run diverged in epoch %d (%s)", epoch, cfg.method)
            rec.status = "diverged"
            break
        with np.errstate(over="ignore", invalid="ignore"):
            rep = _validation(model, data, cfg)
        if not np.isfinite(rep.valscore):
            log.warning("validation score is not finite in epoch %d (%s)", epoch, cfg.method)
            rec.status = "diverged"
            break
        rec.history.append({
            "epoch": epoch,
            "valscore": rep.valscore,
            "accuracy": rep.accuracy,
            "insertion": rep.mean_insertion,
            "deletion": rep.mean_deletion,
        })
        log.info("%s epoch %d valscore %.4f acc %.4f ins %.4f del %.4f", cfg.method, epoch,
                 rep.valscore, rep.accuracy, rep.mean_insertion, rep.mean_deletion)
        stop = stopper.update(rep.valscore, epoch)
        if stopper.best_epoch == epoch:
            best_model = model.copy()
        if stop:
            break
    rec.best_epoch = stopper.best_epoch
    rec.best_model = best_model
    if evaluate_test and best_model is not None:
        rec.test = test_report(best_model, data, cfg)
    return rec


def test_report(model: MlpModel, data: PreparedSplit, cfg: TrainConfig) -> dict:
    Xs, ys = data.part("test")
    S = n_steps(data.Q, cfg.s_fraction)
    rep = evaluate(
        model, Xs, ys, data.b, S, cfg.explainer, cfg.seed, cfg.eta,
        indices=data.split.test, M=cfg.M, epsilon=cfg.epsilon,
    )
    return rep.summary()


def pretrain(
    data: PreparedSplit,
    seed: int = 0,
    learning_rate: float = 0.01,
    max_epochs: int = 200,
    patience: int = 20,
    batch_size: int = 128,
    hidden: int = 256,
) -> tuple[MlpModel, list[dict]]:
    """Plain cross-entropy training from scratch, early-stopped on validation accuracy."""
    model = init_model(data.Q, data.L, int(rng_for(seed, INIT).integers(2**31)), hidden=hidden)
    state = SgdState(learning_rate)
    cfg = TrainConfig(method=CE_ONLY, seed=seed, max_epochs=max(max_epochs, patience + 1), patience=patience)
    Xt, yt = data.part("train")
    Xv, yv = data.part("validation")
    stopper = EarlyStopper(patience)
    best, history = model.copy(), []
    for epoch in range(1, max_epochs + 1):
        order = rng_for(seed, SHUFFLE, epoch).permutation(len(Xt))
        for start in range(0, len(order), batch_size):
            sel = order[start : start + batch_size]
            _, grads = batch_gradients(model, Xt[sel], yt[sel], data.split.train[sel], data.b, cfg, epoch)
            sgd_step(model, state, grads)
        acc = float(np.mean(model.predict(Xv) == yv))
        history.append({"epoch": epoch, "accuracy": acc})
        stop = stopper.update(acc, epoch)
        if stopper.best_epoch == epoch:
            best = model.copy()
        if stop:
            break
    best.data_hash = data.dataset.hash
    return best, history


def select_best(records: list[RunRecord], eta: float) -> RunRecord:
    """Argmax of validation valscore at ``eta``; ties go to higher accuracy, then lower lambda12."""
    usable = [r for r in records if r.best_epoch >= 0]
    if not usable:
        raise UsageError("no completed runs to select from")

    def key(r: RunRecord):
        return (r.selection_score(eta), r.best["accuracy"], -r.config.get("lambda12", 0.0))

    return max(usable, key=key)


def grid_select(
    pretrained: MlpModel,
    data: PreparedSplit,
    cfg: TrainConfig,
    eta: float | None = None,
    evaluate_test: bool = True,
) -> tuple[RunRecord, list[RunRecord]]:
    """Train every grid cell and return the winner under ``eta`` together with all runs."""
    eta = cfg.eta if eta is None else eta
    records = [finetune(pretrained, data, c, evaluate_test=False) for c in cfg.grid()]
    best = select_best(records, eta)
    if evaluate_test and best.best_model is not None and best.test is None:
        best.test = test_report(best.best_model, data, replace(cfg, **{k: best.config[k] for k in ("learning_rate", "lambda12", "lambda3", "expo_weight")}, eta=eta))
    return best, records
