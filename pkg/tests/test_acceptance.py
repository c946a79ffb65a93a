"""One test per acceptance criterion; each records a PASS/FAIL line printed after the run.

Criteria 5 and 6 need the real wine-quality-red table. Point ``IDEXPO_WINE_CSV``
at it (header, 12 numeric features, integer quality label last) or place it
at ``data/wine-quality-red.csv`` in the repository root. Without it those two
criteria fail; their messages also report the same checks on a synthetic
stand-in of identical shape, which is informative but not a substitute.
"""

import math
import os
import time
import warnings
from pathlib import Path

import numpy as np
import pytest
from scipy import stats

import conftest
from conftest import LinearScorer
from idexpo import training
from idexpo.autodiff import TapeGraph, check_gradients
from idexpo.cli import run_command
from idexpo.data import load_csv, make_split, prepare, save_csv, synthetic_dataset
from idexpo.experiment import run_protocol
from idexpo.explainers import explain, generate_perturbations, kernel_weights, sample_masks, solve_wls
from idexpo.metrics import (
    hard_curves,
    hard_deletion,
    hard_insertion,
    omega_del,
    omega_ins,
    sensitivity_n,
    soft_curves,
    soft_masks,
    temperature,
    thresholds,
    valscore,
)
from idexpo.predictor import TapeModel, init_model
from idexpo.report import paired_t_test, report
from idexpo.training import RunRecord, TrainConfig, batch_gradients, batch_loss, finetune, grid_select

REPO = Path(__file__).resolve().parents[1]


def _record(key: str, ok: bool, detail: str) -> None:
    conftest.ACCEPTANCE[key] = (bool(ok), detail)
    assert ok, detail


def _wine_path() -> Path | None:
    for candidate in (os.environ.get("IDEXPO_WINE_CSV"), REPO / "data" / "wine-quality-red.csv"):
        if candidate and Path(candidate).is_file():
            return Path(candidate)
    return None


def _wine_shaped():
    return synthetic_dataset(1599, 12, 6, seed=0, informative=5, name="wine-shaped")


# 1


def test_criterion_1_gradient_correctness():
    rng = np.random.default_rng(0)
    model = init_model(6, 3, seed=0, hidden=8)
    X = rng.normal(size=(4, 6))
    y = np.array([0, 1, 2, 1])
    b = np.zeros(6)
    variants = {
        "ID-ExpO Del-A": TrainConfig(lambda12=1.0, lambda3=0.1, del_variant="a", M=20),
        "ID-ExpO Del-B": TrainConfig(lambda12=1.0, lambda3=0.1, del_variant="b", M=20),
        "ID-ExpO Del-C": TrainConfig(lambda12=1.0, lambda3=0.1, del_variant="c", M=20),
        "ExpO-F": TrainConfig(method="expo-f", expo_weight=1.0, M=20),
        "ExpO-S": TrainConfig(method="expo-s", expo_weight=1.0, M=20),
    }
    start = time.perf_counter()
    errors = {}
    for name, cfg in variants.items():
        assert cfg.explainer == "lime"
        psets = [generate_perturbations(x, b, cfg.M, np.random.default_rng(n)).with_kernel(cfg.explainer) for n, x in enumerate(X)]
        g = TapeGraph()
        tm = TapeModel.attach(g, model)
        loss = batch_loss(tm, X, y, b, cfg, psets)
        errors[name] = check_gradients(g, loss, step=1e-5, tolerance=1e-4).max_error
    elapsed = time.perf_counter() - start
    worst = max(errors.values())
    detail = f"max relative error {worst:.2e} (" + ", ".join(f"{k} {v:.1e}" for k, v in errors.items()) + f"), {elapsed:.1f} s"
    _record("1 gradient correctness", worst < 1e-4 and elapsed < 60, detail)


# 2


def test_criterion_2_soft_to_hard_consistency():
    rng = np.random.default_rng(2)
    worst, cases = 0.0, 0
    while cases < 100:
        Q = int(rng.integers(2, 13))
        L = int(rng.integers(2, 6))
        model = init_model(Q, L, seed=cases, hidden=16)
        x, b, phi = rng.normal(size=(3, Q))
        if np.unique(phi).size < Q:
            continue
        y = int(rng.integers(L))
        S = int(rng.integers(1, Q + 1))
        hi, hd = hard_curves(x, y, phi, b, S, model)
        si, sd = soft_curves(x, y, phi, b, S, model, temperature_scale=1000)
        worst = max(worst, abs(hi.mean() - si.mean()), abs(hd.mean() - sd.mean()))
        cases += 1
    _record("2 soft-to-hard consistency", worst <= 1e-3, f"{cases} cases, largest insertion/deletion gap {worst:.2e}")


# 3


def test_criterion_3_wls_oracle():
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(100):
        D = int(rng.integers(2, 11))
        M = int(rng.integers(D + 1, 51))
        Z = sample_masks(D, M, rng)
        k = kernel_weights(Z, str(rng.choice(["lime", "kernelshap"])))
        f = rng.uniform(size=M)
        eps = 0.01
        # independent route: weighted normal equations solved by a general LU solver
        ZtK = Z.T * k
        oracle = np.linalg.solve(ZtK @ Z + eps * np.eye(D), ZtK @ f)
        worst = max(worst, np.abs(solve_wls(Z, k, f, eps) - oracle).max())
    recover = 0.0
    fits = 0
    while fits < 100:
        D = int(rng.integers(2, 11))
        Z = sample_masks(D, 50, rng)
        if np.linalg.matrix_rank(Z) < D:
            continue
        c = rng.normal(size=D)
        recover = max(recover, np.abs(solve_wls(Z, kernel_weights(Z, "kernelshap"), Z @ c, 0.0) - c).max())
        fits += 1
    ok = worst <= 1e-8 and recover <= 1e-6
    _record("3 WLS oracle", ok, f"max deviation from normal equations {worst:.1e}; linear recovery error {recover:.1e}")


# 4


def _fuzz_phi(mode, Q, rng):
    return {
        "normal": lambda: rng.normal(size=Q),
        "equal": lambda: np.full(Q, rng.normal()),
        "two-valued": lambda: rng.choice([0.0, 1.0], Q),
        "huge": lambda: rng.normal(size=Q) * 1e300,
        "tiny": lambda: rng.normal(size=Q) * 1e-300,
        "subnormal": lambda: rng.integers(-3, 4, Q) * 5e-324,
        "ties": lambda: np.round(rng.normal(size=Q)),
        "zeros": lambda: np.zeros(Q),
    }[mode]()


def test_criterion_4_degenerate_input_robustness():
    rng = np.random.default_rng(4)
    modes = ["normal", "equal", "two-valued", "huge", "tiny", "subnormal", "ties", "zeros"]
    models = {}
    failures = []
    counts = {"s=Q": 0, "b=x": 0, "Q=1": 0, "all-equal": 0, "training loss": 0}
    n_cases = 10_000
    with warnings.catch_warnings():
        warnings.simplefilter("error")  # an overflow or invalid-value warning counts as a failure too
        for case in range(n_cases):
            Q = int(rng.integers(1, 9))
            L = int(rng.integers(2, 5))
            scale = 30.0 if case % 5 == 0 else 1.0
            key = (Q, L, scale)
            if key not in models:
                m = init_model(Q, L, seed=len(models), hidden=4)
                for w in m.weights:
                    w *= scale
                models[key] = m
            model = models[key]
            x = rng.normal(size=Q) * rng.choice([1.0, 100.0])
            same = rng.random() < 0.3
            b = x.copy() if same else rng.normal(size=Q)
            mode = modes[case % len(modes)]
            phi = _fuzz_phi(mode, Q, rng)
            if Q >= 2 and case % 10 == 1:
                phi = explain(x, 0, model, generate_perturbations(x, b, 10, rng), "kernelshap").contributions
            S = Q if rng.random() < 0.4 else int(rng.integers(1, Q + 1))
            y = int(rng.integers(L))
            counts["s=Q"] += S == Q
            counts["b=x"] += same
            counts["Q=1"] += Q == 1
            counts["all-equal"] += np.unique(phi).size == 1
            try:
                vals = [hard_insertion(x, y, phi, b, S, model), hard_deletion(x, y, phi, b, S, model),
                        temperature(phi), *thresholds(phi, S)]
                for curve in soft_curves(x, y, phi, b, S, model):
                    vals.extend(curve)
                for s in range(1, S + 1):
                    for arr in soft_masks(x, phi, b, s, temperature(phi)):
                        vals.extend(arr)
                if Q >= 2:
                    vals.append(sensitivity_n(x, y, phi, b, int(rng.integers(1, Q)), 5, model, rng))
                vals.append(valscore(rng.uniform(), vals[0], vals[1], 2.0))
                g = TapeGraph()
                tm = TapeModel.attach(g, model)
                P = g.parameter(phi[None, :])
                route = bool(case % 2)
                nodes = [omega_ins(tm, P, x[None, :], np.array([y]), b, S, route)]
                nodes += [omega_del(tm, P, x[None, :], np.array([y]), b, S, v, route) for v in "abc"]
                for node in nodes:
                    vals.append(g.forward(node)[0, 0])
                    for grad in g.backward(node).values():
                        vals.extend(grad.ravel())
                if Q >= 2 and case % 25 == 0:
                    counts["training loss"] += 1
                    for cfg in (TrainConfig(lambda12=0.1, lambda3=0.01, del_variant=str(rng.choice(list("abc"))), M=10),
                                TrainConfig(method="expo-f", M=10), TrainConfig(method="expo-s", M=10)):
                        loss, grads = batch_gradients(model, x[None, :], np.array([y]), np.array([case]), b, cfg, 1)
                        vals.append(loss)
                        for grad in grads:
                            vals.extend(grad.ravel())
                if not np.all(np.isfinite(np.asarray(vals, dtype=float))):
                    failures.append((case, mode, "non-finite value"))
            except Exception as exc:  # noqa: BLE001 - any exception is a robustness failure here
                failures.append((case, mode, repr(exc)[:80]))
    detail = f"{n_cases} cases ({', '.join(f'{k}: {v}' for k, v in counts.items())}), {len(failures)} failures"
    if failures:
        detail += f"; first {failures[:3]}"
    _record("4 degenerate-input robustness", not failures, detail)


# 5


def _trajectory(model, data, cfg):
    snaps = []
    finetune(model, data, cfg, on_step=lambda e, s, m: snaps.append(b"".join(p.tobytes() for p in m.parameters())))
    return snaps


def _equivalence(ds):
    data = prepare(ds, make_split(ds.N, 0, 0))
    model = init_model(data.Q, data.L, seed=0)
    common = dict(max_epochs=5, patience=4, learning_rate=0.01, seed=0)
    a = _trajectory(model, data, TrainConfig(method="id-expo", lambda12=0.0, lambda3=0.0, **common))
    c = _trajectory(model, data, TrainConfig(method="ce-only", **common))
    return a == c, len(a)


def test_criterion_5_baseline_equivalence():
    path = _wine_path()
    if path is None:
        same, steps = _equivalence(_wine_shaped())
        _record("5 baseline equivalence", False,
                "wine-quality-red CSV not available (set IDEXPO_WINE_CSV); on the synthetic stand-in of the same shape "
                f"the two trajectories are {'bitwise identical' if same else 'DIFFERENT'} over {steps} SGD steps")
    ds = load_csv(path, "wine-quality-red")
    same, steps = _equivalence(ds)
    _record("5 baseline equivalence", same and (ds.N, ds.Q, ds.L) == (1599, 12, 6),
            f"{ds.name} N={ds.N} Q={ds.Q} L={ds.L}: trajectories {'bitwise identical' if same else 'differ'} over {steps} steps")


# 6


def _directional(res):
    m = res.means()
    a, c = m["id-expo"], m["ce-only"]
    ok = a["mean_insertion"] > c["mean_insertion"] and a["mean_deletion"] < c["mean_deletion"] and abs(a["accuracy"] - c["accuracy"]) <= 0.05
    text = (f"ID-ExpO acc {a['accuracy']:.4f} ins {a['mean_insertion']:.4f} del {a['mean_deletion']:.4f}; "
            f"CE-only acc {c['accuracy']:.4f} ins {c['mean_insertion']:.4f} del {c['mean_deletion']:.4f}")
    return ok, text


@pytest.mark.slow
def test_criterion_6_directional_reproduction():
    path = _wine_path()
    if path is None:
        quick = TrainConfig(explainer="lime", s_fraction=0.5, eta=3.0, lambda12=0.1, lambda3=0.0, max_epochs=6, patience=3)
        res = run_protocol(_wine_shaped(), quick, n_splits=1, use_grid=False, pretrain_kwargs=dict(max_epochs=60, patience=10))
        ok, text = _directional(res)
        _record("6 directional reproduction", False,
                "wine-quality-red CSV not available (set IDEXPO_WINE_CSV); reduced run on the synthetic stand-in "
                f"(1 split, no grid, 6 epochs) {'shows' if ok else 'does NOT show'} the direction: {text}")
    ds = load_csv(path, "wine-quality-red")
    res = run_protocol(ds, TrainConfig(explainer="lime", s_fraction=0.5, eta=3.0), n_splits=3, use_grid=True)
    ok, text = _directional(res)
    cpu = {m: r.cpu_seconds / 60 for m, r in res.methods.items()}
    within = all(v <= 30 for v in cpu.values())
    _record("6 directional reproduction", ok and within,
            text + "; CPU-min per method " + ", ".join(f"{m} {v:.1f}" for m, v in cpu.items()))


# 7


def test_criterion_7_sensitivity_n_exactness():
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(100):
        Q = int(rng.integers(2, 16))
        w = rng.normal(scale=0.05, size=Q)
        model = LinearScorer(w)
        x, b = rng.normal(size=Q), rng.normal(size=Q)
        phi = w * (x - b)
        n = int(rng.integers(1, Q))
        pos = sensitivity_n(x, 0, phi, b, n, 100, model, np.random.default_rng(1))
        neg = sensitivity_n(x, 0, -phi, b, n, 100, model, np.random.default_rng(1))
        if Q == 2 and n == 1 and phi[0] == phi[1]:
            continue
        worst = max(worst, abs(pos - 1), abs(neg + 1))
    _record("7 sensitivity-n exactness", worst <= 1e-6, f"100 linear predictors, max deviation from +/-1: {worst:.1e}")


# 8


def test_criterion_8_valscore_arithmetic(small_data, tmp_path, monkeypatch):
    # recorded runs: two real fine-tunes with test metrics, then the report pipeline
    model = init_model(small_data.Q, small_data.L, seed=0, hidden=8)
    worst = 0.0
    for k, (method, lam) in enumerate([("id-expo", 0.1), ("ce-only", 0.0)]):
        for split in (0, 1):
            data = prepare(small_data.dataset, make_split(small_data.dataset.N, 5, split))
            cfg = TrainConfig(method=method, lambda12=lam, M=20, max_epochs=2, patience=1, eta=2.0, seed=split)
            rec = finetune(model, data, cfg, evaluate_test=True)
            t = rec.test
            worst = max(worst, abs(t["valscore"] - (2.0 * t["accuracy"] + t["mean_insertion"] + 1 - t["mean_deletion"])))
            rec.save(tmp_path / "runs" / f"{method}_{split}")
    import csv

    rows = list(csv.DictReader(open(report(tmp_path / "runs")["summary"])))
    for r in rows:
        acc, ins, dele, eta = (float(r[c]) for c in ("accuracy", "mean_insertion", "mean_deletion", "eta"))
        worst = max(worst, abs(float(r["valscore"]) - (eta * acc + ins + 1 - dele)))
        worst = max(worst, abs(float(r["one_minus_deletion"]) - (1 - dele)))

    # grid selection over injected scores: finetune is replaced by a stub returning preset histories
    rng = np.random.default_rng(8)
    injected = {}

    def fake_finetune(pretrained, data, cfg, evaluate_test=False, on_step=None):
        acc, ins, dele = rng.uniform(size=3)
        injected[(cfg.learning_rate, cfg.lambda12, cfg.lambda3)] = valscore(acc, ins, dele, 3.0)
        hist = [{"epoch": 1, "valscore": 0.0, "accuracy": acc, "insertion": ins, "deletion": dele}]
        return RunRecord(cfg.to_dict(), hist, best_epoch=1)

    monkeypatch.setattr(training, "finetune", fake_finetune)
    best, records = grid_select(model, small_data, TrainConfig(eta=3.0), evaluate_test=False)
    target = max(injected, key=injected.get)
    picked = (best.config["learning_rate"], best.config["lambda12"], best.config["lambda3"])
    ok = worst <= 1e-12 and picked == target and len(records) == 12
    _record("8 valscore arithmetic", ok,
            f"max valscore deviation {worst:.1e} over {len(rows)} summary rows and 4 runs; "
            f"grid_select picked {picked}, injected argmax {target}")


# 9


def test_criterion_9_determinism(tmp_path):
    csv_path = tmp_path / "toy.csv"
    save_csv(synthetic_dataset(150, 6, 3, seed=2, informative=3, name="toy"), csv_path)
    assert run_command(["pretrain", "--data", str(csv_path), "--max-epochs", "3", "--patience", "2", "--hidden", "16",
                        "--out", str(tmp_path / "pre")]) == 0
    argv = ["finetune", "--data", str(csv_path), "--model", str(tmp_path / "pre" / "model.json"), "--method", "id-expo",
            "--lambda12", "0.1", "--lambda3", "0.001", "--M", "30", "--max-epochs", "3", "--patience", "2",
            "--seed", "11", "--out", str(tmp_path / "ft")]
    names = ("run.json", "checkpoint.json", "epochs.csv", "manifest.json")
    assert run_command(argv) == 0
    first = {n: (tmp_path / "ft" / n).read_bytes() for n in names}
    assert run_command(argv) == 0
    second = {n: (tmp_path / "ft" / n).read_bytes() for n in names}
    same = [n for n in names if first[n] == second[n]]
    _record("9 determinism", len(same) == len(names), f"byte-identical across two runs: {', '.join(same)}")


# 10


def test_criterion_10_paired_t_test():
    d = np.array([1.0, 1.2, 0.8, 1.1, 0.9])
    example = paired_t_test(d, np.zeros(5))
    # mean 1.0, sd sqrt(0.025) = 0.1581..., t = 1 / (0.1581 / sqrt 5) = sqrt(200)
    example_ok = abs(example.t - math.sqrt(200)) < 1e-12 and example.dof == 4
    rng = np.random.default_rng(10)
    worst = 0.0
    for _ in range(50):
        n = int(rng.integers(2, 15))
        a = rng.normal(size=n)
        b = a + rng.normal(loc=0.3, scale=rng.uniform(0.05, 1.0), size=n)
        r = paired_t_test(a, b)
        ref = stats.ttest_rel(a, b)
        worst = max(worst, abs(r.t - ref.statistic) / max(1.0, abs(ref.statistic)), abs(r.p - ref.pvalue))
    _record("10 paired t-test", example_ok and worst <= 1e-9,
            f"worked example t = {example.t:.6f} (sqrt 200; the value 10.0 does not follow from mean 1, sd 0.1581, n 5); "
            f"max deviation from scipy.stats.ttest_rel on 50 pairs {worst:.1e}")
