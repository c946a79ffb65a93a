"""Command line entry points: pretrain, finetune, evaluate, explain, report."""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path


from . import __version__
from .data import load_csv, make_split, prepare, write_metadata, write_splits
from .errors import IdExpoError
from .evaluation import evaluate
from .explainers import EXPLAINERS, explain, generate_perturbations
from .metrics import DEL_VARIANTS, n_steps
from .predictor import MlpModel
from .report import report
from .seeding import EVAL, rng_for
from .training import METHODS, TrainConfig, finetune, pretrain, select_best, test_report

log = logging.getLogger("idexpo")


def _sha(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_manifest(out: Path, command: str, argv: list[str], config: dict, inputs: dict, outputs: list[Path]) -> Path:
    manifest = {
        "command": command,
        "argv": argv,
        "config": config,
        "input_hashes": {k: _sha(Path(v)) for k, v in inputs.items()},
        "inputs": {k: str(v) for k, v in inputs.items()},
        "outputs": sorted(str(Path(p).relative_to(out)) for p in outputs),
        "version": __version__,
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def _load_split(args):
    ds = load_csv(args.data)
    split = make_split(ds.N, args.split_seed, args.split)
    return ds, split, prepare(ds, split)


def _resolve_config(args) -> TrainConfig:
    values = {}
    if args.config:
        values.update(json.loads(Path(args.config).read_text()))
    flags = {
        "method": args.method,
        "explainer": args.explainer,
        "s_fraction": args.s_fraction,
        "del_variant": args.del_variant,
        "eta": args.eta,
        "lambda12": args.lambda12,
        "lambda3": args.lambda3,
        "expo_weight": args.expo_weight,
        "learning_rate": args.lr,
        "seed": args.seed,
        "max_epochs": args.max_epochs,
        "patience": args.patience,
        "M": args.M,
    }
    values.update({k: v for k, v in flags.items() if v is not None})
    return TrainConfig.from_dict(values)


def cmd_pretrain(args, argv) -> int:
    ds, split, data = _load_split(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model, history = pretrain(data, args.seed or 0, args.lr or 0.01, args.max_epochs or 200, args.patience or 20, hidden=args.hidden)
    paths = [out / "model.json", out / "pretrain_epochs.csv", out / "dataset.json"]
    model.save(paths[0])
    with open(paths[1], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "val_accuracy"])
        for h in history:
            w.writerow([h["epoch"], f"{h['accuracy']:.17g}"])
    write_metadata(data.dataset, paths[2])
    paths += write_splits([split], out)
    config = {"seed": args.seed or 0, "split": args.split, "split_seed": args.split_seed, "learning_rate": args.lr or 0.01,
              "max_epochs": args.max_epochs or 200, "patience": args.patience or 20, "hidden": args.hidden}
    _write_manifest(out, "pretrain", argv, config, {"data": args.data}, paths)
    print(out / "model.json")
    return 0


def _run_cell(payload):
    pretrained, data, cfg = payload
    return finetune(pretrained, data, cfg)


def cmd_finetune(args, argv) -> int:
    ds, split, data = _load_split(args)
    cfg = _resolve_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    inputs = {"data": args.data}
    outputs = []
    if args.model:
        pretrained = MlpModel.load(args.model)
        inputs["model"] = args.model
    else:
        pretrained, _ = pretrain(data, cfg.seed)
        pretrained.save(out / "pretrained.json")
        outputs.append(out / "pretrained.json")
    cells = cfg.grid() if args.grid else [cfg]
    if args.jobs > 1 and len(cells) > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            records = list(pool.map(_run_cell, [(pretrained, data, c) for c in cells]))
    else:
        records = [finetune(pretrained, data, c) for c in cells]
    best = select_best(records, cfg.eta)
    best_cfg = TrainConfig.from_dict(best.config)
    if best.best_model is not None:
        best.test = test_report(best.best_model, data, replace(best_cfg, eta=cfg.eta))
    best.config = replace(best_cfg, eta=cfg.eta).to_dict()
    outputs += list(best.save(out).values())
    if args.grid:
        for k, rec in enumerate(records):
            outputs += [p for name, p in rec.save(out / "grid" / f"cell_{k:03d}").items() if name != "checkpoint"]
    _write_manifest(out, "finetune", argv, {**cfg.to_dict(), "split": args.split, "split_seed": args.split_seed, "grid": bool(args.grid)}, inputs, outputs)
    print(out / "run.json")
    return 0 if best.status == "ok" else 3


def cmd_evaluate(args, argv) -> int:
    ds, split, data = _load_split(args)
    model = MlpModel.load(args.model)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    X, y = data.part(args.part)
    idx = {"train": split.train, "validation": split.validation, "test": split.test}[args.part]
    S = n_steps(data.Q, args.s_fraction)
    rep = evaluate(model, X, y, data.b, S, args.explainer, args.seed or 0, args.eta, indices=idx, M=args.M or 200)
    paths = [out / "metrics.json", out / "samples.csv", out / "insertion_curve.csv", out / "deletion_curve.csv"]
    summary = rep.summary()
    summary.update({"S": S, "split": args.split, "part": args.part, "explainer": args.explainer, "N": len(y)})
    paths[0].write_text(json.dumps(summary, indent=2, sort_keys=True))
    with open(paths[1], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample", "acc_hit", "ins", "del", "sens_n"])
        for i, h, a, d, s in zip(idx, rep.hits, rep.insertion, rep.deletion, rep.sensitivity):
            w.writerow([int(i), int(h), f"{a:.17g}", f"{d:.17g}", f"{s:.17g}"])
    for path, curve in ((paths[2], rep.insertion_curve), (paths[3], rep.deletion_curve)):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["s", "probability"])
            for s, p in enumerate(curve, start=1):
                w.writerow([s, f"{p:.17g}"])
    config = {"split": args.split, "split_seed": args.split_seed, "s_fraction": args.s_fraction, "explainer": args.explainer,
              "eta": args.eta, "seed": args.seed or 0, "part": args.part, "M": args.M or 200}
    _write_manifest(out, "evaluate", argv, config, {"data": args.data, "model": args.model}, paths)
    print(paths[0])
    return 0


def cmd_explain(args, argv) -> int:
    ds, split, data = _load_split(args)
    model = MlpModel.load(args.model)
    if not 0 <= args.index < ds.N:
        raise IdExpoError(f"--index must be in 0..{ds.N - 1}")
    x = data.dataset.X[args.index]
    label = int(model.predict(x)[0]) if args.label is None else args.label
    pset = generate_perturbations(x, data.b, args.M or 200, rng_for(args.seed or 0, EVAL, args.index)).with_kernel(args.explainer)
    e = explain(x, label, model, pset, args.explainer)
    record = {
        "dataset": ds.name,
        "sample_index": args.index,
        "label": label,
        "explainer": args.explainer,
        "contributions": [float(v) for v in e.contributions],
    }
    text = json.dumps(record, indent=2)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        path = out / f"explanation_{args.index}.json"
        path.write_text(text)
        config = {"index": args.index, "label": label, "explainer": args.explainer, "seed": args.seed or 0,
                  "split": args.split, "split_seed": args.split_seed, "M": args.M or 200}
        _write_manifest(out, "explain", argv, config, {"data": args.data, "model": args.model}, [path])
    print(text)
    return 0


def cmd_report(args, argv) -> int:
    paths = report(args.runs, args.out)
    for p in paths.values():
        print(p)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="idexpo", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def data_args(p, model_required=False):
        p.add_argument("--data", required=True, help="CSV with header, numeric features, integer label last")
        p.add_argument("--split", type=int, default=0, help="split index 0..4")
        p.add_argument("--split-seed", type=int, default=0, help="master seed for the five splits")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--M", type=int, default=None, help="perturbations per explanation (200)")
        if model_required:
            p.add_argument("--model", required=True)

    p = sub.add_parser("pretrain", help="train the MLP with cross-entropy")
    data_args(p)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--max-epochs", type=int, default=None)
    p.add_argument("--patience", type=int, default=None)
    p.add_argument("--hidden", type=int, default=256)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="fine-tune with explanation regularizers")
    data_args(p)
    p.add_argument("--model", default=None, help="pretrained model JSON (pretrains if omitted)")
    p.add_argument("--config", default=None, help="JSON file with TrainConfig fields; flags override it")
    p.add_argument("--method", choices=METHODS, default=None)
    p.add_argument("--explainer", choices=EXPLAINERS, default=None)
    p.add_argument("--s-fraction", type=float, default=None)
    p.add_argument("--del-variant", choices=DEL_VARIANTS, default=None)
    p.add_argument("--eta", type=float, default=None)
    p.add_argument("--lambda12", type=float, default=None)
    p.add_argument("--lambda3", type=float, default=None)
    p.add_argument("--expo-weight", type=float, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--max-epochs", type=int, default=None)
    p.add_argument("--patience", type=int, default=None)
    p.add_argument("--grid", action="store_true", help="train the full hyperparameter grid and keep the best")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("evaluate", help="accuracy, insertion, deletion, sensitivity-n")
    data_args(p, model_required=True)
    p.add_argument("--explainer", choices=EXPLAINERS, default="lime")
    p.add_argument("--s-fraction", type=float, default=0.5)
    p.add_argument("--eta", type=float, default=2.0)
    p.add_argument("--part", choices=("train", "validation", "test"), default="test")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("explain", help="contributions for one sample")
    data_args(p, model_required=True)
    p.add_argument("--index", type=int, required=True)
    p.add_argument("--label", type=int, default=None, help="label to explain (default: predicted)")
    p.add_argument("--explainer", choices=EXPLAINERS, default="lime")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("report", help="aggregate run records across splits")
    p.add_argument("--runs", required=True, help="directory searched recursively for run.json")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_report)
    return parser


def run_command(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args, argv)
    except (IdExpoError, FileNotFoundError) as exc:
        print(f"idexpo {args.command}: error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run_command())
