"""Does fine-tuning with the insertion/deletion regularizers beat plain cross-entropy?

This runs the tabular comparison end to end: three 70/10/20 splits, a
pretrained MLP per split, the full hyperparameter grid for each method,
selection by valscore with an accuracy weight of 3, and test-set scores
with LIME explanations over the top half of the features.

    python demos/directional_protocol.py --data wine-quality-red.csv
    python demos/directional_protocol.py --synthetic --quick

Without ``--data`` it uses a synthetic dataset of the same shape
(1599 rows, 12 features, 6 classes). ``--quick`` swaps the grid for a single
configuration and a few epochs so the whole thing finishes in under a minute.
"""

import argparse
import json
import logging

from idexpo.data import load_csv, synthetic_dataset
from idexpo.experiment import run_protocol
from idexpo.training import TrainConfig


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--data", help="CSV with header, numeric features and the integer label last")
    ap.add_argument("--synthetic", action="store_true", help="use the synthetic stand-in (default without --data)")
    ap.add_argument("--splits", type=int, default=3)
    ap.add_argument("--quick", action="store_true")
    ap.add_argument("--json", help="write the per-method results here")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    if args.data:
        ds = load_csv(args.data)
    else:
        ds = synthetic_dataset(1599, 12, 6, seed=0, informative=5, name="wine-shaped")
    print(f"{ds.name}: N={ds.N} Q={ds.Q} L={ds.L}")

    base = TrainConfig(explainer="lime", s_fraction=0.5, eta=3.0)
    pre = {}
    if args.quick:
        base = TrainConfig(explainer="lime", s_fraction=0.5, eta=3.0, lambda12=0.1, lambda3=0.0,
                           max_epochs=6, patience=3)
        pre = dict(max_epochs=60, patience=10)
    res = run_protocol(ds, base, n_splits=args.splits, use_grid=not args.quick, pretrain_kwargs=pre)

    means = res.means()
    print(f"pretraining: {res.pretrain_cpu_seconds / 60:.1f} CPU-min")
    print(f"{'method':<10}{'acc':>8}{'ins':>8}{'1-del':>8}{'sens-n':>8}{'CPU-min':>9}")
    for m, r in res.methods.items():
        v = means[m]
        print(f"{m:<10}{v['accuracy']:>8.4f}{v['mean_insertion']:>8.4f}{1 - v['mean_deletion']:>8.4f}"
              f"{v['sensitivity_n']:>8.4f}{r.cpu_seconds / 60:>9.1f}")
    a, c = means["id-expo"], means["ce-only"]
    print("insertion higher:", a["mean_insertion"] > c["mean_insertion"])
    print("deletion lower:  ", a["mean_deletion"] < c["mean_deletion"])
    print("accuracy within 0.05:", abs(a["accuracy"] - c["accuracy"]) <= 0.05)
    if args.json:
        out = {m: {"tests": r.tests, "configs": r.configs, "cpu_seconds": r.cpu_seconds} for m, r in res.methods.items()}
        out["pretrain_cpu_seconds"] = res.pretrain_cpu_seconds
        with open(args.json, "w") as fh:
            json.dump(out, fh, indent=2)


if __name__ == "__main__":
    main()
