"""Aggregation of finished runs and the paired t-test used to compare methods."""

from __future__ import annotations

import csv
import json
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import stats

from .errors import UsageError
from .metrics import valscore

METRIC_KEYS = ("accuracy", "mean_insertion", "mean_deletion", "sensitivity_n")


@dataclass
class TTestResult:
    t: float | None
    p: float | None
    dof: int
    significant: bool
    degenerate: bool

    def to_dict(self) -> dict:
        return {"t": self.t, "p": self.p, "dof": self.dof, "significant": self.significant, "degenerate": self.degenerate}


def paired_t_test(values_a, values_b, alpha: float = 0.05) -> TTestResult:
    """Two-sided paired t-test on ``a - b`` with ``n - 1`` degrees of freedom.

    When the differences have zero spread the statistic is undefined; the
    result is flagged degenerate and never significant (``t`` is 0 if every
    difference is 0, otherwise None).
    """
    a = np.asarray(values_a, dtype=np.float64)
    b = np.asarray(values_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise UsageError("paired samples must be 1-D and of equal length")
    n = a.size
    if n < 2:
        raise UsageError("need at least two pairs")
    d = a - b
    mean = d.mean()
    sd = d.std(ddof=1)
    if sd <= 1e-14 * max(np.abs(d).max(), 1e-300):
        return TTestResult(0.0 if mean == 0 else None, None, n - 1, False, True)
    t = mean / (sd / np.sqrt(n))
    p = 2.0 * stats.t.sf(abs(t), n - 1)
    return TTestResult(float(t), float(p), n - 1, bool(p < alpha), False)


def load_records(run_dir: str | Path) -> list[dict]:
    """Every ``run.json`` below ``run_dir`` that carries test metrics."""
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise UsageError(f"{run_dir}: not a directory")
    out = []
    for p in sorted(run_dir.rglob("run.json")):
        d = json.loads(p.read_text())
        if d.get("test"):
            d["_path"] = str(p.relative_to(run_dir))
            out.append(d)
    if not out:
        raise UsageError(f"{run_dir}: no run records with test metrics")
    return out


def _group_key(rec: dict) -> tuple:
    c = rec["config"]
    return (c["method"], c["explainer"], float(c["eta"]))


def summarize(records: list[dict]) -> list[dict]:
    """One row per (method, explainer, eta) with split means and t-tests against ce-only."""
    groups: dict[tuple, dict[int, dict]] = defaultdict(dict)
    for rec in records:
        split = rec.get("split_index")
        split = len(groups[_group_key(rec)]) if split is None else int(split)
        groups[_group_key(rec)][split] = rec["test"]
    rows = []
    for key in sorted(groups):
        method, explainer, eta = key
        by_split = groups[key]
        splits = sorted(by_split)
        row = {"method": method, "explainer": explainer, "eta": eta, "n_splits": len(splits)}
        for k in METRIC_KEYS:
            row[k] = float(np.mean([by_split[s][k] for s in splits]))
        row["one_minus_deletion"] = 1.0 - row["mean_deletion"]
        row["valscore"] = valscore(row["accuracy"], row["mean_insertion"], row["mean_deletion"], eta)
        base = groups.get(("ce-only", explainer, eta))
        for k in METRIC_KEYS:
            row[f"t_{k}"] = row[f"p_{k}"] = row[f"sig_{k}"] = ""
        if method != "ce-only" and base:
            common = [s for s in splits if s in base]
            if len(common) >= 2:
                for k in METRIC_KEYS:
                    res = paired_t_test([by_split[s][k] for s in common], [base[s][k] for s in common])
                    row[f"t_{k}"] = "" if res.t is None else res.t
                    row[f"p_{k}"] = "" if res.p is None else res.p
                    row[f"sig_{k}"] = "degenerate" if res.degenerate else int(res.significant)
        rows.append(row)
    return rows


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.17g}"
    return str(v)


def write_csv(rows: list[dict], path: str | Path) -> None:
    if not rows:
        raise UsageError("nothing to write")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        cols = list(rows[0])
        w.writerow(cols)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in cols])


def report(run_dir: str | Path, out_dir: str | Path | None = None) -> dict[str, Path]:
    """Write ``summary.csv`` and ``scatter.csv`` (accuracy vs insertion / 1 - deletion)."""
    rows = summarize(load_records(run_dir))
    out_dir = Path(run_dir if out_dir is None else out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {"summary": out_dir / "summary.csv", "scatter": out_dir / "scatter.csv"}
    write_csv(rows, paths["summary"])
    scatter = [
        {k: r[k] for k in ("method", "explainer", "eta", "accuracy", "mean_insertion", "one_minus_deletion")}
        for r in rows
    ]
    write_csv(scatter, paths["scatter"])
    return paths
