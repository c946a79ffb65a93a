"""Tabular dataset ingestion, 70/10/20 splits, train-only standardization."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import IngestionError, UsageError
from .seeding import SPLIT, rng_for

log = logging.getLogger(__name__)

N_SPLITS = 5

# name -> (samples, features, classes) for the six OpenML datasets used in the experiments
TABULAR_DATASETS = {
    "collins": (500, 23, 2),
    "mfeat-fourier": (2000, 77, 10),
    "one-hundred-plants-shape": (1600, 65, 100),
    "qsar-biodeg": (1055, 42, 2),
    "steel-plates-fault": (1941, 28, 7),
    "wine-quality-red": (1599, 12, 6),
}


@dataclass
class Dataset:
    name: str
    X: np.ndarray
    y: np.ndarray
    hash: str = ""
    feature_names: list[str] = field(default_factory=list)
    label_values: list = field(default_factory=list)
    drops: list[str] = field(default_factory=list)

    @property
    def N(self) -> int:
        return self.X.shape[0]

    @property
    def Q(self) -> int:
        return self.X.shape[1]

    @property
    def L(self) -> int:
        return len(self.label_values) if self.label_values else int(self.y.max()) + 1

    def metadata(self) -> dict:
        return {
            "name": self.name,
            "N": self.N,
            "Q": self.Q,
            "L": self.L,
            "hash": self.hash,
            "drops": list(self.drops),
        }


def load_csv(path: str | Path, name: str | None = None) -> Dataset:
    """Read a header + numeric-features + integer-label-last CSV.

    Labels are remapped to ``0..L-1`` by sorted original value. The content
    hash is SHA-256 over the raw file bytes.
    """
    path = Path(path)
    if not path.is_file():
        raise IngestionError(f"{path}: no such file")
    raw = path.read_bytes()
    rows = list(csv.reader(raw.decode("utf-8").splitlines()))
    if len(rows) < 2:
        raise IngestionError(f"{path}: need a header and at least one data row")
    header, body = rows[0], rows[1:]
    width = len(header)
    if width < 2:
        raise IngestionError(f"{path}: need at least one feature column and a label column")
    values = np.empty((len(body), width))
    for r, row in enumerate(body, start=2):
        if len(row) != width:
            raise IngestionError(f"{path}:{r}: expected {width} cells, found {len(row)}")
        for c, cell in enumerate(row):
            cell = cell.strip()
            if cell == "" or cell.lower() in ("na", "nan", "?"):
                raise IngestionError(f"{path}:{r}: missing value in column {header[c]!r}")
            try:
                values[r - 2, c] = float(cell)
            except ValueError:
                raise IngestionError(f"{path}:{r}: non-numeric value {cell!r} in column {header[c]!r}") from None
            if not np.isfinite(values[r - 2, c]):
                raise IngestionError(f"{path}:{r}: non-finite value in column {header[c]!r}")
    labels = values[:, -1]
    if np.any(labels != np.round(labels)):
        bad = int(np.flatnonzero(labels != np.round(labels))[0]) + 2
        raise IngestionError(f"{path}:{bad}: label column {header[-1]!r} must hold integers")
    uniq = np.unique(labels)
    if uniq.size < 2:
        raise IngestionError(f"{path}: need at least two classes, found {uniq.size}")
    y = np.searchsorted(uniq, labels).astype(np.intp)
    return Dataset(
        name=name or path.stem,
        X=values[:, :-1].copy(),
        y=y,
        hash=hashlib.sha256(raw).hexdigest(),
        feature_names=[h.strip() for h in header[:-1]],
        label_values=[int(v) for v in uniq],
    )


def save_csv(ds: Dataset, path: str | Path) -> None:
    names = ds.feature_names or [f"f{q}" for q in range(ds.Q)]
    labels = np.asarray(ds.label_values)[ds.y] if ds.label_values else ds.y
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(names + ["label"])
        for row, lab in zip(ds.X, labels):
            w.writerow([repr(float(v)) for v in row] + [int(lab)])


@dataclass
class SplitSpec:
    split_index: int
    train: np.ndarray
    validation: np.ndarray
    test: np.ndarray
    seed: int

    def to_dict(self) -> dict:
        return {
            "split_index": self.split_index,
            "seed": self.seed,
            "train": self.train.tolist(),
            "validation": self.validation.tolist(),
            "test": self.test.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SplitSpec":
        return cls(
            int(d["split_index"]),
            np.asarray(d["train"], dtype=np.intp),
            np.asarray(d["validation"], dtype=np.intp),
            np.asarray(d["test"], dtype=np.intp),
            int(d["seed"]),
        )


def split_sizes(N: int) -> tuple[int, int, int]:
    n_train = int(np.floor(0.7 * N))
    n_val = int(round(0.1 * N))
    return n_train, n_val, N - n_train - n_val


def make_split(N: int, seed: int, split_index: int) -> SplitSpec:
    if N < 10:
        raise UsageError(f"need at least 10 samples to split, got {N}")
    n_train, n_val, _ = split_sizes(N)
    perm = rng_for(seed, SPLIT, split_index).permutation(N)
    return SplitSpec(
        split_index,
        np.sort(perm[:n_train]),
        np.sort(perm[n_train : n_train + n_val]),
        np.sort(perm[n_train + n_val :]),
        seed,
    )


def make_splits(ds: Dataset | int, seed: int = 0, n: int = N_SPLITS) -> list[SplitSpec]:
    """``n`` independent shuffles, each from a child stream of the master ``seed``."""
    N = ds if isinstance(ds, int) else ds.N
    return [make_split(N, seed, k) for k in range(n)]


@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray
    kept: np.ndarray

    def transform(self, X: np.ndarray) -> np.ndarray:
        return (np.asarray(X)[:, self.kept] - self.mean) / self.std

    def inverse_transform(self, Z: np.ndarray) -> np.ndarray:
        return np.asarray(Z) * self.std + self.mean


def standardize(ds: Dataset, split: SplitSpec) -> tuple[Dataset, Standardizer]:
    """Z-score every row with statistics from the training rows only.

    Features constant on the training rows are dropped and listed in ``drops``.
    """
    if split.train.size == 0:
        raise UsageError("training split is empty")
    train = ds.X[split.train]
    std = train.std(axis=0)
    kept = np.flatnonzero(std > 0)
    names = ds.feature_names or [f"f{q}" for q in range(ds.Q)]
    drops = [names[q] for q in np.flatnonzero(std == 0)]
    if drops:
        log.warning("dropping features constant on the training split: %s", drops)
    scaler = Standardizer(train[:, kept].mean(axis=0), std[kept], kept)
    out = Dataset(
        ds.name,
        scaler.transform(ds.X),
        ds.y.copy(),
        ds.hash,
        [names[q] for q in kept],
        list(ds.label_values),
        list(ds.drops) + drops,
    )
    return out, scaler


def background(ds: Dataset, split: SplitSpec) -> np.ndarray:
    """Per-feature mean over the training rows."""
    return ds.X[split.train].mean(axis=0)


@dataclass
class PreparedSplit:
    """Standardized arrays for one split, ready for training and evaluation."""

    dataset: Dataset
    split: SplitSpec
    scaler: Standardizer
    b: np.ndarray

    def part(self, which: str) -> tuple[np.ndarray, np.ndarray]:
        idx = {"train": self.split.train, "validation": self.split.validation, "test": self.split.test}[which]
        return self.dataset.X[idx], self.dataset.y[idx]

    @property
    def Q(self) -> int:
        return self.dataset.Q

    @property
    def L(self) -> int:
        return self.dataset.L


def prepare(ds: Dataset, split: SplitSpec) -> PreparedSplit:
    std_ds, scaler = standardize(ds, split)
    return PreparedSplit(std_ds, split, scaler, background(std_ds, split))


def write_metadata(ds: Dataset, path: str | Path) -> None:
    Path(path).write_text(json.dumps(ds.metadata(), indent=2, sort_keys=True))


def write_splits(splits: list[SplitSpec], directory: str | Path) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    out = []
    for s in splits:
        p = directory / f"split_{s.split_index}.json"
        p.write_text(json.dumps(s.to_dict()))
        out.append(p)
    return out


def synthetic_dataset(N: int, Q: int, L: int, seed: int = 0, informative: int | None = None, name: str = "synthetic") -> Dataset:
    """Labels from a random teacher network over the first ``informative`` features.

    Only for demos and tests that need data of a given shape; the remaining
    features are noise, so a faithful explanation has a clear top set.
    """
    rng = np.random.default_rng(seed)
    informative = Q if informative is None else informative
    X = rng.normal(size=(N, Q))
    W1 = rng.normal(size=(informative, 16))
    W2 = rng.normal(size=(16, L))
    logits = np.tanh(X[:, :informative] @ W1) @ W2
    y = np.argmax(logits + 0.3 * rng.normal(size=logits.shape), axis=1).astype(np.intp)
    present = np.unique(y)
    y = np.searchsorted(present, y)
    blob = np.ascontiguousarray(np.column_stack([X, y])).tobytes()
    return Dataset(name, X, y, hashlib.sha256(blob).hexdigest(), [f"f{q}" for q in range(Q)], list(range(present.size)))
