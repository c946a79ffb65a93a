"""Multi-split comparison of fine-tuning methods, as used for the tabular experiments.

For every split the base model is pretrained once and shared by all methods;
each method then runs its hyperparameter grid (or a single configuration) and
the winner under ``eta`` is scored on the test part.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .data import Dataset, make_split, prepare
from .errors import NumericalError
from .training import TrainConfig, finetune, grid_select, pretrain

log = logging.getLogger(__name__)


@dataclass
class MethodResult:
    method: str
    tests: list[dict] = field(default_factory=list)
    configs: list[dict] = field(default_factory=list)
    cpu_seconds: float = 0.0

    def mean(self, key: str) -> float:
        return float(np.mean([t[key] for t in self.tests]))


@dataclass
class ProtocolResult:
    methods: dict[str, MethodResult]
    pretrain_cpu_seconds: float

    def means(self) -> dict[str, dict[str, float]]:
        keys = ("accuracy", "mean_insertion", "mean_deletion", "sensitivity_n")
        return {m: {k: r.mean(k) for k in keys} for m, r in self.methods.items()}


def run_protocol(
    ds: Dataset,
    base: TrainConfig,
    methods: tuple[str, ...] = ("id-expo", "ce-only"),
    n_splits: int = 3,
    split_seed: int = 0,
    use_grid: bool = True,
    pretrain_kwargs: dict | None = None,
) -> ProtocolResult:
    """Train and test every method on ``n_splits`` splits; CPU time is tracked per method."""
    results = {m: MethodResult(m) for m in methods}
    pre_cpu = 0.0
    for k in range(n_splits):
        data = prepare(ds, make_split(ds.N, split_seed, k))
        t0 = time.process_time()
        pretrained, _ = pretrain(data, seed=k, **(pretrain_kwargs or {}))
        pre_cpu += time.process_time() - t0
        for m in methods:
            cfg = replace(base, method=m, seed=k)
            t0 = time.process_time()
            if use_grid:
                best, _ = grid_select(pretrained, data, cfg, cfg.eta)
            else:
                best = finetune(pretrained, data, cfg, evaluate_test=True)
            results[m].cpu_seconds += time.process_time() - t0
            if best.test is None:
                raise NumericalError(f"{m} on split {k} produced no usable checkpoint ({best.status})")
            results[m].tests.append(best.test)
            results[m].configs.append(best.config)
            log.info("split %d %s test %s", k, m, best.test)
    return ProtocolResult(results, pre_cpu)
