"""Insertion/deletion-aware fine-tuning of differentiable classifiers for perturbation explainers."""

__version__ = "0.1.0"

from .autodiff import TapeGraph, backward, check_gradients, forward
from .data import Dataset, SplitSpec, load_csv, make_splits, prepare, standardize, background
from .evaluation import evaluate
from .experiment import ProtocolResult, run_protocol
from .explainers import Explanation, PerturbationSet, explain, generate_perturbations
from .metrics import (
    MetricReport,
    hard_deletion,
    hard_insertion,
    sensitivity_n,
    soft_masks,
    sth_val,
    temperature,
    valscore,
)
from .predictor import MlpModel, SgdState, cross_entropy, init_model, predict_proba, sgd_step
from .report import paired_t_test, report
from .training import RunRecord, TrainConfig, finetune, grid_select, pretrain

__all__ = [
    "TapeGraph", "backward", "check_gradients", "forward",
    "Dataset", "SplitSpec", "load_csv", "make_splits", "prepare", "standardize", "background",
    "evaluate",
    "ProtocolResult", "run_protocol",
    "Explanation", "PerturbationSet", "explain", "generate_perturbations",
    "MetricReport", "hard_deletion", "hard_insertion", "sensitivity_n", "soft_masks", "sth_val",
    "temperature", "valscore",
    "MlpModel", "SgdState", "cross_entropy", "init_model", "predict_proba", "sgd_step",
    "paired_t_test", "report",
    "RunRecord", "TrainConfig", "finetune", "grid_select", "pretrain",
]
