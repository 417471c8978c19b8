"""Continual cross-modal retrieval: a two-branch image/text embedding trained
over a sequence of tasks, with EWC / MAS regularization, a persistent
embedding index and Recall@K evaluation."""

from .data import SyntheticSpec, generate_synthetic, load_dataset, save_dataset
from .engine import RunRecord, TrainConfig, run_decoupled, run_sequence
from .errors import XmclError
from .experiment import Cell, ExperimentGrid, emit_results, evaluate, harness_config, run_experiment
from .index import IndexStore, query, recall_at_k
from .model import BranchConfig, TwoBranchModel
from .regularization import ImportanceMap, RegConfig
from .tasks import TaskDataset
from .triplets import LossConfig

__all__ = [
    "BranchConfig",
    "Cell",
    "ExperimentGrid",
    "ImportanceMap",
    "IndexStore",
    "LossConfig",
    "RegConfig",
    "RunRecord",
    "SyntheticSpec",
    "TaskDataset",
    "TrainConfig",
    "TwoBranchModel",
    "XmclError",
    "emit_results",
    "evaluate",
    "generate_synthetic",
    "harness_config",
    "load_dataset",
    "query",
    "recall_at_k",
    "run_decoupled",
    "run_experiment",
    "run_sequence",
    "save_dataset",
]
