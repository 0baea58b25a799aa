"""Parameter-efficient adaptation of a frozen Vision Transformer, on a small numpy autodiff engine."""

from .accounting import BudgetReport, budget_report, count_trainable, predict_count
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, parse_config
from .data import ToyTaskSpec, make_toy_dataset
from .petl import METHODS, PETLSpec, attach_petl
from .tensor import Tensor, no_grad
from .train import TrainConfig, evaluate, train, transfer_experiment
from .unravel import census, enumerate_paths, path_sum_forward
from .vit import VIT_B16, ViT, ViTConfig, build_vit

__all__ = [
    "BudgetReport", "budget_report", "count_trainable", "predict_count",
    "load_checkpoint", "save_checkpoint", "RunConfig", "parse_config",
    "ToyTaskSpec", "make_toy_dataset", "METHODS", "PETLSpec", "attach_petl",
    "Tensor", "no_grad", "TrainConfig", "evaluate", "train", "transfer_experiment",
    "census", "enumerate_paths", "path_sum_forward", "VIT_B16", "ViT", "ViTConfig", "build_vit",
]
