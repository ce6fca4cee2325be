"""Kernel-guided deraining: parameter net, derain net, training and inference."""

from .data import PatchDataset, build_training_set, denormalize_params, load_corpus, normalize_params
from .pipeline import derain_image, estimate_kernel, kernel_from_output
from .specs import derain_net_spec, param_net_spec
from .train import MODES, DivergenceError, TrainConfig, TrainedNet, train_derain_net, train_param_net

__all__ = [
    "MODES",
    "DivergenceError",
    "PatchDataset",
    "TrainConfig",
    "TrainedNet",
    "build_training_set",
    "denormalize_params",
    "derain_image",
    "derain_net_spec",
    "estimate_kernel",
    "kernel_from_output",
    "load_corpus",
    "normalize_params",
    "param_net_spec",
    "train_derain_net",
    "train_param_net",
]
