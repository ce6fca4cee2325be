"""A small reverse-mode network engine on numpy (NHWC, float64)."""

from .adam import adam_step
from .checkpoint import load_checkpoint, save_checkpoint
from .net import (
    LayerSpec,
    NetState,
    backward,
    forward,
    forward_with_tape,
    init_state,
    param_count,
    validate,
)
from .ops import ShapeError, frobenius_loss

__all__ = [
    "LayerSpec",
    "NetState",
    "ShapeError",
    "adam_step",
    "backward",
    "forward",
    "forward_with_tape",
    "frobenius_loss",
    "init_state",
    "load_checkpoint",
    "param_count",
    "save_checkpoint",
    "validate",
]
