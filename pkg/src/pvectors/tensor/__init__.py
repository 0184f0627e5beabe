"""Minimal float64 tensor library with reverse-mode gradients."""

from pvectors.tensor.tensor import Tape, Tensor, active_tape, backward
from pvectors.tensor import ops
from pvectors.tensor.gradcheck import check_gradients, finite_diff_grad, relative_error
from pvectors.tensor.nn import (
    BatchNorm1d,
    Conv1d,
    Conv2d,
    Dropout,
    LayerNorm,
    Linear,
    Module,
    ModuleList,
    Parameter,
)

__all__ = [
    "Tape",
    "Tensor",
    "active_tape",
    "backward",
    "ops",
    "check_gradients",
    "finite_diff_grad",
    "relative_error",
    "BatchNorm1d",
    "Conv1d",
    "Conv2d",
    "Dropout",
    "LayerNorm",
    "Linear",
    "Module",
    "ModuleList",
    "Parameter",
]
