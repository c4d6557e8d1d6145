"""Reverse-mode differentiation core: tensors, primitives, Adam, gradient checks."""

from . import ops
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .gradcheck import gradient_check, gradient_check_report, gradient_pairs, relative_error
from .optim import Adam, AdamState, adam_step, clip_grad_norm, zero_gradients
from .tensor import NumericError, Parameter, Tape, TapeError, Tensor, backward

__all__ = [
    "ops",
    "Adam",
    "AdamState",
    "CheckpointError",
    "NumericError",
    "Parameter",
    "Tape",
    "TapeError",
    "Tensor",
    "adam_step",
    "backward",
    "clip_grad_norm",
    "gradient_check",
    "gradient_check_report",
    "gradient_pairs",
    "load_checkpoint",
    "relative_error",
    "save_checkpoint",
    "zero_gradients",
]
