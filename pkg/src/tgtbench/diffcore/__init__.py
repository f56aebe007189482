"""Minimal dense-tensor autodiff: tape, primitives, AdamW, gradient checking."""
from . import tensor as ops
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .gradcheck import GradCheckReport, NondeterministicClosure, grad_check, relative_error
from .optim import AdamWState, adamw_step
from .tensor import ShapeError, Tape, Tensor, backward

__all__ = [
    "ops",
    "Tensor",
    "Tape",
    "ShapeError",
    "backward",
    "AdamWState",
    "adamw_step",
    "grad_check",
    "relative_error",
    "GradCheckReport",
    "NondeterministicClosure",
    "save_checkpoint",
    "load_checkpoint",
    "CheckpointError",
]
