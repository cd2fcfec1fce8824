"""
Tensor core: dense tensors, differentiable operations and the gradient tape.
"""

from tensor.core import GradTape, Tensor, backward, current_tape, default_dtype, planted_fault, verification_mode
from tensor.ops import Mode, NormKind

__all__ = [
    "GradTape",
    "Mode",
    "NormKind",
    "Tensor",
    "backward",
    "current_tape",
    "default_dtype",
    "planted_fault",
    "verification_mode",
]
