"""
Error hierarchy shared by every package.
Each error carries the exit code the command layer reports for it.
"""

from typing import Optional


class DtNetError(Exception):
    """Base class for all library errors."""
    exit_code = 1


class ShapeError(DtNetError, ValueError):
    """Tensor dims do not fit an operation."""
    exit_code = 2


class ConfigError(DtNetError, ValueError):
    """A configuration value is out of its valid range."""
    exit_code = 2


class UsageError(DtNetError, ValueError):
    """An API or command was called incorrectly."""
    exit_code = 2


class DataError(DtNetError, ValueError):
    """Dataset contents violate their contract."""
    exit_code = 2


class InternalError(DtNetError):
    """An internal invariant was broken (e.g. an out-of-order tape)."""
    exit_code = 1


class TrainingDivergedError(DtNetError):
    """
    Loss or a gradient became non-finite during training.

    Attributes:
        step: Global optimizer step at which divergence was detected
    """
    exit_code = 3

    def __init__(self, step: int, message: Optional[str] = None):
        self.step = step
        super().__init__(message or f"non-finite loss at step {step}")


class CheckpointError(DtNetError):
    """
    A checkpoint could not be written or read.

    Attributes:
        tensor: Name of the offending tensor, when the failure is tensor-specific
    """
    exit_code = 4

    def __init__(self, message: str, tensor: Optional[str] = None):
        self.tensor = tensor
        if tensor is not None:
            message = f"{message} (tensor '{tensor}')"
        super().__init__(message)


class VerificationError(DtNetError):
    """A property or gradient check failed."""
    exit_code = 5
