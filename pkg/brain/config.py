"""
Model configuration: every topology knob of the detector in one validated object.
"""

from enum import Enum
from typing import List, Tuple

from pydantic import BaseModel, Field, ValidationError, model_validator

from errors import ConfigError


class Variant(str, Enum):
    """Ablation variants; removed blocks are replaced by dimension-matched stand-ins."""
    FULL = "full"
    NO_TVCONV = "no-tvconv"
    NO_MAB_TVCONV = "no-mab-tvconv"
    NO_DCL_MAB_TVCONV = "no-dcl-mab-tvconv"

    @property
    def uses_tvconv(self) -> bool:
        return self is Variant.FULL

    @property
    def uses_mab(self) -> bool:
        return self in (Variant.FULL, Variant.NO_TVCONV)

    @property
    def uses_dcl(self) -> bool:
        return self is not Variant.NO_DCL_MAB_TVCONV


class ModelConfig(BaseModel):
    """
    Hyperparameters of the DCB -> MIRB -> CB -> head graph.

    widths are the output channels of the three stages (DCB, MIRB, CB).
    Anchors are (width, height) in input pixels, shared by every head cell.
    """
    input_size: int = 256
    widths: Tuple[int, int, int] = (64, 128, 256)
    num_classes: int = 4
    anchors: List[Tuple[float, float]] = Field(
        default_factory=lambda: [(16.0, 16.0), (32.0, 24.0), (64.0, 40.0)]
    )
    head_stride: int = 32

    mab_depth: int = 1
    mab_window: int = 8
    mab_heads: int = 4
    mab_alpha: float = 0.01
    mab_mlp_ratio: int = 2
    mab_reduction: int = 16
    mab_rel_pos_bias: bool = False

    dcl_gate: bool = False

    tv_affine_channels: int = 8
    tv_hidden: int = 32
    tv_kernel: int = 3

    bn_momentum: float = 0.03
    eps: float = 1e-5

    variant: Variant = Variant.FULL

    @model_validator(mode="after")
    def _check(self) -> "ModelConfig":
        if self.input_size % self.head_stride:
            raise ValueError(f"input_size {self.input_size} not divisible by head_stride {self.head_stride}")
        if self.head_stride != 32:
            raise ValueError("the DCB/MIRB/CB chain downsamples by exactly 32")
        if not self.anchors:
            raise ValueError("at least one anchor is required")
        if any(w <= 0 or h <= 0 for w, h in self.anchors):
            raise ValueError("anchor extents must be positive")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if any(w < 2 or w % 2 for w in self.widths):
            raise ValueError(f"stage widths must be even and >= 2, got {self.widths}")
        if self.widths[1] % self.mab_heads:
            raise ValueError(f"MAB width {self.widths[1]} not divisible by {self.mab_heads} heads")
        if self.widths[1] % self.mab_reduction:
            raise ValueError(f"MAB width {self.widths[1]} not divisible by reduction {self.mab_reduction}")
        if self.mab_depth < 0 or self.mab_window < 1 or self.tv_kernel % 2 == 0:
            raise ValueError("mab_depth >= 0, mab_window >= 1 and an odd tv_kernel are required")
        if self.eps <= 0:
            raise ValueError("eps must be > 0")
        return self

    @classmethod
    def build(cls, **overrides) -> "ModelConfig":
        """Validate overrides, reporting failures as ConfigError."""
        try:
            return cls(**overrides)
        except ValidationError as e:
            raise ConfigError(str(e)) from e

    @classmethod
    def tiny(cls, **overrides) -> "ModelConfig":
        """8-channel, 64x64 configuration used for gradient checks and fast tests."""
        values = dict(
            input_size=64,
            widths=(8, 8, 8),
            mab_window=8,
            mab_heads=2,
            mab_reduction=4,
            tv_affine_channels=4,
            tv_hidden=8,
            anchors=[(8.0, 8.0), (16.0, 12.0)],
        )
        values.update(overrides)
        return cls.build(**values)

    @property
    def num_anchors(self) -> int:
        return len(self.anchors)

    @property
    def head_channels(self) -> int:
        return self.num_anchors * (5 + self.num_classes)

    @property
    def grid_size(self) -> int:
        return self.input_size // self.head_stride
