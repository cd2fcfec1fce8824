"""
Domain records shared by the dataset, model decoding and evaluation.
Boxes are (cx, cy, w, h) in pixels.
"""

from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field, field_validator

from tensor import Tensor

VEHICLE_CLASSES = ("car", "bus", "van", "others")


class GtBox(BaseModel):
    """Ground-truth box with its class label."""
    cx: float
    cy: float
    w: float
    h: float
    class_id: int = Field(ge=0)

    @field_validator("w", "h")
    @classmethod
    def _positive(cls, v: float) -> float:
        if v <= 0:
            raise ValueError("box extents must be positive")
        return v

    @property
    def box(self) -> Tuple[float, float, float, float]:
        return self.cx, self.cy, self.w, self.h


class Detection(BaseModel):
    """Predicted location (box) and category with confidence."""
    cx: float
    cy: float
    w: float = Field(gt=0)
    h: float = Field(gt=0)
    class_id: int = Field(ge=0)
    score: float = Field(ge=0.0, le=1.0)

    @property
    def box(self) -> Tuple[float, float, float, float]:
        return self.cx, self.cy, self.w, self.h


@dataclass
class Sample:
    """
    One image with its annotations.

    Attributes:
        image: (3, H, W) tensor with values in [0, 1]
        boxes: Ground-truth boxes, all inside the image
        name: File stem used on disk
        brightness: Global brightness scale applied by the generator
        occlusion: Largest fraction of any box covered by boxes drawn after it
    """
    image: Tensor
    boxes: List[GtBox] = field(default_factory=list)
    name: str = ""
    brightness: float = 1.0
    occlusion: float = 0.0

    @property
    def height(self) -> int:
        return self.image.dims[1]

    @property
    def width(self) -> int:
        return self.image.dims[2]


def collate(samples: Sequence[Sample], dtype=None) -> Tuple[Tensor, List[List[GtBox]]]:
    """Stack sample images into an (N, 3, H, W) batch alongside their boxes."""
    images = np.stack([s.image.data for s in samples])
    return Tensor(images, dtype=dtype), [list(s.boxes) for s in samples]
