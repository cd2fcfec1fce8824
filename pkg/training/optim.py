"""
SGD with momentum and weight decay, and the one-cycle learning-rate schedule.
"""

import math
from dataclasses import dataclass, field
from typing import List, Sequence

import numpy as np
from pydantic import BaseModel, Field, model_validator

from errors import ShapeError
from tensor import Tensor

MOMENTUM = 0.937
WEIGHT_DECAY = 5e-4


@dataclass
class OptimState:
    velocity: List[np.ndarray] = field(default_factory=list)
    momentum: float = MOMENTUM
    weight_decay: float = WEIGHT_DECAY
    step: int = 0


def sgd_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: OptimState, lr: float) -> OptimState:
    """
    One update in place: v <- mu*v + g + lambda*w; w <- w - lr*v.

    Velocities are created as zeros on the first step.

    Raises:
        ShapeError: If a gradient or velocity does not match its parameter
    """
    if len(params) != len(grads):
        raise ShapeError(f"{len(grads)} gradients for {len(params)} parameters")
    if not state.velocity:
        state.velocity = [np.zeros_like(p.data) for p in params]
    if len(state.velocity) != len(params):
        raise ShapeError(f"optimizer tracks {len(state.velocity)} parameters, got {len(params)}")

    for p, g, v in zip(params, grads, state.velocity):
        if g.shape != p.dims or v.shape != p.dims:
            raise ShapeError(f"gradient dims {g.shape} do not match parameter dims {p.dims}")
        v *= state.momentum
        v += g + state.weight_decay * p.data
        p.data -= (lr * v).astype(p.dtype)
    state.step += 1
    return state


class LrSchedule(BaseModel):
    """One-cycle policy: cosine warm-up to max_lr, then cosine decay."""
    max_lr: float = Field(default=0.01, gt=0)
    warm_fraction: float = Field(default=0.3, gt=0, lt=1)
    div_factor: float = Field(default=25.0, gt=0)
    final_div: float = Field(default=1e4, gt=0)
    total_steps: int = Field(default=1, ge=1)

    @model_validator(mode="after")
    def check_warmup(self) -> "LrSchedule":
        if self.warm_steps <= 0:
            raise ValueError("warm fraction leaves no warm-up steps")
        return self

    @property
    def warm_steps(self) -> float:
        return self.warm_fraction * self.total_steps


def _cosine(start: float, end: float, fraction: float) -> float:
    return end + (start - end) * (1.0 + math.cos(math.pi * fraction)) / 2.0


def one_cycle_lr(step: int, sched: LrSchedule) -> float:
    """Learning rate at a step; steps past the end clamp to the final value."""
    step = min(max(step, 0), sched.total_steps)
    initial = sched.max_lr / sched.div_factor
    final = sched.max_lr / sched.final_div
    if step <= sched.warm_steps:
        return _cosine(initial, sched.max_lr, step / sched.warm_steps)
    decay = sched.total_steps - sched.warm_steps
    return _cosine(sched.max_lr, final, (step - sched.warm_steps) / decay)
