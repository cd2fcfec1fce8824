"""
Finite-difference verification of recorded gradients.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from errors import UsageError
from tensor.core import GradTape, Tensor

logger = logging.getLogger(__name__)


@dataclass
class GradcheckResult:
    """Outcome of one gradient check."""
    max_rel_err: float
    checked: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_err)) and self.max_rel_err <= self.tolerance


def relative_error(analytic: float, numeric: float, floor: float = 1e-3) -> float:
    """|a - n| / max(|a|, |n|, floor); the floor keeps near-zero gradients from dominating."""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def gradcheck(
    fn: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-4,
    tolerance: float = 1e-4,
    samples: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> GradcheckResult:
    """
    Compare tape gradients of a scalar function against central differences.

    Run inside verification_mode() so inputs are float64.

    Args:
        fn: Zero-argument callable recomputing the scalar from the current input values
        inputs: Tensors to differentiate with respect to (perturbed in place)
        h: Finite-difference step
        tolerance: Maximum accepted relative error
        samples: If given, check only this many random entries per input
        rng: Generator used to pick sampled entries

    Returns:
        GradcheckResult with the worst relative error seen
    """
    if any(t.dtype != np.float64 for t in inputs):
        raise UsageError("gradcheck needs float64 inputs; wrap the call in verification_mode()")
    rng = rng or np.random.default_rng(0)

    with GradTape() as tape:
        tape.watch(*inputs)
        root = fn()
        tape.backward(root)
    analytic = [tape.gradient(t).copy() for t in inputs]

    worst, checked = 0.0, 0
    for t, grad in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        positions = np.arange(flat.size)
        if samples is not None and samples < flat.size:
            positions = rng.choice(flat.size, size=samples, replace=False)
        for pos in positions:
            original = flat[pos]
            flat[pos] = original + h
            plus = fn().item()
            flat[pos] = original - h
            minus = fn().item()
            flat[pos] = original
            numeric = (plus - minus) / (2 * h)
            err = relative_error(float(grad.reshape(-1)[pos]), numeric)
            worst = max(worst, err)
            checked += 1

    logger.debug("gradcheck: %d entries, max rel err %.3e", checked, worst)
    return GradcheckResult(max_rel_err=worst, checked=checked, tolerance=tolerance)


def projection(dims: Sequence[int], rng: np.random.Generator) -> np.ndarray:
    """Fixed random weights that turn a tensor-valued op into a scalar for checking."""
    return rng.standard_normal(tuple(dims))
