"""
Synthetic traffic scenes: class-styled vehicle rectangles over a background
gradient, with partial occlusion, global lighting changes and sensor noise.
"""

import logging
from typing import List, Sequence, Tuple

import numpy as np
from pydantic import BaseModel

from data.models import GtBox, Sample
from errors import UsageError
from tensor import Tensor

logger = logging.getLogger(__name__)


class SynthConfig(BaseModel):
    image_size: int = 256
    num_classes: int = 4
    max_objects: int = 6
    max_overlap: float = 0.6
    brightness: Tuple[float, float] = (0.3, 1.0)
    noise_sigma: float = 0.02
    placement_tries: int = 20


# (base RGB, width range as a fraction of the image, height/width ratio range)
CLASS_STYLES = (
    ((0.80, 0.15, 0.10), (0.10, 0.19), (0.55, 0.70)),   # car: low red body
    ((0.90, 0.75, 0.10), (0.22, 0.38), (0.40, 0.55)),   # bus: long yellow body
    ((0.85, 0.85, 0.90), (0.13, 0.22), (0.80, 1.00)),   # van: boxy pale body
    ((0.15, 0.30, 0.85), (0.06, 0.12), (1.20, 1.60)),   # others: small tall blue body
)

MIN_EXTENT = 4


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    top, bottom = rng.uniform(0.35, 0.75, size=3), rng.uniform(0.15, 0.5, size=3)
    t = np.linspace(0.0, 1.0, size)[:, None, None]
    rows = (1 - t) * top + t * bottom
    tilt = rng.uniform(-0.08, 0.08) * np.linspace(-1.0, 1.0, size)[None, :, None]
    return np.broadcast_to(rows, (size, size, 3)) + tilt


def _paint(img: np.ndarray, rng: np.random.Generator, class_id: int, x1: int, y1: int, x2: int, y2: int) -> None:
    """Fill the body, then a dark class-specific detail (windows, stripe or wheels)."""
    base = np.asarray(CLASS_STYLES[class_id % len(CLASS_STYLES)][0])
    img[y1:y2, x1:x2] = np.clip(base + rng.uniform(-0.08, 0.08, size=3), 0.0, 1.0)
    w, h = x2 - x1, y2 - y1
    dark = 0.1
    if class_id % 4 == 0:
        img[y1 + h // 6:y1 + h // 3, x1 + w // 5:x2 - w // 5] = dark
    elif class_id % 4 == 1:
        img[y1 + h // 5:y1 + 2 * h // 5, x1 + w // 10:x2 - w // 10:3] = dark
    elif class_id % 4 == 2:
        img[y1 + h // 8:y1 + h // 2, x1 + w // 10:x1 + w // 3] = dark
    else:
        img[y2 - max(h // 5, 1):y2, x1:x1 + max(w // 3, 1)] = dark
        img[y2 - max(h // 5, 1):y2, x2 - max(w // 3, 1):x2] = dark


def _covered(inner: Tuple[int, ...], covers: Sequence[Tuple[int, ...]]) -> float:
    """Fraction of inner's pixels under the union of covers (corner boxes)."""
    x1, y1, x2, y2 = inner
    mask = np.zeros((y2 - y1, x2 - x1), dtype=bool)
    for ox1, oy1, ox2, oy2 in covers:
        mask[max(oy1 - y1, 0):max(min(oy2, y2) - y1, 0), max(ox1 - x1, 0):max(min(ox2, x2) - x1, 0)] = True
    return float(mask.mean())


def _place(rng: np.random.Generator, cfg: SynthConfig, class_id: int) -> Tuple[int, int, int, int]:
    size = cfg.image_size
    _, widths, ratios = CLASS_STYLES[class_id % len(CLASS_STYLES)]
    w = rng.uniform(*widths) * size
    h = w * rng.uniform(*ratios)
    cx, cy = rng.uniform(0, size), rng.uniform(0, size)
    x1, y1 = int(np.clip(round(cx - w / 2), 0, size)), int(np.clip(round(cy - h / 2), 0, size))
    x2, y2 = int(np.clip(round(cx + w / 2), 0, size)), int(np.clip(round(cy + h / 2), 0, size))
    return x1, y1, x2, y2


def _scene(rng: np.random.Generator, cfg: SynthConfig, index: int) -> Sample:
    size = cfg.image_size
    img = np.array(_background(rng, size))
    placed: List[Tuple[Tuple[int, int, int, int], int]] = []
    for _ in range(int(rng.integers(1, cfg.max_objects + 1))):
        class_id = int(rng.integers(0, cfg.num_classes))
        for _ in range(cfg.placement_tries):
            corners = _place(rng, cfg, class_id)
            if corners[2] - corners[0] < MIN_EXTENT or corners[3] - corners[1] < MIN_EXTENT:
                continue
            # each earlier box stays at most max_overlap hidden by everything painted over it
            if all(_covered(prev, [c for c, _ in placed[i + 1:]] + [corners]) <= cfg.max_overlap
                   for i, (prev, _) in enumerate(placed)):
                placed.append((corners, class_id))
                _paint(img, rng, class_id, *corners)
                break

    occlusion = max((_covered(corners, [c for c, _ in placed[i + 1:]]) for i, (corners, _) in enumerate(placed)),
                    default=0.0)

    brightness = float(rng.uniform(*cfg.brightness))
    img = img * brightness + rng.normal(0.0, cfg.noise_sigma, size=img.shape)
    img = np.clip(img, 0.0, 1.0).astype(np.float32)

    boxes = [
        GtBox(cx=(x1 + x2) / 2, cy=(y1 + y2) / 2, w=float(x2 - x1), h=float(y2 - y1), class_id=c)
        for (x1, y1, x2, y2), c in placed
    ]
    return Sample(
        image=Tensor(img.transpose(2, 0, 1), dtype=np.float32),
        boxes=boxes,
        name=f"{index:06d}",
        brightness=brightness,
        occlusion=float(occlusion),
    )


def synth_generate(seed: int, n: int, cfg: SynthConfig = None) -> List[Sample]:
    """
    Generate n scenes deterministically from a seed.

    Args:
        seed: Generator seed; the same seed yields bit-identical samples
        n: Number of samples (>= 1)
        cfg: Scene parameters

    Returns:
        List of Sample
    """
    if n < 1:
        raise UsageError(f"sample count must be >= 1, got {n}")
    cfg = cfg or SynthConfig()
    rng = np.random.default_rng(seed)
    samples = [_scene(rng, cfg, i) for i in range(n)]
    logger.info("generated %d synthetic scenes (seed %d)", n, seed)
    return samples
