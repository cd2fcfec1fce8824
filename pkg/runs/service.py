"""
Run service: orchestration shared by the commands.
Holds the gradient verification suite, the ablation harness and the
dataset split / detection export helpers.
"""

import csv
import json
import logging
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel

from brain.blocks import build_elan, build_mpcm, conv, elan_forward, mpcm_forward
from brain.config import ModelConfig, Variant
from brain.dcl import build_dcl, dcl_forward
from brain.mab import build_cab, build_mab, build_wmsa, channel_attention, mab_forward, window_msa
from brain.model import DtNetModel, build_model, dtnet_forward
from brain.params import count_parameters, init_conv, init_norm
from brain.tvconv import build_tvconv, tvconv_forward
from data.models import Detection, GtBox, Sample
from errors import UsageError
from evaluation.service import EvalConfig, evaluate
from tensor import Mode, NormKind, Tensor, verification_mode
from tensor import ops
from tensor.gradcheck import gradcheck, projection
from training.loss import detection_loss
from training.service import TrainConfig, train_loop

logger = logging.getLogger(__name__)

GRADCHECK_TOLERANCE = 1e-3
GRADCHECK_STEP = 1e-6
# Entries checked per input tensor; small tensors are checked exhaustively.
GRADCHECK_SAMPLES = 12
# The whole-model case has ~100 parameter tensors and a full forward per entry.
# None checks every entry: the loss only reaches its box ops through the few
# assigned slots, and max-pool only routes to a quarter of its inputs.
SAMPLES_PER_BLOCK: Dict[str, Optional[int]] = {"model": 2, "loss": None, "mpcm_elan": None}

Case = Tuple[Callable[[], Tensor], List[Tensor]]


class GradientRow(BaseModel):
    block: str
    max_rel_err: float
    checked: int
    passed: bool


class AblationRow(BaseModel):
    variant: str
    params: int
    map50: float


# ==================== GRADIENT SUITE ====================

def _scalar(out: Tensor, weights: np.ndarray) -> Tensor:
    return ops.sum(ops.mul(out, weights))


def _away_from_zero(rng: np.random.Generator, dims: Tuple[int, ...]) -> np.ndarray:
    """Values with |x| >= 0.1 so piecewise ops stay on one side of their kink."""
    return rng.uniform(0.1, 1.5, size=dims) * rng.choice([-1.0, 1.0], size=dims)


def _case_conv2d(rng: np.random.Generator) -> Case:
    x = Tensor(rng.standard_normal((2, 4, 6, 6)))
    w = Tensor(rng.standard_normal((6, 2, 3, 3)))
    b = Tensor(rng.standard_normal(6))
    proj = projection((2, 6, 3, 3), rng)
    return lambda: _scalar(ops.conv2d(x, w, b, stride=2, pad=1, groups=2), proj), [x, w, b]


def _case_normalize(rng: np.random.Generator) -> Case:
    x = Tensor(rng.standard_normal((3, 4, 3, 3)))
    bn, ln = init_norm(4), init_norm(4, NormKind.LAYER)
    bn.scale.data[:] = rng.uniform(0.5, 1.5, 4)
    ln.shift.data[:] = rng.standard_normal(4)
    p1, p2 = projection(x.dims, rng), projection(x.dims, rng)

    def fn() -> Tensor:
        batch = ops.normalize(x, NormKind.BATCH, bn.scale, bn.shift, mode=Mode.TRAIN,
                              running_mean=bn.running_mean, running_var=bn.running_var)
        layer = ops.normalize(x, NormKind.LAYER, ln.scale, ln.shift, mode=Mode.INFER)
        return ops.add(_scalar(batch, p1), _scalar(layer, p2))

    return fn, [x, bn.scale, bn.shift, ln.scale, ln.shift]


def _case_activation(rng: np.random.Generator) -> Case:
    x = Tensor(_away_from_zero(rng, (2, 3, 4, 4)))
    projs = [projection(x.dims, rng) for _ in range(3)]
    kinds = ("silu", "relu", "sigmoid")

    def fn() -> Tensor:
        terms = [_scalar(ops.activation(x, kind), p) for kind, p in zip(kinds, projs)]
        return ops.add(ops.add(terms[0], terms[1]), terms[2])

    return fn, [x]


def _case_dcl(rng: np.random.Generator) -> Case:
    x = Tensor(rng.standard_normal((2, 4, 5, 5)))
    p = build_dcl(rng, 4, gate=True)
    proj = projection(x.dims, rng)
    return lambda: _scalar(dcl_forward(x, p), proj), [x] + p.parameters()


def _case_channel_attention(rng: np.random.Generator) -> Case:
    x = Tensor(rng.standard_normal((2, 8, 4, 4)))
    p = build_cab(rng, 8, 4)
    proj = projection(x.dims, rng)
    return lambda: _scalar(channel_attention(x, p), proj), [x] + p.parameters()


def _case_window_msa(rng: np.random.Generator) -> Case:
    # 6x6 with window 4 exercises the padding path
    x = Tensor(rng.standard_normal((1, 4, 6, 6)))
    p = build_wmsa(rng, 4, heads=2, window=4, rel_pos_bias=True)
    proj = projection(x.dims, rng)
    return lambda: _scalar(window_msa(x, p), proj), [x] + p.parameters()


def _case_mab(rng: np.random.Generator) -> Case:
    x = Tensor(rng.standard_normal((1, 4, 4, 4)))
    p = build_mab(rng, 4, heads=2, window=4, alpha=0.5, reduction=2, rel_pos_bias=True)
    proj = projection(x.dims, rng)
    return lambda: _scalar(mab_forward(x, p), proj), [x] + p.parameters()


def _case_tvconv(rng: np.random.Generator) -> Case:
    x = Tensor(rng.standard_normal((2, 3, 4, 4)))
    p = build_tvconv(rng, 3, (4, 4), affine_channels=2, hidden=4)
    proj = projection(x.dims, rng)
    return lambda: _scalar(tvconv_forward(x, p), proj), [x] + p.parameters()


def _case_head(rng: np.random.Generator) -> Case:
    cfg = ModelConfig.tiny()
    x = Tensor(rng.standard_normal((2, cfg.widths[2], 2, 2)))
    head = init_conv(rng, cfg.widths[2], cfg.head_channels, (1, 1))
    proj = projection((2, cfg.head_channels, 2, 2), rng)
    return lambda: _scalar(conv(x, head), proj), [x, head.weight, head.bias]


def _case_mpcm_elan(rng: np.random.Generator) -> Case:
    x = Tensor(rng.standard_normal((2, 4, 4, 4)))
    mpcm = build_mpcm(rng, 4)
    elan = build_elan(rng, 4, 4, pairs=1)
    proj = projection((2, 4, 2, 2), rng)
    return lambda: _scalar(elan_forward(mpcm_forward(x, mpcm), elan), proj), [x] + mpcm.parameters() + elan.parameters()


def _case_loss(rng: np.random.Generator) -> Case:
    cfg = ModelConfig.tiny()
    raw = Tensor(0.25 * rng.standard_normal((2, cfg.head_channels, 2, 2)))
    # Each box overlaps the prediction of its slot and has an aspect ratio
    # unlike its anchor, so the clamp and aspect terms all carry gradient.
    targets = [
        [GtBox(cx=18.0, cy=14.0, w=12.0, h=6.0, class_id=1), GtBox(cx=52.0, cy=46.0, w=20.0, h=9.0, class_id=3)],
        [GtBox(cx=44.0, cy=18.0, w=6.0, h=13.0, class_id=0)],
    ]
    # Unit weights keep box gradients well above the relative-error floor
    return lambda: detection_loss(raw, targets, cfg, weights=(1.0, 1.0, 1.0)).total, [raw]


def _case_model(rng: np.random.Generator) -> Case:
    cfg = ModelConfig.tiny()
    model = build_model(cfg, seed=int(rng.integers(1 << 31)))
    images = Tensor(rng.uniform(0.0, 1.0, size=(2, 3, cfg.input_size, cfg.input_size)))
    targets = [[GtBox(cx=24.0, cy=30.0, w=14.0, h=10.0, class_id=2)], []]
    return lambda: detection_loss(dtnet_forward(images, model, Mode.TRAIN), targets, cfg).total, model.parameters()


GRADIENT_BLOCKS: Dict[str, Callable[[np.random.Generator], Case]] = {
    "conv2d": _case_conv2d,
    "normalize": _case_normalize,
    "activation": _case_activation,
    "mpcm_elan": _case_mpcm_elan,
    "dcl": _case_dcl,
    "channel_attention": _case_channel_attention,
    "window_msa": _case_window_msa,
    "mab": _case_mab,
    "tvconv": _case_tvconv,
    "head": _case_head,
    "loss": _case_loss,
    "model": _case_model,
}


def run_gradient_suite(
    seed: int,
    blocks: Optional[Sequence[str]] = None,
    tolerance: float = GRADCHECK_TOLERANCE,
    samples: Optional[int] = GRADCHECK_SAMPLES,
) -> List[GradientRow]:
    """
    Finite-difference check of every block in 64-bit mode.

    Args:
        seed: Seeds shapes' contents and the sampled entries
        blocks: Subset of GRADIENT_BLOCKS names (all by default)
        tolerance: Maximum accepted relative error
        samples: Entries checked per input tensor (None checks all); blocks
            listed in SAMPLES_PER_BLOCK use their own budget

    Returns:
        One GradientRow per block, in suite order

    Raises:
        UsageError: If a block name is unknown
    """
    names = list(blocks) if blocks else list(GRADIENT_BLOCKS)
    unknown = [name for name in names if name not in GRADIENT_BLOCKS]
    if unknown:
        raise UsageError(f"unknown gradient blocks {unknown}; choose from {list(GRADIENT_BLOCKS)}")
    rows = []
    with verification_mode():
        for index, name in enumerate(names):
            rng = np.random.default_rng([seed, index])
            fn, inputs = GRADIENT_BLOCKS[name](rng)
            budget = SAMPLES_PER_BLOCK.get(name, samples)
            if budget is not None and samples is not None:
                budget = min(budget, samples)
            result = gradcheck(fn, inputs, h=GRADCHECK_STEP, tolerance=tolerance, samples=budget, rng=rng)
            rows.append(GradientRow(block=name, max_rel_err=result.max_rel_err,
                                    checked=result.checked, passed=result.passed))
            logger.info("gradcheck %-18s max rel err %.3e (%d entries)", name, result.max_rel_err, result.checked)
    return rows


# ==================== DATASETS ====================

def split_holdout(samples: Sequence[Sample], fraction: float, seed: int) -> Tuple[List[Sample], List[Sample]]:
    """
    Deterministically hold out a fraction of a dataset.

    Returns:
        (train, held_out); held_out is empty when fraction is 0 or the set has one sample
    """
    count = int(round(len(samples) * fraction))
    count = min(count, len(samples) - 1)
    if count <= 0:
        return list(samples), []
    order = np.random.default_rng(seed).permutation(len(samples))
    held = set(order[:count].tolist())
    train = [s for i, s in enumerate(samples) if i not in held]
    return train, [samples[i] for i in sorted(held)]


def write_detections(samples: Sequence[Sample], detections: Sequence[Sequence[Detection]], path) -> None:
    """One JSON record per image: {image, detections: [{cx, cy, w, h, class, score}]}."""
    with Path(path).open("w") as f:
        for sample, dets in zip(samples, detections):
            record = {
                "image": f"{sample.name}.ppm",
                "detections": [
                    {"cx": d.cx, "cy": d.cy, "w": d.w, "h": d.h, "class": d.class_id, "score": d.score}
                    for d in dets
                ],
            }
            f.write(json.dumps(record) + "\n")
    logger.info("wrote detections for %d images to %s", len(samples), path)


# ==================== ABLATION ====================

def train_variant(
    base: ModelConfig,
    variant: Variant,
    train_set: Sequence[Sample],
    train_cfg: TrainConfig,
    eval_set: Optional[Sequence[Sample]] = None,
    log_path=None,
) -> DtNetModel:
    cfg = base.model_copy(update={"variant": variant})
    model = build_model(cfg, seed=train_cfg.seed)
    model, _ = train_loop(model, train_set, train_cfg, eval_dataset=eval_set, log_path=log_path)
    return model


def run_ablation(
    base: ModelConfig,
    train_set: Sequence[Sample],
    eval_set: Sequence[Sample],
    train_cfg: TrainConfig,
) -> List[AblationRow]:
    """
    Train and evaluate every variant under the same seed and budget, one after another.

    Returns:
        One AblationRow per variant, full model first
    """
    rows = []
    for variant in Variant:
        logger.info("ablation: training %s", variant.value)
        model = train_variant(base, variant, train_set, train_cfg)
        report = evaluate(model, eval_set, EvalConfig())
        rows.append(AblationRow(variant=variant.value, params=count_parameters(model), map50=report.map50))
    return rows


def write_ablation_csv(rows: Sequence[AblationRow], path) -> None:
    with Path(path).open("w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["variant", "params", "map50"])
        for row in rows:
            writer.writerow([row.variant, row.params, f"{row.map50:.6f}"])
