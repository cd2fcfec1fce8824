"""
Training service: deterministic mini-batch SGD over a dataset with a
per-epoch JSON-lines metric log.
"""

import logging
import math
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field
from tqdm import tqdm

from brain.model import DtNetModel, dtnet_forward
from data.models import GtBox, Sample, collate
from errors import DataError, TrainingDivergedError
from evaluation.service import EvalConfig, evaluate
from tensor import GradTape, Mode, Tensor
from training.loss import LOSS_WEIGHTS, LossBreakdown, detection_loss
from training.optim import MOMENTUM, WEIGHT_DECAY, LrSchedule, OptimState, one_cycle_lr, sgd_step

logger = logging.getLogger(__name__)


class TrainConfig(BaseModel):
    epochs: int = Field(default=10, ge=0)
    batch_size: int = Field(default=8, ge=1)
    seed: int = 0
    max_lr: float = Field(default=0.01, gt=0)
    momentum: float = Field(default=MOMENTUM, ge=0, lt=1)
    weight_decay: float = Field(default=WEIGHT_DECAY, ge=0)
    loss_weights: Tuple[float, float, float] = LOSS_WEIGHTS


class EpochRecord(BaseModel):
    """One line of the metric log; eval metrics are null without an eval set."""
    epoch: int
    lr: float
    box: float
    obj: float
    cls: float
    total: float
    map50: Optional[float] = None
    map5095: Optional[float] = None


def train_step(
    model: DtNetModel,
    images: Tensor,
    targets: List[List[GtBox]],
    state: OptimState,
    lr: float,
    weights: Tuple[float, float, float] = LOSS_WEIGHTS,
) -> LossBreakdown:
    """
    Forward, backward and one SGD update on a single batch.

    Returns:
        The loss measured before the update

    Raises:
        TrainingDivergedError: If the loss or any gradient is not finite; the
            parameters are left untouched
    """
    params = model.parameters()
    with GradTape() as tape:
        tape.watch(*params)
        raw = dtnet_forward(images, model, Mode.TRAIN)
        loss = detection_loss(raw, targets, model.config, weights)
        if not np.isfinite(loss.total.item()):
            raise TrainingDivergedError(state.step, f"loss became {loss.total.item()} at step {state.step}")
        tape.backward(loss.total)
    grads = [tape.gradient(p) for p in params]
    for (name, _), grad in zip(model.named_parameters(), grads):
        if not np.all(np.isfinite(grad)):
            raise TrainingDivergedError(state.step, f"gradient of {name} became non-finite at step {state.step}")
    sgd_step(params, grads, state, lr)
    return loss


def _append_log(path: Path, record: EpochRecord) -> None:
    with path.open("a") as f:
        f.write(record.model_dump_json() + "\n")


def train_loop(
    model: DtNetModel,
    dataset: Sequence[Sample],
    cfg: TrainConfig,
    eval_dataset: Optional[Sequence[Sample]] = None,
    log_path=None,
) -> Tuple[DtNetModel, List[EpochRecord]]:
    """
    Train a model in place.

    Args:
        model: Model to update
        dataset: Training samples (non-empty)
        cfg: Epochs, batch size, seed and optimizer settings
        eval_dataset: If given, evaluated after every epoch
        log_path: JSON-lines file each EpochRecord is appended to

    Returns:
        (model, per-epoch records)

    Raises:
        DataError: If the dataset is empty
        TrainingDivergedError: If the loss stops being finite
    """
    if not dataset:
        raise DataError("cannot train on an empty dataset")
    records: List[EpochRecord] = []
    if cfg.epochs == 0:
        return model, records

    rng = np.random.default_rng(cfg.seed)
    steps_per_epoch = math.ceil(len(dataset) / cfg.batch_size)
    sched = LrSchedule(max_lr=cfg.max_lr, total_steps=cfg.epochs * steps_per_epoch)
    state = OptimState(momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    dtype = model.head.weight.dtype
    log_path = Path(log_path) if log_path else None

    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(dataset))
        sums = {"box": 0.0, "obj": 0.0, "cls": 0.0, "total": 0.0}
        lr = 0.0
        batches = range(0, len(dataset), cfg.batch_size)
        for start in tqdm(batches, desc=f"epoch {epoch}/{cfg.epochs}", disable=None, leave=False):
            images, targets = collate([dataset[i] for i in order[start:start + cfg.batch_size]], dtype=dtype)
            lr = one_cycle_lr(state.step, sched)
            loss = train_step(model, images, targets, state, lr, cfg.loss_weights)
            for key, value in loss.as_record().items():
                sums[key] += value

        means = {key: value / steps_per_epoch for key, value in sums.items()}
        record = EpochRecord(epoch=epoch, lr=lr, **means)
        if eval_dataset:
            report = evaluate(model, eval_dataset, EvalConfig())
            record.map50, record.map5095 = report.map50, report.map5095
        logger.info("epoch %d: lr=%.2e box=%.4f obj=%.4f cls=%.4f total=%.4f map50=%s",
                    epoch, lr, means["box"], means["obj"], means["cls"], means["total"], record.map50)
        records.append(record)
        if log_path:
            _append_log(log_path, record)

    return model, records
