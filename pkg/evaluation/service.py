"""
Evaluation service: runs a model over a dataset and scores its detections.
"""

import logging
from typing import List, Sequence

from pydantic import BaseModel, Field

from brain.model import DtNetModel, decode_batch, dtnet_forward
from data.models import Detection, Sample, collate
from errors import DataError
from evaluation.metrics import OPERATING_CONF, EvalReport, evaluate_detections
from tensor import Mode

logger = logging.getLogger(__name__)


class EvalConfig(BaseModel):
    """
    conf_thresh is the operating point for precision/recall; AP curves are
    built from everything above decode_conf.
    """
    conf_thresh: float = Field(default=OPERATING_CONF, ge=0.0, le=1.0)
    nms_iou: float = Field(default=0.45, ge=0.0, le=1.0)
    decode_conf: float = Field(default=0.001, ge=0.0, le=1.0)
    batch_size: int = Field(default=8, ge=1)
    low_light: float = 0.5
    occluded: float = 0.3


def predict(model: DtNetModel, samples: Sequence[Sample], conf_thresh: float, nms_iou: float,
            batch_size: int = 8) -> List[List[Detection]]:
    """Inference-mode detections per sample, in sample order."""
    dtype = model.head.weight.dtype
    detections: List[List[Detection]] = []
    for start in range(0, len(samples), batch_size):
        images, _ = collate(samples[start:start + batch_size], dtype=dtype)
        raw = dtnet_forward(images, model, Mode.INFER)
        detections.extend(decode_batch(raw, conf_thresh, nms_iou, model.config))
    return detections


def evaluate(model: DtNetModel, dataset: Sequence[Sample], cfg: EvalConfig = None) -> EvalReport:
    """
    Score a model on a dataset.

    Besides the overall metrics the report carries mAP@0.5 on the low-light
    and occluded slices when the dataset has samples in them.

    Raises:
        DataError: If the dataset is empty
    """
    if not dataset:
        raise DataError("cannot evaluate on an empty dataset")
    cfg = cfg or EvalConfig()
    num_classes = model.config.num_classes
    dets = predict(model, dataset, cfg.decode_conf, cfg.nms_iou, cfg.batch_size)
    gts = [s.boxes for s in dataset]
    report = evaluate_detections(dets, gts, num_classes, operating_conf=cfg.conf_thresh)

    slices = {
        "low_light_map50": [i for i, s in enumerate(dataset) if s.brightness < cfg.low_light],
        "occluded_map50": [i for i, s in enumerate(dataset) if s.occlusion > cfg.occluded],
    }
    for name, members in slices.items():
        if members:
            subset = evaluate_detections([dets[i] for i in members], [gts[i] for i in members], num_classes)
            report.conditions[name] = subset.map50

    logger.info("evaluated %d images: %s", len(dataset),
                ", ".join(f"{k}={v:.4f}" for k, v in report.summary().items()))
    return report
