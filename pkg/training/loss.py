"""
Composite detection loss: CIoU box regression, objectness BCE and class BCE.
"""

import logging
from dataclasses import dataclass
from typing import Dict, Sequence, Tuple

import numpy as np

from brain.config import ModelConfig
from data.models import GtBox
from errors import DataError, ShapeError
from tensor import Tensor
from tensor import ops

logger = logging.getLogger(__name__)

LOSS_WEIGHTS = (0.05, 1.0, 0.5)
EPS = 1e-9
BOUNDS_TOLERANCE = 1e-6


@dataclass
class LossBreakdown:
    box: Tensor
    obj: Tensor
    cls: Tensor
    total: Tensor

    def as_record(self) -> Dict[str, float]:
        return {"box": self.box.item(), "obj": self.obj.item(), "cls": self.cls.item(), "total": self.total.item()}


@dataclass
class Assignment:
    """Positive (image, anchor, cell) slots and the boxes they regress to."""
    image: np.ndarray
    anchor: np.ndarray
    cell_y: np.ndarray
    cell_x: np.ndarray
    boxes: np.ndarray
    classes: np.ndarray

    def __len__(self) -> int:
        return int(self.image.size)


# ==================== ASSIGNMENT ====================

def wh_iou(w: float, h: float, anchors: np.ndarray) -> np.ndarray:
    """IoU of a box against every anchor with all centers aligned."""
    inter = np.minimum(w, anchors[:, 0]) * np.minimum(h, anchors[:, 1])
    return inter / (w * h + anchors[:, 0] * anchors[:, 1] - inter)


def assign_targets(targets: Sequence[Sequence[GtBox]], cfg: ModelConfig, grid: Tuple[int, int]) -> Assignment:
    """
    Give each ground-truth box its center cell and best-fitting anchor.

    A slot claimed twice keeps the first box.

    Raises:
        DataError: If a box leaves the image implied by the grid
    """
    stride = cfg.head_stride
    gh, gw = grid
    height, width = gh * stride, gw * stride
    anchors = np.asarray(cfg.anchors, dtype=np.float64)

    slots, rows = set(), []
    for b, image_boxes in enumerate(targets):
        for gt in image_boxes:
            x1, y1, x2, y2 = gt.cx - gt.w / 2, gt.cy - gt.h / 2, gt.cx + gt.w / 2, gt.cy + gt.h / 2
            if (x1 < -BOUNDS_TOLERANCE or y1 < -BOUNDS_TOLERANCE
                    or x2 > width + BOUNDS_TOLERANCE or y2 > height + BOUNDS_TOLERANCE):
                raise DataError(f"image {b}: box {gt.box} outside {width}x{height} image")
            if gt.class_id >= cfg.num_classes:
                raise DataError(f"image {b}: class {gt.class_id} >= {cfg.num_classes} classes")
            gx = min(int(gt.cx // stride), gw - 1)
            gy = min(int(gt.cy // stride), gh - 1)
            a = int(np.argmax(wh_iou(gt.w, gt.h, anchors)))
            if (b, a, gy, gx) in slots:
                continue
            slots.add((b, a, gy, gx))
            rows.append((b, a, gy, gx, gt.cx, gt.cy, gt.w, gt.h, gt.class_id))

    table = np.asarray(rows, dtype=np.float64).reshape(-1, 9)
    as_index = lambda col: table[:, col].astype(np.intp)  # noqa: E731
    return Assignment(
        image=as_index(0), anchor=as_index(1), cell_y=as_index(2), cell_x=as_index(3),
        boxes=table[:, 4:8], classes=as_index(8),
    )


# ==================== CIOU ====================

def ciou(pred: Sequence[Tensor], target: np.ndarray) -> Tensor:
    """
    Complete IoU of predicted (cx, cy, w, h) columns against fixed targets (M, 4).

    The aspect trade-off weight is differentiated through like every other term.
    """
    pcx, pcy, pw, ph = pred
    tcx, tcy, tw, th = (target[:, i] for i in range(4))
    px1, px2 = pcx - pw * 0.5, pcx + pw * 0.5
    py1, py2 = pcy - ph * 0.5, pcy + ph * 0.5
    tx1, tx2 = tcx - tw / 2, tcx + tw / 2
    ty1, ty2 = tcy - th / 2, tcy + th / 2

    iw = ops.maximum(ops.minimum(px2, tx2) - ops.maximum(px1, tx1), 0.0)
    ih = ops.maximum(ops.minimum(py2, ty2) - ops.maximum(py1, ty1), 0.0)
    inter = iw * ih
    union = pw * ph + tw * th - inter + EPS
    overlap = inter / union

    rho2 = ops.power(pcx - tcx, 2) + ops.power(pcy - tcy, 2)
    cw = ops.maximum(px2, tx2) - ops.minimum(px1, tx1)
    ch = ops.maximum(py2, ty2) - ops.minimum(py1, ty1)
    c2 = ops.power(cw, 2) + ops.power(ch, 2) + EPS

    v = ops.power(ops.sub(np.arctan(tw / th), ops.atan(pw / ph)), 2) * (4.0 / np.pi ** 2)
    alpha = v / (1.0 - overlap + v + EPS)
    return overlap - rho2 / c2 - v * alpha


# ==================== LOSS ====================

def detection_loss(
    raw: Tensor,
    targets: Sequence[Sequence[GtBox]],
    cfg: ModelConfig,
    weights: Tuple[float, float, float] = LOSS_WEIGHTS,
) -> LossBreakdown:
    """
    Loss of a raw head map against per-image ground truth.

    Args:
        raw: Head map (N, A*(5+K), Gh, Gw)
        targets: Ground-truth boxes per image, in batch order
        cfg: Model configuration (anchors, stride, classes)
        weights: (box, obj, cls) weights of the total

    Returns:
        LossBreakdown whose total is differentiable with respect to raw

    Raises:
        ShapeError: If raw does not match cfg or the batch size
        DataError: If a ground-truth box leaves the image
    """
    if raw.data.ndim != 4 or raw.dims[1] != cfg.head_channels:
        raise ShapeError(f"head map dims {raw.dims} do not match {cfg.head_channels} channels")
    n, _, gh, gw = raw.dims
    if len(targets) != n:
        raise ShapeError(f"{len(targets)} target lists for a batch of {n}")

    a, k = cfg.num_anchors, cfg.num_classes
    head = ops.transpose(ops.reshape(raw, (n, a, 5 + k, gh, gw)), (0, 1, 3, 4, 2))
    assigned = assign_targets(targets, cfg, (gh, gw))
    zero = Tensor.wrap(np.zeros((), dtype=raw.dtype))

    obj_target = np.zeros((n, a, gh, gw), dtype=raw.dtype)
    obj_target[assigned.image, assigned.anchor, assigned.cell_y, assigned.cell_x] = 1.0
    obj_logits = ops.index(head, (slice(None), slice(None), slice(None), slice(None), 4))
    obj = ops.mean(ops.bce_with_logits(obj_logits, obj_target))

    if len(assigned) == 0:
        box, cls = zero, zero
    else:
        picked = ops.index(head, (assigned.image, assigned.anchor, assigned.cell_y, assigned.cell_x))
        s = ops.sigmoid(picked[:, :4])
        stride = float(cfg.head_stride)
        anchors = np.asarray(cfg.anchors, dtype=raw.dtype)[assigned.anchor]
        cx = (s[:, 0] * 2.0 - 0.5 + assigned.cell_x.astype(raw.dtype)) * stride
        cy = (s[:, 1] * 2.0 - 0.5 + assigned.cell_y.astype(raw.dtype)) * stride
        w = ops.power(s[:, 2] * 2.0, 2) * anchors[:, 0]
        h = ops.power(s[:, 3] * 2.0, 2) * anchors[:, 1]
        box = ops.mean(1.0 - ciou((cx, cy, w, h), assigned.boxes.astype(raw.dtype)))

        cls_target = np.zeros((len(assigned), k), dtype=raw.dtype)
        cls_target[np.arange(len(assigned)), assigned.classes] = 1.0
        cls = ops.mean(ops.bce_with_logits(picked[:, 5:], cls_target))

    w_box, w_obj, w_cls = weights
    total = box * w_box + obj * w_obj + cls * w_cls
    return LossBreakdown(box=box, obj=obj, cls=cls, total=total)

