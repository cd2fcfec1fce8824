"""
Detection metrics: IoU, greedy matching, all-points AP, mAP@0.5 and
mAP@0.5:0.95, and precision-recall curve export.
"""

import csv
import logging
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field

from data.models import Detection, GtBox

logger = logging.getLogger(__name__)

Box = Tuple[float, float, float, float]

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
OPERATING_CONF = 0.25


class PrPoint(BaseModel):
    recall: float
    precision: float
    score: float


class EvalReport(BaseModel):
    """Precision/recall at the operating threshold, AP per class and the PR curves (IoU 0.5)."""
    precision: float = 0.0
    recall: float = 0.0
    ap50: Dict[int, float] = Field(default_factory=dict)
    ap5095: Dict[int, float] = Field(default_factory=dict)
    map50: float = 0.0
    map5095: float = 0.0
    pr_curve: Dict[int, List[PrPoint]] = Field(default_factory=dict)
    conditions: Dict[str, float] = Field(default_factory=dict)

    def summary(self) -> Dict[str, float]:
        return {
            "precision": self.precision,
            "recall": self.recall,
            "map50": self.map50,
            "map5095": self.map5095,
        }


# ==================== IOU ====================

def to_corners(box: Box) -> Box:
    cx, cy, w, h = box
    return cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2


def iou_xyxy(a: Box, b: Box) -> float:
    """IoU of two (x1, y1, x2, y2) boxes."""
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return float(inter / union) if union > 0 else 0.0


def iou(a: Box, b: Box) -> float:
    """IoU of two (cx, cy, w, h) boxes."""
    return iou_xyxy(to_corners(a), to_corners(b))


# ==================== MATCHING & AP ====================

def match_detections(
    dets: Sequence[Sequence[Detection]],
    gts: Sequence[Sequence[GtBox]],
    iou_thresh: float,
) -> Tuple[np.ndarray, np.ndarray, int]:
    """
    Greedy matching per image in descending score order.

    Each detection takes the highest-IoU still-unmatched ground truth of its
    class; it is a true positive when that IoU reaches iou_thresh.

    Returns:
        (scores, is_true_positive, ground-truth count)
    """
    scores, hits = [], []
    for image_dets, image_gts in zip(dets, gts):
        taken = [False] * len(image_gts)
        for det in sorted(image_dets, key=lambda d: -d.score):
            best, best_iou = -1, 0.0
            for j, gt in enumerate(image_gts):
                if taken[j] or gt.class_id != det.class_id:
                    continue
                overlap = iou(det.box, gt.box)
                if overlap > best_iou:
                    best, best_iou = j, overlap
            hit = best >= 0 and best_iou >= iou_thresh
            if hit:
                taken[best] = True
            scores.append(det.score)
            hits.append(hit)
    total = sum(len(g) for g in gts)
    return np.asarray(scores, dtype=np.float64), np.asarray(hits, dtype=bool), total


def precision_recall(scores: np.ndarray, hits: np.ndarray, total: int) -> List[PrPoint]:
    """
    One point per distinct score cutoff (ties form a single cutoff), in
    descending score order, with the monotone-envelope precision.
    """
    if total == 0 or scores.size == 0:
        return []
    order = np.argsort(-scores, kind="stable")
    scores, hits = scores[order], hits[order]
    tp = np.cumsum(hits)
    fp = np.cumsum(~hits)
    last = np.r_[np.nonzero(np.diff(scores))[0], scores.size - 1]
    recall = tp[last] / total
    precision = tp[last] / (tp[last] + fp[last])
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    return [PrPoint(recall=float(r), precision=float(p), score=float(s))
            for r, p, s in zip(recall, envelope, scores[last])]


def average_precision(points: Sequence[PrPoint]) -> float:
    """Area under the all-points interpolated precision-recall curve."""
    area, prev_recall = 0.0, 0.0
    for pt in points:
        area += (pt.recall - prev_recall) * pt.precision
        prev_recall = pt.recall
    return float(area)


def compute_ap(dets: Sequence[Detection], gts: Sequence[GtBox], iou_thresh: float = 0.5) -> float:
    """AP of one image's detections against its ground truth."""
    return average_precision(precision_recall(*match_detections([dets], [gts], iou_thresh)))


# ==================== DATASET METRICS ====================

def _only(items, class_id: int):
    return [[x for x in image if x.class_id == class_id] for image in items]


def evaluate_detections(
    dets: Sequence[Sequence[Detection]],
    gts: Sequence[Sequence[GtBox]],
    num_classes: int,
    operating_conf: float = OPERATING_CONF,
) -> EvalReport:
    """
    Score per-image detections against per-image ground truth.

    Classes without ground truth are left out of the class means.

    Args:
        dets: Detections per image
        gts: Ground truth per image (same order)
        num_classes: Number of classes
        operating_conf: Score cutoff for the single precision/recall pair

    Returns:
        EvalReport
    """
    classes = [c for c in range(num_classes) if any(g.class_id == c for image in gts for g in image)]
    report = EvalReport()
    if not classes:
        return report

    per_threshold = {t: {} for t in IOU_THRESHOLDS}
    for c in classes:
        class_dets, class_gts = _only(dets, c), _only(gts, c)
        for t in IOU_THRESHOLDS:
            points = precision_recall(*match_detections(class_dets, class_gts, t))
            per_threshold[t][c] = average_precision(points)
            if t == IOU_THRESHOLDS[0]:
                report.pr_curve[c] = points

    report.ap50 = dict(per_threshold[IOU_THRESHOLDS[0]])
    report.ap5095 = {c: float(np.mean([per_threshold[t][c] for t in IOU_THRESHOLDS])) for c in classes}
    report.map50 = float(np.mean(list(report.ap50.values())))
    report.map5095 = float(np.mean([np.mean(list(per_threshold[t].values())) for t in IOU_THRESHOLDS]))

    confident = [[d for d in image if d.score >= operating_conf] for image in dets]
    _, hits, total = match_detections(confident, gts, IOU_THRESHOLDS[0])
    report.precision = float(hits.mean()) if hits.size else 0.0
    report.recall = float(hits.sum() / total) if total else 0.0
    return report


# ==================== EXPORT ====================

def export_pr_curve(report: EvalReport, path) -> None:
    """
    Write the PR curves as CSV: header class,recall,precision,score; rows by
    class, then ascending recall; each class starts at the origin (0, 1).

    Raises:
        OSError: If the path cannot be written
    """
    rows = []
    for c in sorted(report.pr_curve):
        rows.append((c, 0.0, 1.0, 1.0))
        points = sorted(report.pr_curve[c], key=lambda p: p.recall)
        rows.extend((c, p.recall, p.precision, p.score) for p in points)

    path = Path(path)
    with path.open("w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["class", "recall", "precision", "score"])
        for c, r, p, s in rows:
            writer.writerow([c, f"{r:.6f}", f"{p:.6f}", f"{s:.6f}"])
    logger.info("wrote %d PR rows to %s", len(rows), path)
