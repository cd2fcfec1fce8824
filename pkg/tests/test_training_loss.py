"""
Tests for target assignment, CIoU and the composite detection loss.
"""

import numpy as np
import pytest

from brain.model import encode_box
from data.models import GtBox
from errors import DataError, ShapeError
from tensor import Tensor, verification_mode
from tensor.gradcheck import gradcheck
from training.loss import assign_targets, ciou, detection_loss, wh_iou


def perfect_head(cfg, targets, logit: float = 30.0) -> np.ndarray:
    """Head map whose decoding reproduces every target with certainty."""
    g = cfg.grid_size
    raw = np.zeros((len(targets), cfg.num_anchors, 5 + cfg.num_classes, g, g))
    raw[:, :, 4:] = -logit
    anchors = np.asarray(cfg.anchors)
    for b, boxes in enumerate(targets):
        for gt in boxes:
            a = int(np.argmax(wh_iou(gt.w, gt.h, anchors)))
            gx, gy, t = encode_box(gt.box, cfg.anchors[a], cfg.head_stride)
            raw[b, a, :4, gy, gx] = t
            raw[b, a, 4, gy, gx] = logit
            raw[b, a, 5 + gt.class_id, gy, gx] = logit
    return raw.reshape(len(targets), cfg.head_channels, g, g)


class TestAssignment:

    def test_center_cell_and_best_anchor(self, tiny_cfg):
        targets = [[GtBox(cx=40, cy=10, w=15, h=11, class_id=1)]]
        assigned = assign_targets(targets, tiny_cfg, (2, 2))
        assert len(assigned) == 1
        assert (assigned.cell_y[0], assigned.cell_x[0], assigned.anchor[0]) == (0, 1, 1)
        assert assigned.classes[0] == 1

    def test_duplicate_slot_keeps_first_box(self, tiny_cfg):
        targets = [[GtBox(cx=10, cy=10, w=8, h=8, class_id=0), GtBox(cx=12, cy=12, w=8, h=8, class_id=3)]]
        assigned = assign_targets(targets, tiny_cfg, (2, 2))
        assert len(assigned) == 1
        assert assigned.classes[0] == 0

    def test_edge_center_clamps_to_last_cell(self, tiny_cfg):
        targets = [[GtBox(cx=60, cy=60, w=8, h=8, class_id=0)], [GtBox(cx=59, cy=64, w=4, h=1e-6, class_id=0)]]
        assigned = assign_targets(targets, tiny_cfg, (2, 2))
        assert assigned.cell_y.tolist() == [1, 1]

    def test_box_outside_image(self, tiny_cfg):
        with pytest.raises(DataError):
            assign_targets([[GtBox(cx=62, cy=30, w=10, h=10, class_id=0)]], tiny_cfg, (2, 2))

    def test_unknown_class(self, tiny_cfg):
        with pytest.raises(DataError):
            assign_targets([[GtBox(cx=30, cy=30, w=10, h=10, class_id=4)]], tiny_cfg, (2, 2))

    def test_empty_targets(self, tiny_cfg):
        assert len(assign_targets([[], []], tiny_cfg, (2, 2))) == 0


class TestCiou:

    def test_identical_boxes(self):
        target = np.array([[10.0, 10.0, 4.0, 6.0]])
        pred = tuple(Tensor(target[:, i], dtype=np.float64) for i in range(4))
        assert ciou(pred, target).item() == pytest.approx(1.0, abs=1e-8)

    def test_disjoint_boxes_are_penalized_by_distance(self):
        target = np.array([[0.0, 0.0, 2.0, 2.0]])
        near = tuple(Tensor([v], dtype=np.float64) for v in (3.0, 0.0, 2.0, 2.0))
        far = tuple(Tensor([v], dtype=np.float64) for v in (9.0, 0.0, 2.0, 2.0))
        assert ciou(far, target).item() < ciou(near, target).item() < 0.0

    def test_bounded(self, rng):
        target = rng.uniform(1.0, 20.0, size=(50, 4))
        pred = tuple(Tensor(rng.uniform(1.0, 20.0, size=50), dtype=np.float64) for _ in range(4))
        values = ciou(pred, target).data
        assert np.all(values >= -1.5) and np.all(values <= 1.0 + 1e-9)


class TestDetectionLoss:

    def test_perfect_prediction_has_near_zero_loss(self, float64, tiny_cfg):
        targets = [[GtBox(cx=40, cy=24, w=10, h=9, class_id=2)], [GtBox(cx=20, cy=44, w=14, h=12, class_id=0)]]
        raw = Tensor(perfect_head(tiny_cfg, targets))
        loss = detection_loss(raw, targets, tiny_cfg)
        assert loss.total.item() <= 1e-6

    def test_no_targets_leaves_only_objectness(self, tiny_cfg):
        raw = Tensor(np.zeros((2, tiny_cfg.head_channels, 2, 2)))
        loss = detection_loss(raw, [[], []], tiny_cfg)
        assert loss.box.item() == 0.0 and loss.cls.item() == 0.0
        assert loss.obj.item() == pytest.approx(np.log(2.0), rel=1e-5)
        assert loss.total.item() == pytest.approx(np.log(2.0), rel=1e-5)

    def test_weights_combine_terms(self, rng, tiny_cfg):
        targets = [[GtBox(cx=40, cy=24, w=10, h=9, class_id=2)]]
        raw = Tensor(rng.standard_normal((1, tiny_cfg.head_channels, 2, 2)))
        loss = detection_loss(raw, targets, tiny_cfg, weights=(2.0, 3.0, 5.0))
        expected = 2.0 * loss.box.item() + 3.0 * loss.obj.item() + 5.0 * loss.cls.item()
        assert loss.total.item() == pytest.approx(expected, rel=1e-5)
        assert set(loss.as_record()) == {"box", "obj", "cls", "total"}

    def test_batch_mismatch(self, tiny_cfg):
        with pytest.raises(ShapeError):
            detection_loss(Tensor(np.zeros((2, tiny_cfg.head_channels, 2, 2))), [[]], tiny_cfg)

    def test_channel_mismatch(self, tiny_cfg):
        with pytest.raises(ShapeError):
            detection_loss(Tensor(np.zeros((1, 7, 2, 2))), [[]], tiny_cfg)

    def test_gradient_matches_finite_differences(self, rng, tiny_cfg):
        targets = [[GtBox(cx=40, cy=24, w=10, h=9, class_id=2), GtBox(cx=12, cy=50, w=16, h=10, class_id=1)]]
        with verification_mode():
            raw = Tensor(rng.standard_normal((1, tiny_cfg.head_channels, 2, 2)))
            result = gradcheck(lambda: detection_loss(raw, targets, tiny_cfg).total, [raw], h=1e-6, tolerance=1e-4)
        assert result.passed, result.max_rel_err
