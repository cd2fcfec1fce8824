"""
Tests for the training step and loop.
"""

import json

import numpy as np
import pytest

from brain.model import build_model
from data.models import collate
from data.synth import SynthConfig, synth_generate
from errors import DataError, TrainingDivergedError
from tensor import planted_fault
from training.optim import OptimState
from training.service import TrainConfig, train_loop, train_step


@pytest.fixture
def scenes():
    return synth_generate(11, 4, SynthConfig(image_size=64))


def snapshot(model):
    return {name: t.data.copy() for name, t in model.named_parameters(include_buffers=True)}


class TestTrainStep:

    def test_updates_every_parameter_group(self, tiny_model, scenes):
        before = snapshot(tiny_model)
        images, targets = collate(scenes[:2])
        state = OptimState()
        loss = train_step(tiny_model, images, targets, state, lr=0.01)
        assert np.isfinite(loss.total.item())
        assert state.step == 1
        changed = [name for name, t in tiny_model.named_parameters() if not np.array_equal(t.data, before[name])]
        assert "head.weight" in changed
        assert any(name.startswith("dcb.") for name in changed)

    def test_divergence_leaves_model_untouched(self, tiny_model, scenes):
        tiny_model.head.bias.data[:] = np.nan
        before = snapshot(tiny_model)
        images, targets = collate(scenes[:1])
        state = OptimState(step=7)
        with pytest.raises(TrainingDivergedError) as info:
            train_step(tiny_model, images, targets, state, lr=0.01)
        assert info.value.step == 7
        assert info.value.exit_code == 3
        for name, t in tiny_model.named_parameters():
            np.testing.assert_array_equal(t.data, before[name], err_msg=name)

    def test_non_finite_gradient_stops_before_update(self, tiny_model, scenes):
        # The forward pass is unaffected, so only the gradients carry the inf
        before = snapshot(tiny_model)
        images, targets = collate(scenes[:1])
        state = OptimState(step=4)
        with planted_fault("conv2d", scale=np.inf):
            with pytest.raises(TrainingDivergedError) as info:
                train_step(tiny_model, images, targets, state, lr=0.01)
        assert info.value.step == 4
        assert info.value.exit_code == 3
        assert "gradient" in str(info.value)
        assert state.step == 4
        assert state.velocity == []
        for name, t in tiny_model.named_parameters():
            np.testing.assert_array_equal(t.data, before[name], err_msg=name)

    @pytest.mark.slow
    def test_repeated_steps_reduce_loss(self, tiny_model, scenes):
        images, targets = collate(scenes)
        state = OptimState()
        first = train_step(tiny_model, images, targets, state, lr=0.01).total.item()
        for _ in range(15):
            last = train_step(tiny_model, images, targets, state, lr=0.01).total.item()
        assert last < first


class TestTrainLoop:

    def test_zero_epochs_is_a_no_op(self, tiny_model, scenes):
        before = snapshot(tiny_model)
        model, records = train_loop(tiny_model, scenes, TrainConfig(epochs=0))
        assert records == []
        for name, t in model.named_parameters(include_buffers=True):
            np.testing.assert_array_equal(t.data, before[name])

    def test_empty_dataset(self, tiny_model):
        with pytest.raises(DataError):
            train_loop(tiny_model, [], TrainConfig(epochs=1))

    def test_same_seed_same_weights(self, tiny_cfg, scenes):
        cfg = TrainConfig(epochs=1, batch_size=2, seed=4)
        a, _ = train_loop(build_model(tiny_cfg, seed=1), scenes, cfg)
        b, _ = train_loop(build_model(tiny_cfg, seed=1), scenes, cfg)
        for (name, x), (_, y) in zip(a.named_parameters(include_buffers=True), b.named_parameters(include_buffers=True)):
            np.testing.assert_array_equal(x.data, y.data, err_msg=name)

    def test_metric_log_has_one_line_per_epoch(self, tiny_model, scenes, tmp_path):
        log = tmp_path / "metrics.jsonl"
        _, records = train_loop(tiny_model, scenes, TrainConfig(epochs=2, batch_size=4), log_path=log)
        lines = [json.loads(line) for line in log.read_text().splitlines()]
        assert [r["epoch"] for r in lines] == [1, 2]
        assert {"lr", "box", "obj", "cls", "total", "map50", "map5095"} <= set(lines[0])
        assert lines[0]["map50"] is None
        assert len(records) == 2

    @pytest.mark.slow
    def test_eval_set_fills_map(self, tiny_model, scenes):
        _, records = train_loop(tiny_model, scenes[:2], TrainConfig(epochs=1, batch_size=2), eval_dataset=scenes[2:])
        assert 0.0 <= records[0].map50 <= 1.0
        assert 0.0 <= records[0].map5095 <= records[0].map50 + 1e-9
