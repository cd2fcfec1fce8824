"""
Tests for the synthetic scene generator and the on-disk dataset format.
"""

import json

import numpy as np
import pytest

from data.models import GtBox, Sample, collate
from data.repository import ANNOTATIONS, DatasetRepository, read_ppm, write_ppm
from data.synth import SynthConfig, synth_generate
from errors import DataError, UsageError
from tensor import Tensor


class TestSynth:

    def test_same_seed_is_bit_identical(self):
        a = synth_generate(3, 3, SynthConfig(image_size=64))
        b = synth_generate(3, 3, SynthConfig(image_size=64))
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.image.data, y.image.data)
            assert x.boxes == y.boxes

    def test_different_seeds_differ(self):
        a = synth_generate(1, 1, SynthConfig(image_size=64))[0]
        b = synth_generate(2, 1, SynthConfig(image_size=64))[0]
        assert not np.array_equal(a.image.data, b.image.data)

    def test_images_and_boxes_are_valid(self):
        for sample in synth_generate(5, 8, SynthConfig(image_size=96)):
            assert sample.image.dims == (3, 96, 96)
            assert sample.image.dtype == np.float32
            assert 0.0 <= sample.image.data.min() and sample.image.data.max() <= 1.0
            assert sample.boxes
            for b in sample.boxes:
                assert 0 <= b.cx - b.w / 2 and b.cx + b.w / 2 <= 96
                assert 0 <= b.cy - b.h / 2 and b.cy + b.h / 2 <= 96
                assert 0 <= b.class_id < 4
            assert 0.3 <= sample.brightness <= 1.0
            assert 0.0 <= sample.occlusion <= 0.6

    def test_total_occlusion_of_each_box_is_bounded(self):
        for sample in synth_generate(8, 40, SynthConfig(image_size=96, max_objects=8)):
            masks = []
            for b in sample.boxes:
                mask = np.zeros((96, 96), dtype=bool)
                mask[int(b.cy - b.h / 2):int(b.cy + b.h / 2), int(b.cx - b.w / 2):int(b.cx + b.w / 2)] = True
                masks.append(mask)
            # boxes are listed in paint order, so later boxes cover earlier ones
            hidden = [
                (masks[i] & np.any(masks[i + 1:], axis=0)).sum() / masks[i].sum() if i + 1 < len(masks) else 0.0
                for i in range(len(masks))
            ]
            assert max(hidden) <= 0.6 + 1e-12
            assert sample.occlusion == pytest.approx(max(hidden))

    def test_class_histogram_covers_every_class(self):
        counts = np.zeros(4, dtype=int)
        for sample in synth_generate(21, 200, SynthConfig(image_size=128)):
            for b in sample.boxes:
                counts[b.class_id] += 1
        share = counts / counts.sum()
        assert counts.sum() >= 400
        assert np.all((share > 0.15) & (share < 0.35)), share

    def test_class_ids_stay_below_num_classes(self):
        ids = {b.class_id for s in synth_generate(6, 30, SynthConfig(image_size=64, num_classes=2)) for b in s.boxes}
        assert ids == {0, 1}

    def test_count_must_be_positive(self):
        with pytest.raises(UsageError):
            synth_generate(0, 0)

    def test_names_are_sequential(self):
        names = [s.name for s in synth_generate(0, 3, SynthConfig(image_size=32))]
        assert names == ["000000", "000001", "000002"]


class TestPpm:

    def test_round_trip_is_quantized(self, tmp_path, rng):
        image = rng.uniform(size=(3, 5, 7))
        write_ppm(tmp_path / "x.ppm", image)
        back = read_ppm(tmp_path / "x.ppm")
        assert back.shape == (3, 5, 7)
        np.testing.assert_allclose(back, image, atol=0.5 / 255 + 1e-6)

    def test_header_comments_are_skipped(self, tmp_path):
        path = tmp_path / "c.ppm"
        path.write_bytes(b"P6\n# made by hand\n1 1\n255\n" + bytes([255, 0, 51]))
        np.testing.assert_allclose(read_ppm(path).reshape(-1), [1.0, 0.0, 0.2])

    def test_wrong_magic(self, tmp_path):
        path = tmp_path / "p3.ppm"
        path.write_bytes(b"P3\n1 1\n255\n0 0 0\n")
        with pytest.raises(DataError):
            read_ppm(path)

    def test_short_pixel_data(self, tmp_path):
        path = tmp_path / "short.ppm"
        path.write_bytes(b"P6\n2 2\n255\n" + bytes(5))
        with pytest.raises(DataError):
            read_ppm(path)


class TestRepository:

    def test_save_then_load(self, tmp_path):
        samples = synth_generate(9, 3, SynthConfig(image_size=32))
        DatasetRepository(tmp_path).save(samples)
        loaded = DatasetRepository(tmp_path).load()
        assert [s.name for s in loaded] == [s.name for s in samples]
        for got, want in zip(loaded, samples):
            assert got.boxes == want.boxes
            assert got.brightness == want.brightness
            np.testing.assert_allclose(got.image.data, want.image.data, atol=0.5 / 255 + 1e-6)

    def test_annotation_record_format(self, tmp_path):
        sample = Sample(image=Tensor(np.zeros((3, 4, 4))), boxes=[GtBox(cx=2, cy=2, w=2, h=2, class_id=1)], name="a")
        DatasetRepository(tmp_path).save([sample])
        record = json.loads((tmp_path / ANNOTATIONS).read_text().splitlines()[0])
        assert record["image"] == "a.ppm"
        assert record["boxes"] == [{"cx": 2.0, "cy": 2.0, "w": 2.0, "h": 2.0, "class": 1}]

    def test_missing_annotations(self, tmp_path):
        with pytest.raises(DataError):
            DatasetRepository(tmp_path).load()

    @pytest.mark.parametrize("line", [
        '{"image": "a.ppm", "boxes": [',
        '{"boxes": []}',
        '{"image": "a.ppm", "boxes": [{"cx": 1, "cy": 1, "w": 2, "h": 2}]}',
        '{"image": "a.ppm", "boxes": [{"cx": 1, "cy": 1, "w": 0, "h": 2, "class": 0}]}',
        '{"image": "a.ppm", "boxes": [{"cx": 1, "cy": 1, "w": 2, "h": 2, "class": -1}]}',
        '["a.ppm"]',
        '{"image": "a.ppm", "boxes": 3}',
    ])
    def test_malformed_record(self, tmp_path, line):
        write_ppm(tmp_path / "a.ppm", np.zeros((3, 4, 4)))
        (tmp_path / ANNOTATIONS).write_text(line + "\n")
        with pytest.raises(DataError, match=f"{ANNOTATIONS}:1") as info:
            DatasetRepository(tmp_path).load()
        assert info.value.exit_code == 2

    def test_box_outside_image(self, tmp_path):
        write_ppm(tmp_path / "a.ppm", np.zeros((3, 4, 4)))
        record = {"image": "a.ppm", "boxes": [{"cx": 3, "cy": 2, "w": 4, "h": 2, "class": 0}]}
        (tmp_path / ANNOTATIONS).write_text(json.dumps(record) + "\n")
        with pytest.raises(DataError):
            DatasetRepository(tmp_path).load()


class TestCollate:

    def test_stacks_images_and_keeps_boxes(self):
        samples = synth_generate(4, 2, SynthConfig(image_size=32))
        images, targets = collate(samples, dtype=np.float64)
        assert images.dims == (2, 3, 32, 32)
        assert images.dtype == np.float64
        assert targets == [s.boxes for s in samples]
