"""
Dataset repository: binary PPM images plus annotations.jsonl.
Pure disk I/O, no generation logic.
"""

import json
import logging
from pathlib import Path
from typing import List

import numpy as np

from data.models import GtBox, Sample
from errors import DataError
from tensor import Tensor

logger = logging.getLogger(__name__)

ANNOTATIONS = "annotations.jsonl"


def write_ppm(path: Path, image: np.ndarray) -> None:
    """Write a (3, H, W) array in [0, 1] as binary P6 with maxval 255."""
    pixels = np.clip(np.round(image.transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    h, w, _ = pixels.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(pixels.tobytes())


def read_ppm(path: Path) -> np.ndarray:
    """Read a binary P6 file into a (3, H, W) float32 array in [0, 1]."""
    raw = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while end < len(raw) and not raw[end:end + 1].isspace():
            end += 1
        if end == pos:
            raise DataError(f"{path}: truncated PPM header")
        fields.append(raw[pos:end])
        pos = end
    pos += 1
    if fields[0] != b"P6" or int(fields[3]) != 255:
        raise DataError(f"{path}: expected binary PPM with maxval 255")
    w, h = int(fields[1]), int(fields[2])
    size = w * h * 3
    if len(raw) - pos < size:
        raise DataError(f"{path}: pixel data shorter than {w}x{h}x3")
    body = np.frombuffer(raw, dtype=np.uint8, count=size, offset=pos)
    return body.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float32) / 255.0


class DatasetRepository:
    """
    Reads and writes a dataset directory.
    Layout: <name>.ppm per image and one annotations.jsonl record per image.
    """

    def __init__(self, root):
        """
        Args:
            root: Dataset directory
        """
        self.root = Path(root)

    def save(self, samples: List[Sample]) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        lines = []
        for sample in samples:
            image_file = f"{sample.name}.ppm"
            write_ppm(self.root / image_file, sample.image.data)
            record = {
                "image": image_file,
                "boxes": [
                    {"cx": b.cx, "cy": b.cy, "w": b.w, "h": b.h, "class": b.class_id}
                    for b in sample.boxes
                ],
                "brightness": sample.brightness,
                "occlusion": sample.occlusion,
            }
            lines.append(json.dumps(record))
        (self.root / ANNOTATIONS).write_text("\n".join(lines) + "\n")
        logger.info("saved %d samples to %s", len(samples), self.root)

    def load(self) -> List[Sample]:
        """
        Load every annotated image.

        Raises:
            DataError: If the annotation file is missing or malformed, or a box leaves its image
        """
        index = self.root / ANNOTATIONS
        if not index.is_file():
            raise DataError(f"no {ANNOTATIONS} in {self.root}")
        samples = []
        for line_no, line in enumerate(index.read_text().splitlines(), start=1):
            if not line.strip():
                continue
            where = f"{ANNOTATIONS}:{line_no}"
            try:
                record = json.loads(line)
                if not isinstance(record, dict):
                    raise TypeError(f"expected an object, got {type(record).__name__}")
                name = record["image"]
                boxes = [
                    GtBox(cx=b["cx"], cy=b["cy"], w=b["w"], h=b["h"], class_id=b["class"])
                    for b in record.get("boxes", [])
                ]
            except (ValueError, KeyError, TypeError) as e:
                raise DataError(f"{where}: malformed record: {e!r}") from e
            image = read_ppm(self.root / name)
            _, h, w = image.shape
            for b in boxes:
                if b.cx - b.w / 2 < 0 or b.cy - b.h / 2 < 0 or b.cx + b.w / 2 > w or b.cy + b.h / 2 > h:
                    raise DataError(f"{where}: box {b.box} outside {w}x{h} image")
            samples.append(Sample(
                image=Tensor(image, dtype=np.float32),
                boxes=boxes,
                name=Path(name).stem,
                brightness=record.get("brightness", 1.0),
                occlusion=record.get("occlusion", 0.0),
            ))
        logger.info("loaded %d samples from %s", len(samples), self.root)
        return samples
