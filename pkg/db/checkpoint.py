"""
Checkpoint persistence: versioned little-endian binary file of named tensors.

Layout:
    "DTNT" | u32 version | u32 tensor count
    per tensor: u32 name length | UTF-8 name | u8 dtype | u8 rank | u64 dims[rank] | raw data
    u32 CRC32 of all preceding bytes

dtype codes: 0 = f32, 1 = f64, 2 = u8. The model configuration travels as a
u8 tensor named "__config__" holding its JSON.
"""

import logging
import math
import struct
import zlib
from pathlib import Path
from typing import Dict, Optional

import numpy as np
from pydantic import ValidationError

from brain.config import ModelConfig
from brain.model import DtNetModel, build_model
from errors import CheckpointError

logger = logging.getLogger(__name__)

MAGIC = b"DTNT"
VERSION = 1
CONFIG_ENTRY = "__config__"

DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1")}
CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.uint8): 2}


def _encode_tensor(name: str, array: np.ndarray) -> bytes:
    code = CODES.get(array.dtype)
    if code is None:
        raise CheckpointError(f"unsupported dtype {array.dtype}", tensor=name)
    encoded = name.encode("utf-8")
    header = struct.pack("<I", len(encoded)) + encoded + struct.pack("<BB", code, array.ndim)
    header += struct.pack(f"<{array.ndim}Q", *array.shape)
    return header + np.ascontiguousarray(array, dtype=DTYPES[code]).tobytes()


def save_checkpoint(m: DtNetModel, path) -> None:
    """
    Write every named tensor (running statistics included) and the config.

    Raises:
        CheckpointError: If the file cannot be written
    """
    entries = [(CONFIG_ENTRY, np.frombuffer(m.config.model_dump_json().encode("utf-8"), dtype=np.uint8))]
    entries += [(name, t.data) for name, t in m.named_parameters(include_buffers=True)]
    body = MAGIC + struct.pack("<II", VERSION, len(entries))
    body += b"".join(_encode_tensor(name, array) for name, array in entries)
    try:
        Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))
    except OSError as e:
        raise CheckpointError(f"cannot write checkpoint {path}: {e}") from e
    logger.info("saved checkpoint %s (%d tensors)", path, len(entries))


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, count: int, what: str, tensor: Optional[str] = None) -> bytes:
        if self.pos + count > len(self.raw):
            raise CheckpointError(f"file truncated while reading {what}", tensor=tensor)
        chunk = self.raw[self.pos:self.pos + count]
        self.pos += count
        return chunk

    def unpack(self, fmt: str, what: str, tensor: Optional[str] = None):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what, tensor))


def read_tensors(path) -> Dict[str, np.ndarray]:
    """
    Parse and verify a checkpoint file into name -> array.

    Raises:
        CheckpointError: On bad magic, unknown version, truncation (naming the
            tensor being read), checksum mismatch or trailing bytes
    """
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    reader = _Reader(raw)
    if reader.take(4, "magic") != MAGIC:
        raise CheckpointError("bad magic: not a DTNT checkpoint")
    version, count = reader.unpack("<II", "header")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")

    tensors: Dict[str, np.ndarray] = {}
    for index in range(count):
        (name_len,) = reader.unpack("<I", f"name length of entry {index}")
        name = reader.take(name_len, f"name of entry {index}").decode("utf-8", errors="replace")
        code, rank = reader.unpack("<BB", "dtype and rank", name)
        if code not in DTYPES:
            raise CheckpointError(f"unknown dtype code {code}", tensor=name)
        dims = reader.unpack(f"<{rank}Q", "dims", name)
        dtype = DTYPES[code]
        size = math.prod(dims) * dtype.itemsize
        if size > len(raw) - reader.pos:
            raise CheckpointError(f"dims {dims} need {size} bytes, file is truncated", tensor=name)
        data = reader.take(size, "tensor data", name)
        tensors[name] = np.frombuffer(data, dtype=dtype).reshape(dims).copy()

    body_end = reader.pos
    (crc,) = reader.unpack("<I", "checksum")
    if crc != zlib.crc32(raw[:body_end]):
        raise CheckpointError("checksum mismatch: file is corrupted")
    if reader.pos != len(raw):
        raise CheckpointError(f"{len(raw) - reader.pos} unexpected bytes after the checksum")
    return tensors


def load_checkpoint(path, cfg: Optional[ModelConfig] = None) -> DtNetModel:
    """
    Rebuild a model from a checkpoint.

    Args:
        path: Checkpoint file
        cfg: Expected configuration; when given it must equal the stored one

    Returns:
        DtNetModel with every tensor restored bit-exactly

    Raises:
        CheckpointError: On any format problem, a config mismatch, or a tensor
            missing from / extra to / mis-dimensioned against the model manifest
    """
    tensors = read_tensors(path)
    blob = tensors.pop(CONFIG_ENTRY, None)
    if blob is None:
        raise CheckpointError("checkpoint carries no model configuration", tensor=CONFIG_ENTRY)
    try:
        stored = ModelConfig.model_validate_json(blob.tobytes())
    except ValidationError as e:
        raise CheckpointError(f"stored configuration is invalid: {e}", tensor=CONFIG_ENTRY) from e
    if cfg is not None and cfg.model_dump() != stored.model_dump():
        raise CheckpointError("checkpoint configuration does not match the requested model", tensor=CONFIG_ENTRY)

    model = build_model(stored)
    manifest = dict(model.named_parameters(include_buffers=True))
    for name in tensors:
        if name not in manifest:
            raise CheckpointError("tensor not in model manifest", tensor=name)
    for name, t in manifest.items():
        if name not in tensors:
            raise CheckpointError("tensor missing from checkpoint", tensor=name)
        if tensors[name].shape != t.dims:
            raise CheckpointError(f"dims {tensors[name].shape} != manifest dims {t.dims}", tensor=name)
        t.data = tensors[name]
    logger.info("loaded checkpoint %s (%d tensors)", path, len(manifest))
    return model
