"""チェックポイントファイル (PKNT 形式) の読み書き

レイアウト (すべてリトルエンディアン):
    "PKNT" | u32 version | u32 len + UTF-8 JSON | 各テンソル:
    u32 len + name | u32 rank | u64 x rank | float32 データ (row-major) | u32 CRC32
"""
import json
import struct
import zlib
from pathlib import Path
from typing import Dict
import numpy as np
from pydantic import ValidationError
from .logger import logger
from .error_handler import (CheckpointError, ChecksumMismatchError, MagicMismatchError,
                            ShapeMismatchError, TruncatedCheckpointError, UnsupportedVersionError)
from .model import ModelCheckpoint, ModelConfig, param_shapes

MAGIC = b"PKNT"
SUPPORTED_VERSIONS = (1,)


def encode_checkpoint(ck: ModelCheckpoint) -> bytes:
    header = {
        "config": ck.config.model_dump(mode="json"),
        "metadata": ck.metadata,
        "tensor_count": len(ck.tensors),
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")

    parts = [MAGIC, struct.pack("<I", ck.format_version), struct.pack("<I", len(header_bytes)), header_bytes]
    for name in sorted(ck.tensors):
        tensor = np.ascontiguousarray(ck.tensors[name], dtype="<f4")
        name_bytes = name.encode("utf-8")
        parts.append(struct.pack("<I", len(name_bytes)))
        parts.append(name_bytes)
        parts.append(struct.pack("<I", tensor.ndim))
        parts.append(struct.pack(f"<{tensor.ndim}Q", *tensor.shape))
        parts.append(tensor.tobytes(order="C"))

    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


class _Reader:
    def __init__(self, data: bytes, end: int):
        self.data = data
        self.pos = 0
        self.end = end

    def take(self, n: int) -> bytes:
        if self.pos + n > self.end:
            raise TruncatedCheckpointError(f"Checkpoint truncated: needed {n} bytes at offset {self.pos}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def validate_tensors(config: ModelConfig, tensors: Dict[str, np.ndarray]):
    expected = param_shapes(config)
    missing = sorted(set(expected) - set(tensors))
    extra = sorted(set(tensors) - set(expected))
    if missing or extra:
        raise ShapeMismatchError(f"Tensor set does not match config (missing {missing}, unexpected {extra})")
    for name, shape in expected.items():
        if tuple(tensors[name].shape) != shape:
            raise ShapeMismatchError(f"Tensor {name} has shape {tensors[name].shape}, config expects {shape}")


def decode_checkpoint(data: bytes) -> ModelCheckpoint:
    if len(data) < 4 or data[:4] != MAGIC:
        if len(data) < 4 and MAGIC.startswith(data):
            raise TruncatedCheckpointError("Checkpoint shorter than its magic bytes")
        raise MagicMismatchError(f"Bad magic bytes {data[:4]!r}, expected {MAGIC!r}")

    reader = _Reader(data, len(data))
    reader.take(4)
    version = reader.u32()
    if version not in SUPPORTED_VERSIONS:
        raise UnsupportedVersionError(f"Unsupported checkpoint version {version}")

    try:
        header = json.loads(reader.take(reader.u32()).decode("utf-8"))
        config = ModelConfig(**header["config"])
        count = int(header["tensor_count"])
    except TruncatedCheckpointError:
        raise
    except (ValueError, KeyError, TypeError, ValidationError) as e:
        raise CheckpointError(f"Invalid checkpoint header: {e}") from e

    tensors = {}
    for _ in range(count):
        name = reader.take(reader.u32()).decode("utf-8")
        rank = reader.u32()
        shape = struct.unpack(f"<{rank}Q", reader.take(8 * rank))
        n_bytes = 4 * int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(reader.take(n_bytes), dtype="<f4").reshape(shape).astype(np.float32)

    remaining = len(data) - reader.pos
    if remaining < 4:
        raise TruncatedCheckpointError("Checkpoint truncated before its CRC32")
    if remaining > 4:
        raise ChecksumMismatchError(f"{remaining - 4} unexpected trailing bytes in checkpoint")
    stored = struct.unpack("<I", data[reader.pos:])[0]
    if stored != (zlib.crc32(data[:reader.pos]) & 0xFFFFFFFF):
        raise ChecksumMismatchError("Checkpoint CRC32 mismatch")

    validate_tensors(config, tensors)
    return ModelCheckpoint(config, tensors, format_version=version, metadata=header.get("metadata", {}))


def save_checkpoint(ck: ModelCheckpoint, path: str) -> str:
    validate_tensors(ck.config, ck.tensors)
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = out.with_name(out.name + ".tmp")
    tmp.write_bytes(encode_checkpoint(ck))
    tmp.replace(out)
    logger.info(f"Checkpoint saved to {out} ({len(ck.tensors)} tensors)")
    return str(out)


def load_checkpoint(path: str) -> ModelCheckpoint:
    target = Path(path)
    try:
        data = target.read_bytes()
    except OSError as e:
        raise CheckpointError(f"Cannot read checkpoint {path}: {e}") from e
    ck = decode_checkpoint(data)
    logger.info(f"Checkpoint loaded from {path} (version {ck.format_version}, {ck.config.feature_kind} features)")
    return ck
