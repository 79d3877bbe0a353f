"""Versioned binary checkpoints of named f64 tensors.

Layout (little-endian): magic ``SVAE``, u32 version, u32 count, then per tensor
u32 name length, UTF-8 name, u32 ndim, u32 dims, f64 values. The model configuration is
stored as the UTF-8 bytes of its JSON under ``meta.config``.
"""
import struct
from typing import Dict, Optional, Tuple

import numpy as np
import structlog

from ..config.settings import ModelConfig
from ..utils.exceptions import LengthError, MagicMismatch

logger = structlog.get_logger(__name__)

MAGIC = b"SVAE"
VERSION = 1
CONFIG_KEY = "meta.config"


def to_bytes(tensors: Dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name in sorted(tensors):
        value = np.asarray(tensors[name], dtype="<f8")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)) + encoded)
        parts.append(struct.pack(f"<I{value.ndim}I", value.ndim, *value.shape))
        parts.append(value.tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise LengthError(f"checkpoint truncated at byte {self.pos}")
        chunk = self.raw[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def from_bytes(raw: bytes) -> Dict[str, np.ndarray]:
    if raw[:4] != MAGIC:
        raise MagicMismatch("not a checkpoint (bad magic)")
    reader = _Reader(raw)
    reader.take(4)
    version = reader.u32()
    if version != VERSION:
        raise MagicMismatch(f"unsupported checkpoint version {version}")
    tensors = {}
    for _ in range(reader.u32()):
        name = reader.take(reader.u32()).decode("utf-8")
        shape = tuple(reader.u32() for _ in range(reader.u32()))
        count = int(np.prod(shape)) if shape else 1
        tensors[name] = np.frombuffer(reader.take(8 * count), dtype="<f8").astype(np.float64).reshape(shape)
    if reader.pos != len(raw):
        raise LengthError(f"{len(raw) - reader.pos} unexpected trailing bytes")
    return tensors


def save(path: str, params: Dict[str, np.ndarray], config: Optional[ModelConfig] = None):
    tensors = dict(params)
    if config is not None:
        tensors[CONFIG_KEY] = np.frombuffer(config.model_dump_json().encode("utf-8"), dtype=np.uint8)
    with open(path, "wb") as handle:
        handle.write(to_bytes(tensors))
    logger.info("checkpoint_saved", path=path, tensors=len(params))


def load(path: str) -> Tuple[Dict[str, np.ndarray], Optional[ModelConfig]]:
    """Parameters and, when stored, the model configuration"""
    with open(path, "rb") as handle:
        tensors = from_bytes(handle.read())
    config = None
    if CONFIG_KEY in tensors:
        text = tensors.pop(CONFIG_KEY).astype(np.uint8).tobytes().decode("utf-8")
        config = ModelConfig.model_validate_json(text)
    logger.debug("checkpoint_loaded", path=path, tensors=len(tensors))
    return tensors, config
