"""Binary sequence files and CSV export.

Layout (little-endian): magic ``SVSQ``, u32 version, u32 N, u32 T, u32 Dx, then N*T*Dx f64
values in (sequence, step, feature) order, optionally followed by N*T u8 regime labels.
"""
import csv
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np
import structlog

from ..utils.exceptions import LengthError, MagicMismatch, NonFinite, ShapeMismatch

logger = structlog.get_logger(__name__)

MAGIC = b"SVSQ"
VERSION = 1
_HEADER = struct.Struct("<4sIIII")


@dataclass
class SequenceData:
    """N sequences of T steps with Dx features and optional per-step labels"""
    x: np.ndarray
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        if self.x.ndim != 3:
            raise ShapeMismatch(f"sequences must be (N, T, Dx), got {self.x.shape}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.uint8)
            if self.labels.shape != self.x.shape[:2]:
                raise ShapeMismatch(f"labels must be {self.x.shape[:2]}, got {self.labels.shape}")

    @property
    def N(self) -> int:
        return self.x.shape[0]

    @property
    def T(self) -> int:
        return self.x.shape[1]

    @property
    def Dx(self) -> int:
        return self.x.shape[2]


def to_bytes(data: SequenceData) -> bytes:
    if not np.all(np.isfinite(data.x)):
        raise NonFinite("sequence values must be finite")
    out = _HEADER.pack(MAGIC, VERSION, data.N, data.T, data.Dx) + data.x.astype("<f8").tobytes()
    if data.labels is not None:
        out += data.labels.astype(np.uint8).tobytes()
    return out


def from_bytes(raw: bytes) -> SequenceData:
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise MagicMismatch("not a sequence file (bad magic)")
    if len(raw) < _HEADER.size:
        raise LengthError(f"header truncated: {len(raw)} of {_HEADER.size} bytes")
    _, version, N, T, Dx = _HEADER.unpack_from(raw)
    if version != VERSION:
        raise MagicMismatch(f"unsupported sequence file version {version}")
    n_values = N * T * Dx
    payload_end = _HEADER.size + 8 * n_values
    if len(raw) < payload_end:
        raise LengthError(f"payload truncated: expected {8 * n_values} bytes, got {len(raw) - _HEADER.size}")
    x = np.frombuffer(raw, dtype="<f8", count=n_values, offset=_HEADER.size).astype(np.float64)
    if not np.all(np.isfinite(x)):
        raise NonFinite("sequence file contains non-finite values")
    trailing = len(raw) - payload_end
    labels = None
    if trailing == N * T and trailing > 0:
        labels = np.frombuffer(raw, dtype=np.uint8, count=N * T, offset=payload_end).reshape(N, T).copy()
    elif trailing != 0:
        raise LengthError(f"{trailing} unexpected trailing bytes")
    return SequenceData(x=x.reshape(N, T, Dx), labels=labels)


def write(path: str, data: SequenceData):
    with open(path, "wb") as handle:
        handle.write(to_bytes(data))
    logger.info("sequence_file_written", path=path, N=data.N, T=data.T, Dx=data.Dx,
                labels=data.labels is not None)


def read(path: str) -> SequenceData:
    with open(path, "rb") as handle:
        data = from_bytes(handle.read())
    logger.debug("sequence_file_read", path=path, N=data.N, T=data.T, Dx=data.Dx)
    return data


def export_csv(path: str, data: SequenceData):
    """One row per (sequence, step): seq, t, x0..x{Dx-1}[, label]"""
    header = ["seq", "t"] + [f"x{i}" for i in range(data.Dx)]
    if data.labels is not None:
        header.append("label")
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(header)
        for n in range(data.N):
            for t in range(data.T):
                row = [n, t] + [repr(float(v)) for v in data.x[n, t]]
                if data.labels is not None:
                    row.append(int(data.labels[n, t]))
                writer.writerow(row)
