"""Named-tensor container: the on-disk form of parameter and optimizer arrays.

Layout (little-endian): magic ``TDCK``, u32 format version, u32 entry count,
then per entry u16 name length, UTF-8 name, u8 ndim, u32 per dimension and the
raw float64 values.
"""

from __future__ import annotations

import logging
import os
import struct
from collections.abc import Mapping
from pathlib import Path

import numpy as np

from .errors import CheckpointError

logger = logging.getLogger(__name__)

MAGIC = b"TDCK"
FORMAT_VERSION = 1


def write_tensors(path: str | Path, tensors: Mapping[str, np.ndarray]) -> Path:
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    chunks = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(tensors))]
    for name, value in tensors.items():
        arr = np.ascontiguousarray(value, dtype="<f8")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    tmp = out.with_suffix(out.suffix + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    os.replace(tmp, out)
    logger.debug("wrote %d tensors to %s", len(tensors), out)
    return out


def read_tensors(path: str | Path) -> dict[str, np.ndarray]:
    src = Path(path)
    try:
        data = src.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {src}: {exc}") from exc
    if data[:4] != MAGIC:
        raise CheckpointError(f"{src} is not a tensor container")
    try:
        version, count = struct.unpack_from("<II", data, 4)
        if version != FORMAT_VERSION:
            raise CheckpointError(
                f"{src}: format version {version}, this build reads {FORMAT_VERSION}"
            )
        offset = 12
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", data, offset)
            offset += 2
            name = data[offset : offset + name_len].decode("utf-8")
            offset += name_len
            (ndim,) = struct.unpack_from("<B", data, offset)
            offset += 1
            shape = struct.unpack_from(f"<{ndim}I", data, offset)
            offset += 4 * ndim
            size = int(np.prod(shape, dtype=np.int64))
            end = offset + 8 * size
            if end > len(data):
                raise CheckpointError(f"{src}: truncated data for tensor {name!r}")
            tensors[name] = np.frombuffer(data[offset:end], dtype="<f8").reshape(shape).copy()
            offset = end
    except (struct.error, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{src}: corrupt tensor container ({exc})") from exc
    if offset != len(data):
        raise CheckpointError(f"{src}: {len(data) - offset} trailing bytes")
    return tensors
