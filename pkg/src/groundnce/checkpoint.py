"""Binary checkpoint format for named float64 tensors.

Layout: magic ``IGCK``, format version as little-endian u32, then one
record per tensor: name length (u32), UTF-8 name, rank (u64), dims (u64
each), row-major float64 payload, all little-endian. Records run to end
of file. Writes are atomic (temp file + rename).
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import DataFormatError

MAGIC = b"IGCK"
VERSION = 1


def save_tensors(path: str | os.PathLike, tensors: Mapping[str, np.ndarray]) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<I", VERSION))
            for name in tensors:
                arr = np.ascontiguousarray(tensors[name], dtype="<f8")
                encoded = name.encode("utf-8")
                fh.write(struct.pack("<I", len(encoded)))
                fh.write(encoded)
                fh.write(struct.pack("<Q", arr.ndim))
                for dim in arr.shape:
                    fh.write(struct.pack("<Q", dim))
                fh.write(arr.tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_tensors(path: str | os.PathLike) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise DataFormatError(f"{path}: bad magic {raw[:4]!r}")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != VERSION:
        raise DataFormatError(f"{path}: unsupported version {version}")
    offset = 8
    out: dict[str, np.ndarray] = {}
    while offset < len(raw):
        try:
            (name_len,) = struct.unpack_from("<I", raw, offset)
            offset += 4
            name = raw[offset : offset + name_len].decode("utf-8")
            offset += name_len
            (rank,) = struct.unpack_from("<Q", raw, offset)
            offset += 8
            dims = struct.unpack_from(f"<{rank}Q", raw, offset)
            offset += 8 * rank
            count = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
            offset += 8 * count
        except (struct.error, ValueError, UnicodeDecodeError) as exc:
            raise DataFormatError(f"{path}: truncated or corrupt record") from exc
        out[name] = arr.reshape(dims).astype(np.float64)
    return out
