"""Binary tensor container shared by model checkpoints and dataset files.

Layout (all integers little-endian u32)::

    b"SYNCCKPT" version
    repeated until EOF:
        name_len  name(utf-8)  rank  dims[rank]  payload(f32, row-major)
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from pathlib import Path
from typing import Dict, Mapping, Union

import numpy as np

from .exceptions import CheckpointError

MAGIC = b"SYNCCKPT"
VERSION = 1

PathLike = Union[str, Path]


def dumps(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    for name, value in tensors.items():
        arr = np.asarray(value, dtype="<f4", order="C")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def loads(blob: bytes) -> "OrderedDict[str, np.ndarray]":
    if blob[:8] != MAGIC:
        raise CheckpointError("not a SYNCCKPT file (bad magic)")
    if len(blob) < 12:
        raise CheckpointError("truncated header")
    (version,) = struct.unpack_from("<I", blob, 8)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    out: "OrderedDict[str, np.ndarray]" = OrderedDict()
    pos = 12
    try:
        while pos < len(blob):
            (n,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos : pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            count = int(np.prod(dims, dtype=np.int64))
            if pos + 4 * count > len(blob):
                raise CheckpointError(f"truncated payload for {name!r}")
            out[name] = np.frombuffer(blob, dtype="<f4", count=count, offset=pos).reshape(dims).copy()
            pos += 4 * count
    except struct.error as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from exc
    return out


def save(path: PathLike, tensors: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(tensors))


def load(path: PathLike) -> "OrderedDict[str, np.ndarray]":
    return loads(Path(path).read_bytes())


def select(tensors: Mapping[str, np.ndarray], prefix: str) -> Dict[str, np.ndarray]:
    """Sub-table of names starting with ``prefix``, with the prefix stripped."""
    return {k[len(prefix) :]: v for k, v in tensors.items() if k.startswith(prefix)}
