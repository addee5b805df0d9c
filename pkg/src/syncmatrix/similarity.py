"""Cross-modal cosine similarity matrices and the offset <-> band geometry.

Convention: rows index audio features ``i``, columns index visual features
``j``.  A stream pair with offset ``o`` (negative: video leads) lights up
the band ``i - j = -o``, i.e. below the diagonal for negative offsets.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import List, Tuple, Union

import numpy as np

from .exceptions import DegenerateInputError, DimensionError

MAX_OFFSET = 5
OFFSETS = np.arange(-MAX_OFFSET, MAX_OFFSET + 1)
N_CLASSES = OFFSETS.size


@dataclass(frozen=True)
class OffsetLabel:
    offset: int

    def __post_init__(self):
        if not -MAX_OFFSET <= self.offset <= MAX_OFFSET:
            raise ValueError(f"offset {self.offset} outside [-{MAX_OFFSET}, {MAX_OFFSET}]")

    @property
    def class_index(self) -> int:
        return self.offset + MAX_OFFSET

    @classmethod
    def from_class(cls, index: int) -> "OffsetLabel":
        return cls(int(index) - MAX_OFFSET)


def offset_to_class(offset):
    return np.asarray(offset) + MAX_OFFSET


def class_to_offset(index):
    return np.asarray(index) - MAX_OFFSET


@dataclass
class FeatureStream:
    modality: str
    features: np.ndarray
    frame_rate: float = 25.0

    def __post_init__(self):
        self.features = np.asarray(self.features)
        if self.modality not in ("audio", "visual"):
            raise ValueError(f"unknown modality {self.modality!r}")
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise DimensionError("a feature stream is a non-empty N x D matrix")

    def __len__(self) -> int:
        return self.features.shape[0]


StreamLike = Union[FeatureStream, np.ndarray]


def _features(x: StreamLike) -> np.ndarray:
    return np.asarray(x.features if isinstance(x, FeatureStream) else x, dtype=np.float64)


def build_similarity_matrix(audio: StreamLike, visual: StreamLike) -> np.ndarray:
    """``m[i, j] = cos(audio_i, visual_j)`` for two equal-length streams.

    Also accepts batches ``B x N x D`` and returns ``B x N x N``.
    """
    a, v = _features(audio), _features(visual)
    if a.shape[:-2] != v.shape[:-2] or a.shape[-2] != v.shape[-2]:
        raise DimensionError(f"streams differ in length: {a.shape} vs {v.shape}")
    if a.shape[-1] != v.shape[-1]:
        raise DimensionError(f"streams differ in embedding size: {a.shape[-1]} vs {v.shape[-1]}")
    na = np.linalg.norm(a, axis=-1, keepdims=True)
    nv = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(na == 0) or np.any(nv == 0):
        raise DegenerateInputError("zero-norm feature row")
    return (a / na) @ np.swapaxes(v / nv, -1, -2)


def band_indices(n: int, offset: int) -> List[Tuple[int, int]]:
    """Entries ``(i, j)`` with ``i - j = -offset`` inside an ``n x n`` matrix."""
    offset = int(getattr(offset, "offset", offset))
    if abs(offset) >= n:
        raise ValueError(f"offset {offset} does not fit in a {n} x {n} matrix")
    if offset <= 0:
        return [(j - offset, j) for j in range(n + offset)]
    return [(i, i + offset) for i in range(n - offset)]


def band_mask(n: int, offset: int) -> np.ndarray:
    mask = np.zeros((n, n), dtype=bool)
    for i, j in band_indices(n, offset):
        mask[i, j] = True
    return mask


def band_means(m: np.ndarray, max_offset: int = MAX_OFFSET) -> np.ndarray:
    """Mean of each band for offsets ``-max_offset..max_offset``.

    Works on ``N x N`` or ``B x N x N`` input (vectorised via ``diagonal``).
    """
    m = np.asarray(m)
    # offset o lives on the numpy diagonal k = o (k > 0 above the main one)
    return np.stack([np.diagonal(m, offset=o, axis1=-2, axis2=-1).mean(axis=-1) for o in range(-max_offset, max_offset + 1)], axis=-1)


def save_csv(path: Union[str, Path], matrix: np.ndarray) -> None:
    """Row-major CSV with 9 significant digits."""
    rows = [",".join(f"{x:.9g}" for x in row) for row in np.asarray(matrix)]
    Path(path).write_text("\n".join(rows) + "\n")


def load_csv(path: Union[str, Path]) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", ndmin=2)


def save_pgm(path: Union[str, Path], matrix: np.ndarray, lo: float = -1.0, hi: float = 1.0) -> None:
    """Binary 8-bit PGM; values linearly mapped from ``[lo, hi]`` to 0..255."""
    m = np.asarray(matrix, dtype=np.float64)
    span = hi - lo if hi > lo else 1.0
    pix = np.clip(np.rint((m - lo) / span * 255.0), 0, 255).astype(np.uint8)
    header = f"P5\n{m.shape[1]} {m.shape[0]}\n255\n".encode("ascii")
    Path(path).write_bytes(header + pix.tobytes())


def load_pgm(path: Union[str, Path]) -> np.ndarray:
    blob = Path(path).read_bytes()
    header = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", blob)
    if header is None:
        raise ValueError("not a binary PGM")
    w, h = int(header.group(1)), int(header.group(2))
    return np.frombuffer(blob, dtype=np.uint8, count=w * h, offset=header.end()).reshape(h, w)
