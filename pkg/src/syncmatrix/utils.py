"""Seeding and input-validation helpers shared by the estimators."""

from __future__ import annotations

import hashlib
import os
from typing import Optional, Tuple

import numpy as np
from sklearn.utils.validation import check_array

from .exceptions import ConfigError, DimensionError, EmptyInputError
from .similarity import MAX_OFFSET


def derive_seed(master: int, *names) -> int:
    """Stable 63-bit sub-seed for a named component, e.g. ``(seed, "gen", 3)``."""
    key = "/".join([str(int(master))] + [str(n) for n in names]).encode("utf-8")
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "little") >> 1


def worker_count(requested: Optional[int] = None) -> int:
    if requested:
        return max(1, int(requested))
    env = os.environ.get("SYNCMATRIX_WORKERS")
    if not env:
        return 1
    try:
        return max(1, int(env))
    except ValueError:
        raise ConfigError(f"SYNCMATRIX_WORKERS={env!r} is not an integer") from None


def check_matrices(X, n: Optional[int] = None, dtype=np.float64) -> np.ndarray:
    """Validate a stack of square similarity matrices, returning ``B x N x N``."""
    X = check_array(X, ensure_2d=False, allow_nd=True, dtype=dtype)
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3 or X.shape[1] != X.shape[2]:
        raise DimensionError(f"expected square matrices, got shape {X.shape}")
    if n is not None and X.shape[1] != n:
        raise DimensionError(f"model was built for {n} x {n} matrices, got {X.shape[1]} x {X.shape[2]}")
    return X


def check_offsets(y, count: Optional[int] = None) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1:
        raise DimensionError("offsets must be a 1-D sequence")
    if y.size == 0:
        raise EmptyInputError("no offsets given")
    if not np.all(np.equal(np.mod(y, 1), 0)):
        raise ValueError("offsets must be integers")
    y = y.astype(np.int64)
    if np.any(np.abs(y) > MAX_OFFSET):
        raise ValueError(f"offsets must lie in [-{MAX_OFFSET}, {MAX_OFFSET}]")
    if count is not None and y.size != count:
        raise DimensionError(f"{count} samples but {y.size} offsets")
    return y


def check_clips(X) -> Tuple[np.ndarray, np.ndarray]:
    """Accept a :class:`~syncmatrix.synthdata.ClipSet` or ``(audio, video)``
    arrays of shape ``B x T x R``; return float arrays."""
    if hasattr(X, "audio") and hasattr(X, "video"):
        audio, video = X.audio, X.video
    else:
        try:
            audio, video = X
        except (TypeError, ValueError):
            raise TypeError("expected a ClipSet or an (audio, video) pair") from None
    audio = check_array(audio, ensure_2d=False, allow_nd=True, dtype=(np.float32, np.float64))
    video = check_array(video, ensure_2d=False, allow_nd=True, dtype=(np.float32, np.float64))
    if audio.ndim == 2:
        audio, video = audio[None], video[None]
    if audio.ndim != 3 or video.ndim != 3:
        raise DimensionError("raw clips must be B x T x R")
    if audio.shape[:2] != video.shape[:2]:
        raise DimensionError(f"audio {audio.shape[:2]} and video {video.shape[:2]} differ in count/length")
    return audio, video
