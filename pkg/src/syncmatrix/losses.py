"""Cross-modal training objectives: pairwise contrastive, multi-way matching
on inverse Euclidean distance, and its angular (cosine) variant.

All functions accept ``N x D`` feature matrices or batches ``B x N x D``
(losses are then averaged over the batch).  Row ``i`` of the audio features
is matched with row ``targets[i]`` of the visual features; by default
``targets[i] = i`` (synchronised training pairs).
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .exceptions import DimensionError, EmptyInputError, NumericError
from .nn import Module

INVERSE_DISTANCE_EPS = 1e-8


def _check_pair(audio: Tensor, visual: Tensor, min_n: int = 1):
    audio, visual = ad._as_tensor(audio), ad._as_tensor(visual)
    if audio.shape != visual.shape:
        raise DimensionError(f"audio {audio.shape} and visual {visual.shape} features differ in shape")
    if audio.ndim not in (2, 3):
        raise DimensionError("features must be N x D or B x N x D")
    n = audio.shape[-2]
    if n == 0:
        raise EmptyInputError("empty batch")
    if n < min_n:
        raise DimensionError(f"multi-way losses need N >= {min_n}, got {n}")
    return audio, visual


def contrastive_loss(audio, visual, labels, margin: float = 1.0) -> Tensor:
    """``1/(2N) * sum(y d^2 + (1 - y) max(margin - d, 0)^2)`` over pairs."""
    if margin <= 0:
        raise ValueError("margin must be positive")
    audio, visual = _check_pair(audio, visual)
    y = np.asarray(labels, dtype=audio.dtype)
    if y.shape != audio.shape[:-1]:
        raise DimensionError(f"need one label per pair, got {y.shape} for {audio.shape[:-1]}")
    diff = audio - visual
    sq = ad.tsum(diff * diff, axis=-1)
    d = ad.sqrt(ad.maximum(sq, 1e-24))
    hinge = ad.relu(margin - d)
    per_pair = sq * y + hinge * hinge * (1.0 - y)
    return ad.mean(per_pair) * 0.5


def _matching_cross_entropy(logits: Tensor, targets: Optional[np.ndarray]) -> Tensor:
    n = logits.shape[-1]
    if targets is None:
        targets = np.arange(n)
    targets = np.asarray(targets)
    logp = ad.log_softmax(logits, axis=-1)
    if logits.ndim == 2:
        rows = np.nonzero((targets >= 0) & (targets < n))[0]
        if rows.size == 0:
            raise EmptyInputError("no row has a positive partner in range")
        picked = ad.take(logp, (rows, targets[rows]))
        return -ad.mean(picked)
    # batched: targets is (B, N) or shared (N,)
    targets = np.broadcast_to(targets, logits.shape[:-1])
    b_idx, rows = np.nonzero((targets >= 0) & (targets < n))
    if b_idx.size == 0:
        raise EmptyInputError("no row has a positive partner in range")
    picked = ad.take(logp, (b_idx, rows, targets[b_idx, rows]))
    return -ad.mean(picked)


def pairwise_distance(audio: Tensor, visual: Tensor) -> Tensor:
    """Euclidean distances ``d[..., i, j] = |a_i - v_j|``."""
    a = ad.reshape(audio, audio.shape[:-1] + (1, audio.shape[-1]))
    v = ad.reshape(visual, visual.shape[:-2] + (1,) + visual.shape[-2:])
    diff = a - v
    return ad.sqrt(ad.maximum(ad.tsum(diff * diff, axis=-1), 1e-24))


def multiway_euclidean_loss(audio, visual, targets=None, eps: float = INVERSE_DISTANCE_EPS) -> Tensor:
    """Softmax cross-entropy over inverse distances ``1 / (d_ij + eps)``."""
    audio, visual = _check_pair(audio, visual, min_n=2)
    d = pairwise_distance(audio, visual)
    if not np.all(np.isfinite(d.data)):
        raise NumericError("non-finite feature distance")
    inv = 1.0 / (d + eps)
    return _matching_cross_entropy(inv, targets)


class AngularScale(Module):
    """Learnable affine map ``w * s + b`` applied to cosine similarities.

    ``w`` starts at 10 and ``b`` at -5 so the initial logits span a useful
    range for cosines in [-1, 1].
    """

    def __init__(self, w: float = 10.0, b: float = -5.0, min_w: float = 1e-3):
        super().__init__()
        self.w = Tensor(np.array(float(w)), requires_grad=True)
        self.b = Tensor(np.array(float(b)), requires_grad=True)
        self.min_w = min_w

    def clamp(self) -> None:
        """Keep ``w`` strictly positive; call after every optimiser step."""
        np.maximum(self.w.data, self.min_w, out=self.w.data)


def cosine_similarity_matrix(audio, visual) -> Tensor:
    """``s[..., i, j] = cos(a_i, v_j)``; raises on zero-norm rows."""
    a = ad.l2_normalize(audio, axis=-1)
    v = ad.l2_normalize(visual, axis=-1)
    return ad.matmul(a, ad.transpose(v, _swap_last(v.ndim)))


def _swap_last(ndim: int):
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


def angular_multiway_loss(audio, visual, scale: Optional[AngularScale] = None, targets=None) -> Tensor:
    """Softmax cross-entropy over ``w * cos(a_i, v_j) + b``."""
    audio, visual = _check_pair(audio, visual, min_n=2)
    scale = scale if scale is not None else AngularScale()
    s = cosine_similarity_matrix(audio, visual)
    logits = s * scale.w + scale.b
    return _matching_cross_entropy(logits, targets)
