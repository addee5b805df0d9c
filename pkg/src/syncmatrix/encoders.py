"""Small two-stream encoders mapping raw per-frame observations to a joint
embedding space, one embedding per ``context``-frame window (stride 1).
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import autodiff as ad
from .autodiff import Tensor
from .exceptions import ConfigError, InsufficientLengthError, TrainingError
from .losses import (
    AngularScale,
    angular_multiway_loss,
    contrastive_loss,
    cosine_similarity_matrix,
    multiway_euclidean_loss,
)
from .nn import Adam, Linear, Module
from .similarity import FeatureStream
from .utils import check_clips, check_offsets, derive_seed

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class EncoderConfig:
    context: int = 5
    raw_dim_audio: int = 12
    raw_dim_video: int = 16
    embed_dim: int = 32
    hidden: int = 64

    def __post_init__(self):
        if self.context < 1:
            raise ConfigError("context must be >= 1")
        if self.embed_dim < 2:
            raise ConfigError("embed_dim must be >= 2")
        if self.hidden < 1:
            raise ConfigError("hidden must be >= 1")


class Encoder(Module):
    """Flatten a context window, then affine -> relu -> affine."""

    def __init__(self, raw_dim: int, context: int, hidden: int, embed_dim: int, rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        self.context = context
        self.fc1 = Linear(context * raw_dim, hidden, rng, dtype)
        self.fc2 = Linear(hidden, embed_dim, rng, dtype)

    def forward(self, raw: Tensor) -> Tensor:
        if raw.shape[-2] < self.context:
            raise InsufficientLengthError(f"{raw.shape[-2]} frames cannot fill a context of {self.context}")
        windows = ad.unfold_time(raw, self.context)
        return self.fc2(ad.relu(self.fc1(windows)))

    def set_linear(self, matrix: np.ndarray) -> None:
        """Make the encoder compute ``window -> matrix @ window`` exactly.

        Uses ``x = relu(x) - relu(-x)``, so ``hidden`` must equal
        ``2 * matrix.shape[0]``.
        """
        out_dim, in_dim = matrix.shape
        if self.fc1.weight.shape != (2 * out_dim, in_dim) or self.fc2.weight.shape[0] != out_dim:
            raise ConfigError("encoder widths do not fit the requested linear map")
        dtype = self.fc1.weight.dtype
        self.fc1.weight.data[...] = np.vstack([matrix, -matrix]).astype(dtype)
        self.fc1.bias.data[...] = 0
        eye = np.eye(out_dim, dtype=dtype)
        self.fc2.weight.data[...] = np.hstack([eye, -eye])
        self.fc2.bias.data[...] = 0


class PairEncoder(Module):
    """Audio and video encoders (same shape, disjoint parameters) plus the
    learnable angular scale of the matching loss."""

    def __init__(self, config: EncoderConfig = EncoderConfig(), seed: int = 0, dtype=np.float64):
        super().__init__()
        self.config = config
        self.audio = Encoder(config.raw_dim_audio, config.context, config.hidden, config.embed_dim,
                             np.random.default_rng(derive_seed(seed, "enc", "audio")), dtype)
        self.video = Encoder(config.raw_dim_video, config.context, config.hidden, config.embed_dim,
                             np.random.default_rng(derive_seed(seed, "enc", "video")), dtype)
        self.scale = AngularScale()

    def forward(self, audio_raw, video_raw) -> Tuple[Tensor, Tensor]:
        return self.audio(ad._as_tensor(audio_raw)), self.video(ad._as_tensor(video_raw))

    def similarity(self, audio_raw, video_raw) -> Tensor:
        fa, fv = self.forward(audio_raw, video_raw)
        return cosine_similarity_matrix(fa, fv)


def encode(encoder: Encoder, raw: np.ndarray, modality: str = "audio") -> FeatureStream:
    """Embed one ``T x raw_dim`` stream into ``T - context + 1`` features."""
    feats = encoder(Tensor(np.asarray(raw, dtype=encoder.fc1.weight.dtype)))
    return FeatureStream(modality, feats.data)


def oracle_linear_encoder(gen_cfg, context: int = 5) -> PairEncoder:
    """Untrained, fixed linear encoders that invert the generator's mixing.

    Each window is mapped to the latent innovation at its centre frame,
    ``z_c - rho * z_{c-1}``, recovered through the pseudo-inverse of the
    modality's mixing map.  Innovations of different frames are
    independent, so only the aligned band has similarity close to one.
    """
    from .synthdata import mixing_maps

    if context < 2:
        raise ConfigError("the oracle encoder needs a context of at least 2 frames")
    A, V = mixing_maps(gen_cfg)
    d = gen_cfg.latent_dim
    cfg = EncoderConfig(context, gen_cfg.raw_dim_audio, gen_cfg.raw_dim_video, embed_dim=d, hidden=2 * d)
    pair = PairEncoder(cfg, seed=0)
    c = context // 2
    for enc, M in ((pair.audio, A), (pair.video, V)):
        pinv = np.linalg.pinv(M)
        raw_dim = M.shape[0]
        lin = np.zeros((d, context * raw_dim))
        lin[:, c * raw_dim : (c + 1) * raw_dim] = pinv
        lin[:, (c - 1) * raw_dim : c * raw_dim] = -gen_cfg.smoothness * pinv
        enc.set_linear(lin)
    return pair


class EmbeddingModel(BaseEstimator, TransformerMixin):
    """Train the two-stream encoders on paired clips; transform clips into
    similarity matrices.

    Row ``i`` of a clip with offset ``o`` is paired with visual feature
    ``i + o``; without ``y`` all clips are taken as synchronised.

    Parameters
    ----------
    loss : {"angular", "euclidean", "contrastive"}
        Training objective; the angular multi-way loss is the default.
    """

    def __init__(
        self,
        context: int = 5,
        embed_dim: int = 32,
        hidden: int = 64,
        loss: str = "angular",
        margin: float = 1.0,
        lr: float = 1e-3,
        batch_size: int = 32,
        epochs: int = 20,
        dtype: str = "float32",
        random_state: int = 0,
    ):
        self.context = context
        self.embed_dim = embed_dim
        self.hidden = hidden
        self.loss = loss
        self.margin = margin
        self.lr = lr
        self.batch_size = batch_size
        self.epochs = epochs
        self.dtype = dtype
        self.random_state = random_state

    def _targets(self, y, n: int, count: int) -> np.ndarray:
        base = np.arange(n)
        if y is None:
            return np.broadcast_to(base, (count, n))
        y = check_offsets(y, count)
        return base[None, :] + y[:, None]

    def _loss(self, fa: Tensor, fv: Tensor, targets: np.ndarray, rng: np.random.Generator) -> Tensor:
        scale = self.encoder_.scale
        if self.loss == "angular":
            return angular_multiway_loss(fa, fv, scale, targets)
        if self.loss == "euclidean":
            return multiway_euclidean_loss(fa, fv, targets)
        if self.loss == "contrastive":
            # one positive and one shifted negative per valid audio row
            b_idx, rows = np.nonzero((targets >= 0) & (targets < fa.shape[1]))
            pos = targets[b_idx, rows]
            shift = rng.integers(2, fa.shape[1] - 1, size=pos.size)
            neg = (pos + shift) % fa.shape[1]
            a = ad.concat([fa[b_idx, rows], fa[b_idx, rows]], axis=0)
            v = ad.concat([fv[b_idx, pos], fv[b_idx, neg]], axis=0)
            labels = np.concatenate([np.ones(pos.size), np.zeros(pos.size)])
            return contrastive_loss(a, v, labels, self.margin)
        raise ConfigError(f"unknown loss {self.loss!r}")

    def fit(self, X, y=None):
        audio, video = check_clips(X)
        if y is None and hasattr(X, "offsets"):
            y = X.offsets
        dtype = np.dtype(self.dtype)
        cfg = EncoderConfig(self.context, audio.shape[2], video.shape[2], self.embed_dim, self.hidden)
        self.encoder_ = PairEncoder(cfg, seed=self.random_state, dtype=dtype)
        n = audio.shape[1] - self.context + 1
        if n < 2:
            raise InsufficientLengthError("clips too short for multi-way training")
        targets = self._targets(y, n, len(audio))
        rng = np.random.default_rng(derive_seed(self.random_state, "embed", "order"))
        params = self.encoder_.parameters()
        opt = Adam(params, lr=self.lr)
        self.history_: List[float] = []
        for epoch in range(self.epochs):
            order = rng.permutation(len(audio))
            total = 0.0
            for start in range(0, len(order), self.batch_size):
                idx = order[start : start + self.batch_size]
                fa, fv = self.encoder_(audio[idx].astype(dtype), video[idx].astype(dtype))
                loss = self._loss(fa, fv, targets[idx], rng)
                if not np.isfinite(loss.data):
                    raise TrainingError(f"embedding loss diverged at epoch {epoch}")
                opt.zero_grad()
                loss.backward()
                opt.step()
                self.encoder_.scale.clamp()
                total += float(loss.data) * len(idx)
            if not (np.isfinite(total) and opt.all_finite()):
                raise TrainingError(f"embedding parameters diverged at epoch {epoch}")
            self.history_.append(total / len(order))
            logger.info("embed epoch %d loss %.4f", epoch, self.history_[-1])
        return self

    @classmethod
    def from_encoder(cls, encoder: PairEncoder, **params) -> "EmbeddingModel":
        """Wrap an already-built encoder (e.g. a loaded or fixed one)."""
        model = cls(context=encoder.config.context, embed_dim=encoder.config.embed_dim,
                    hidden=encoder.config.hidden, **params)
        model.encoder_ = encoder
        model.history_ = []
        return model

    def features(self, X) -> Tuple[np.ndarray, np.ndarray]:
        check_is_fitted(self, "encoder_")
        audio, video = check_clips(X)
        dtype = self.encoder_.audio.fc1.weight.dtype
        fa, fv = self.encoder_(audio.astype(dtype), video.astype(dtype))
        return fa.data, fv.data

    def transform(self, X) -> np.ndarray:
        """Clips -> ``B x N x N`` cosine similarity matrices (float64)."""
        from .similarity import build_similarity_matrix

        fa, fv = self.features(X)
        return build_similarity_matrix(fa, fv)

    def clone_encoder(self) -> PairEncoder:
        check_is_fitted(self, "encoder_")
        return copy.deepcopy(self.encoder_)
