"""Offset estimators: sliding-window baseline, band averaging (Diag-avg),
the similarity-matrix classifier (Sync-cls) and its end-to-end variant
(Sync-e2e), plus gradient saliency of the classifier.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from . import autodiff as ad
from .autodiff import Tensor
from .encoders import EmbeddingModel, PairEncoder
from .exceptions import (
    DimensionError,
    EmptyInputError,
    InsufficientLengthError,
    TrainingError,
)
from .losses import cosine_similarity_matrix
from .nn import Adam, BatchNorm, Conv2d, Module
from .similarity import (
    MAX_OFFSET,
    N_CLASSES,
    OFFSETS,
    OffsetLabel,
    band_means,
    build_similarity_matrix,
)
from .utils import check_clips, check_matrices, check_offsets, derive_seed

logger = logging.getLogger(__name__)

FINAL_GAIN = 0.1

# smallest |o| first, negative before positive: 0, -1, 1, -2, 2, ...
TIE_ORDER = np.array(sorted(range(N_CLASSES), key=lambda k: (abs(k - MAX_OFFSET), k - MAX_OFFSET)))


@dataclass
class Prediction:
    offset: OffsetLabel
    scores: np.ndarray
    rule: str  # "argmin" or "argmax"


def pick_offset(scores: np.ndarray, maximize: bool, atol: float = 1e-12) -> np.ndarray:
    """Best class per row of ``scores`` (``... x 11``) with deterministic ties."""
    scores = np.asarray(scores, dtype=np.float64)
    signed = scores if maximize else -scores
    best = signed.max(axis=-1, keepdims=True)
    hits = (signed >= best - atol)[..., TIE_ORDER]
    return TIE_ORDER[np.argmax(hits, axis=-1)] - MAX_OFFSET


# -- non-trained estimators ---------------------------------------------------
def sliding_window_offset(audio, visual, max_offset: int = MAX_OFFSET) -> Prediction:
    """Mean cosine distance of ``(a_{t-o}, v_t)`` over all ``t``, with audio
    zero-padded outside the segment (distance 1 there); argmin over ``o``."""
    a = np.asarray(getattr(audio, "features", audio), dtype=np.float64)
    v = np.asarray(getattr(visual, "features", visual), dtype=np.float64)
    if a.size == 0 or v.size == 0:
        raise EmptyInputError("empty feature streams")
    if a.shape != v.shape:
        raise DimensionError(f"streams differ in shape: {a.shape} vs {v.shape}")
    n = a.shape[0]
    scores = np.empty(2 * max_offset + 1)
    for k, o in enumerate(range(-max_offset, max_offset + 1)):
        total = 0.0
        for t in range(n):
            s = t - o
            if 0 <= s < n:
                na, nv = np.linalg.norm(a[s]), np.linalg.norm(v[t])
                cos = 0.0 if na == 0 or nv == 0 else float(a[s] @ v[t]) / (na * nv)
            else:
                cos = 0.0
            total += 1.0 - cos
        scores[k] = total / n
    offset = int(pick_offset(scores, maximize=False))
    return Prediction(OffsetLabel(offset), scores, "argmin")


def sliding_window_scores(m: np.ndarray) -> np.ndarray:
    """Sliding-window distances computed from similarity matrices.

    Padded positions count as distance 1, so
    ``score(o) = 1 - band_sum(o) / N``.
    """
    m = np.asarray(m, dtype=np.float64)
    n = m.shape[-1]
    sums = np.stack([np.diagonal(m, offset=o, axis1=-2, axis2=-1).sum(axis=-1) for o in OFFSETS], axis=-1)
    return 1.0 - sums / n


def diag_avg_offset(m: np.ndarray, max_offset: int = MAX_OFFSET) -> Prediction:
    """Offset whose band has the largest mean similarity."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise DimensionError(f"expected a square matrix, got {m.shape}")
    if m.shape[0] <= max_offset:
        raise InsufficientLengthError(f"N={m.shape[0]} must exceed {max_offset}")
    scores = band_means(m, max_offset)
    return Prediction(OffsetLabel(int(pick_offset(scores, maximize=True))), scores, "argmax")


class SlidingWindowSync(BaseEstimator, ClassifierMixin):
    """Baseline: sliding-window mean distance with zero padding.

    ``X`` is a stack of similarity matrices; nothing is learned.
    """

    def fit(self, X=None, y=None):
        self.classes_ = OFFSETS.copy()
        return self

    def score_offsets(self, X) -> np.ndarray:
        return sliding_window_scores(check_matrices(X))

    def predict(self, X) -> np.ndarray:
        return pick_offset(self.score_offsets(X), maximize=False)


class DiagAvgSync(BaseEstimator, ClassifierMixin):
    """Pick the diagonal band with the largest mean similarity."""

    def fit(self, X=None, y=None):
        self.classes_ = OFFSETS.copy()
        return self

    def score_offsets(self, X) -> np.ndarray:
        X = check_matrices(X)
        if X.shape[1] <= MAX_OFFSET:
            raise InsufficientLengthError(f"N={X.shape[1]} must exceed {MAX_OFFSET}")
        return band_means(X)

    def predict(self, X) -> np.ndarray:
        return pick_offset(self.score_offsets(X), maximize=True)


# -- the similarity-matrix classifier -----------------------------------------
class SyncClsNet(Module):
    """Four stride-free convolutions: 3x3 (pad 1), N x N, 1x1, 1x1 -> 11 logits.

    Batch norm and relu follow the first three convolutions.
    """

    def __init__(self, n: int, channels: Sequence[int] = (256, 256, 128), seed: int = 0, dtype=np.float64):
        super().__init__()
        if n <= MAX_OFFSET:
            raise InsufficientLengthError(f"N={n} must exceed {MAX_OFFSET}")
        c1, c2, c3 = channels
        rng = np.random.default_rng(derive_seed(seed, "cls", "init"))
        self.n = n
        self.conv1 = Conv2d(1, c1, 3, 1, rng, dtype)
        self.bn1 = BatchNorm(c1, dtype=dtype)
        self.conv2 = Conv2d(c1, c2, n, 0, rng, dtype)
        self.bn2 = BatchNorm(c2, dtype=dtype)
        self.conv3 = Conv2d(c2, c3, 1, 0, rng, dtype)
        self.bn3 = BatchNorm(c3, dtype=dtype)
        self.conv4 = Conv2d(c3, N_CLASSES, 1, 0, rng, dtype)
        # small output layer: near-uniform softmax, step-0 loss ~ ln 11
        self.conv4.weight.data *= FINAL_GAIN

    @property
    def dtype(self):
        return self.conv1.weight.dtype

    def forward(self, m: Tensor) -> Tensor:
        """``B x N x N`` matrices -> ``B x 11`` logits."""
        if m.ndim == 2:
            m = ad.reshape(m, (1,) + m.shape)
        if m.shape[-2:] != (self.n, self.n):
            raise DimensionError(f"network built for {self.n} x {self.n} input, got {m.shape[-2:]}")
        x = ad.reshape(m, (m.shape[0], 1, self.n, self.n))
        x = ad.relu(self.bn1(self.conv1(x)))
        x = ad.relu(self.bn2(self.conv2(x)))
        x = ad.relu(self.bn3(self.conv3(x)))
        x = self.conv4(x)
        return ad.reshape(x, (x.shape[0], N_CLASSES))


def _logits(net: SyncClsNet, X: np.ndarray, chunk: int = 256) -> np.ndarray:
    net.eval()
    out = [net(Tensor(X[s : s + chunk].astype(net.dtype))).data for s in range(0, len(X), chunk)]
    return np.concatenate(out, axis=0).astype(np.float64)


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _nll(logits: np.ndarray, labels: np.ndarray) -> float:
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-logp[np.arange(len(labels)), labels].mean())


def synccls_predict(net: SyncClsNet, m: np.ndarray) -> Prediction:
    m = check_matrices(m, net.n)
    probs = _softmax(_logits(net, m))[0]
    return Prediction(OffsetLabel(int(np.argmax(probs)) - MAX_OFFSET), probs, "argmax")


def saliency(net: SyncClsNet, m: np.ndarray, target: int) -> np.ndarray:
    """Gradient of ``logit[target]`` with respect to every matrix entry.

    ``m`` may be one ``N x N`` matrix (with an int target) or a batch with
    one target per matrix; the net is evaluated in inference mode.
    """
    single = np.ndim(m) == 2
    X = check_matrices(m, net.n)
    targets = np.atleast_1d(np.asarray(target))
    if targets.size == 1 and len(X) > 1:
        targets = np.full(len(X), int(targets[0]))
    if targets.shape != (len(X),):
        raise DimensionError("need one target class per matrix")
    if np.any(targets < 0) or np.any(targets >= N_CLASSES):
        raise ValueError(f"class index must lie in [0, {N_CLASSES})")
    net.eval()
    x = Tensor(X.astype(net.dtype), requires_grad=True)
    logits = net(x)
    picked = ad.take(logits, (np.arange(len(X)), targets))
    ad.tsum(picked).backward()
    grad = x.grad.astype(np.float64)
    return grad[0] if single else grad


def _split(count: int, fraction: float):
    """Train/validation indices.  The split depends only on ``count`` and
    ``fraction``, so Sync-cls and Sync-e2e fitted on the same clips hold out
    the same samples."""
    order = np.random.default_rng(derive_seed(count, "split", repr(fraction))).permutation(count)
    n_val = int(round(count * fraction)) if fraction > 0 else 0
    return order[n_val:], order[:n_val]


class _EarlyStopper:
    """Keep the best state by validation accuracy (ties broken by lower
    validation loss); stop after ``patience`` epochs without improvement."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = (-np.inf,)
        self.best_state = None
        self.stale = 0

    def update(self, score, state) -> bool:
        if score > self.best:
            self.best = score
            self.best_state = copy.deepcopy(state)
            self.stale = 0
        else:
            self.stale += 1
        return self.stale >= self.patience


class SyncClassifier(BaseEstimator, ClassifierMixin):
    """Sync-cls: classify precomputed similarity matrices into 11 offsets.

    Parameters
    ----------
    n : int or None
        Matrix size; inferred from the training data when ``None``.
    channels : tuple of int
        Filters of the first three convolutions.
    max_epochs, patience : int
        Adam training with early stopping on validation accuracy.
    """

    def __init__(
        self,
        n: Optional[int] = None,
        channels=(256, 256, 128),
        lr: float = 1e-3,
        batch_size: int = 32,
        max_epochs: int = 20,
        patience: int = 3,
        validation_fraction: float = 0.1,
        dtype: str = "float32",
        random_state: int = 0,
    ):
        self.n = n
        self.channels = channels
        self.lr = lr
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.validation_fraction = validation_fraction
        self.dtype = dtype
        self.random_state = random_state

    def fit(self, X, y):
        X = check_matrices(X, self.n)
        y = check_offsets(y, len(X))
        self.n_ = X.shape[1]
        self.classes_ = OFFSETS.copy()
        self.net_ = SyncClsNet(self.n_, tuple(self.channels), seed=self.random_state, dtype=np.dtype(self.dtype))
        rng = np.random.default_rng(derive_seed(self.random_state, "cls", "order"))
        train_idx, val_idx = _split(len(X), self.validation_fraction)
        if len(val_idx) == 0:
            val_idx = train_idx
        labels = y + MAX_OFFSET
        data = X.astype(self.net_.dtype)
        opt = Adam(self.net_.parameters(), lr=self.lr)
        stopper = _EarlyStopper(self.patience)
        self.history_: List[dict] = []
        for epoch in range(self.max_epochs):
            self.net_.train()
            order = rng.permutation(train_idx)
            total, seen = 0.0, 0
            for start in range(0, len(order), self.batch_size):
                idx = order[start : start + self.batch_size]
                if len(idx) < 2:
                    continue
                loss = ad.cross_entropy(self.net_(Tensor(data[idx])), labels[idx])
                if not np.isfinite(loss.data):
                    raise TrainingError(f"classifier loss diverged at epoch {epoch}")
                if epoch == 0 and start == 0:
                    self.initial_loss_ = float(loss.data)
                opt.zero_grad()
                loss.backward()
                opt.step()
                total += float(loss.data) * len(idx)
                seen += len(idx)
            if not opt.all_finite():
                raise TrainingError(f"parameters diverged at epoch {epoch}")
            val_logits = _logits(self.net_, X[val_idx])
            val_acc = float(np.mean(np.argmax(val_logits, axis=1) == labels[val_idx]))
            val_loss = _nll(val_logits, labels[val_idx])
            self.history_.append({"epoch": epoch, "loss": total / max(seen, 1), "val_acc": val_acc, "val_loss": val_loss})
            logger.info("cls epoch %d loss %.4f val_acc %.4f", epoch, total / max(seen, 1), val_acc)
            if stopper.update((val_acc, -val_loss), self.net_.state_dict()):
                break
        self.net_.load_state_dict(stopper.best_state)
        self.net_.eval()
        return self

    @classmethod
    def from_net(cls, net: SyncClsNet, **params) -> "SyncClassifier":
        model = cls(n=net.n, **params)
        model.net_, model.n_, model.classes_ = net, net.n, OFFSETS.copy()
        model.history_ = []
        return model

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "net_")
        return _logits(self.net_, check_matrices(X, self.n_))

    def predict_proba(self, X) -> np.ndarray:
        return _softmax(self.decision_function(X))

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.decision_function(X), axis=1) - MAX_OFFSET

    def saliency(self, X, y) -> np.ndarray:
        check_is_fitted(self, "net_")
        return saliency(self.net_, X, np.asarray(y) + MAX_OFFSET)


class SyncE2E(BaseEstimator, ClassifierMixin):
    """Sync-e2e: encoders and classifier fine-tuned jointly under the
    classification loss, with gradients flowing through the similarity
    matrix into both encoders.

    ``embedding`` and ``classifier`` are fitted starting points (they are
    copied, not modified).  Without them fresh ones are trained first.

    With ``freeze_bn`` the classifier's batch-norm layers keep their running
    statistics during fine-tuning.  Batch statistics would make the loss
    blind to the overall scale of the similarity matrix, leaving the
    on-band/off-band contrast free to drift.
    """

    def __init__(
        self,
        embedding: Optional[EmbeddingModel] = None,
        classifier: Optional[SyncClassifier] = None,
        lr: float = 1e-4,
        batch_size: int = 32,
        max_epochs: int = 5,
        patience: int = 3,
        validation_fraction: float = 0.1,
        freeze_bn: bool = True,
        random_state: int = 0,
    ):
        self.embedding = embedding
        self.classifier = classifier
        self.lr = lr
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.validation_fraction = validation_fraction
        self.freeze_bn = freeze_bn
        self.random_state = random_state

    def _forward(self, audio: np.ndarray, video: np.ndarray) -> Tensor:
        dtype = self.net_.dtype
        m = self.encoder_.similarity(audio.astype(dtype), video.astype(dtype))
        return self.net_(m)

    def fit(self, X, y=None):
        audio, video = check_clips(X)
        if y is None:
            y = getattr(X, "offsets", None)
        y = check_offsets(y, len(audio))
        embedding = self.embedding
        if embedding is None:
            embedding = EmbeddingModel(random_state=self.random_state).fit((audio, video), y)
        classifier = self.classifier
        if classifier is None:
            classifier = SyncClassifier(random_state=self.random_state).fit(embedding.transform((audio, video)), y)
        self.encoder_: PairEncoder = embedding.clone_encoder()
        self.net_: SyncClsNet = copy.deepcopy(classifier.net_)
        self.encoder_.astype(self.net_.dtype)
        self.classes_ = OFFSETS.copy()

        rng = np.random.default_rng(derive_seed(self.random_state, "e2e", "order"))
        train_idx, val_idx = _split(len(audio), self.validation_fraction)
        if len(val_idx) == 0:
            val_idx = train_idx
        labels = y + MAX_OFFSET
        params = self.encoder_.audio.parameters() + self.encoder_.video.parameters() + self.net_.parameters()
        opt = Adam(params, lr=self.lr)
        stopper = _EarlyStopper(self.patience)
        self.history_: List[dict] = []
        for epoch in range(self.max_epochs):
            self.net_.train(not self.freeze_bn)
            order = rng.permutation(train_idx)
            total, seen = 0.0, 0
            for start in range(0, len(order), self.batch_size):
                idx = order[start : start + self.batch_size]
                if len(idx) < 2:
                    continue
                loss = ad.cross_entropy(self._forward(audio[idx], video[idx]), labels[idx])
                if not np.isfinite(loss.data):
                    raise TrainingError(f"end-to-end loss diverged at epoch {epoch}")
                opt.zero_grad()
                loss.backward()
                opt.step()
                total += float(loss.data) * len(idx)
                seen += len(idx)
            if not opt.all_finite():
                raise TrainingError(f"parameters diverged at epoch {epoch}")
            val_logits = self._logits(audio[val_idx], video[val_idx])
            val_acc = float(np.mean(np.argmax(val_logits, axis=1) == labels[val_idx]))
            val_loss = _nll(val_logits, labels[val_idx])
            self.history_.append({"epoch": epoch, "loss": total / max(seen, 1), "val_acc": val_acc, "val_loss": val_loss})
            logger.info("e2e epoch %d loss %.4f val_acc %.4f", epoch, total / max(seen, 1), val_acc)
            state = (self.encoder_.state_dict(), self.net_.state_dict())
            if stopper.update((val_acc, -val_loss), state):
                break
        enc_state, net_state = stopper.best_state
        self.encoder_.load_state_dict(enc_state)
        self.net_.load_state_dict(net_state)
        self.net_.eval()
        return self

    @classmethod
    def from_parts(cls, encoder: PairEncoder, net: SyncClsNet, **params) -> "SyncE2E":
        model = cls(**params)
        model.encoder_, model.net_, model.classes_ = encoder, net, OFFSETS.copy()
        model.history_ = []
        return model

    def _predict_classes(self, audio, video, chunk: int = 256) -> np.ndarray:
        return np.argmax(self._logits(audio, video, chunk), axis=1)

    def _logits(self, audio, video, chunk: int = 256) -> np.ndarray:
        self.net_.eval()
        out = [self._forward(audio[s : s + chunk], video[s : s + chunk]).data for s in range(0, len(audio), chunk)]
        return np.concatenate(out).astype(np.float64)

    def transform(self, X) -> np.ndarray:
        """Similarity matrices produced by the tuned encoders."""
        check_is_fitted(self, "encoder_")
        audio, video = check_clips(X)
        dtype = self.net_.dtype
        fa, fv = self.encoder_(audio.astype(dtype), video.astype(dtype))
        return build_similarity_matrix(fa.data, fv.data)

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "net_")
        return self._logits(*check_clips(X))

    def predict_proba(self, X) -> np.ndarray:
        return _softmax(self.decision_function(X))

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.decision_function(X), axis=1) - MAX_OFFSET


def e2e_loss(encoder: PairEncoder, net: SyncClsNet, audio, video, offsets) -> Tensor:
    """Cross-entropy of the classifier applied to encoder similarity matrices."""
    m = cosine_similarity_matrix(*encoder(audio, video))
    return ad.cross_entropy(net(m), np.asarray(offsets) + MAX_OFFSET)
