import numpy as np
import pytest

from syncmatrix import autodiff as ad
from syncmatrix.autodiff import Tensor, grad_check
from syncmatrix.encoders import (
    EmbeddingModel,
    Encoder,
    EncoderConfig,
    PairEncoder,
    encode,
    oracle_linear_encoder,
)
from syncmatrix.estimators import DiagAvgSync
from syncmatrix.exceptions import ConfigError, InsufficientLengthError
from syncmatrix.losses import angular_multiway_loss
from syncmatrix.synthdata import GenConfig, generate_dataset


def make_encoder(raw_dim=3, context=5, hidden=7, embed=4, seed=0):
    return Encoder(raw_dim, context, hidden, embed, np.random.default_rng(seed))


def test_output_length():
    enc = make_encoder()
    for T in (5, 11, 20):
        fs = encode(enc, np.random.default_rng(T).normal(size=(T, 3)))
        assert fs.features.shape == (T - 5 + 1, 4)
    with pytest.raises(InsufficientLengthError):
        encode(enc, np.zeros((4, 3)))


def test_temporal_equivariance():
    enc = make_encoder(seed=2)
    x = np.random.default_rng(1).normal(size=(14, 3))
    full = encode(enc, x).features
    shifted = encode(enc, x[3:]).features
    np.testing.assert_allclose(shifted, full[3:], atol=1e-12)


def test_zero_final_layer_gives_constant_matrix():
    pair = PairEncoder(EncoderConfig(raw_dim_audio=3, raw_dim_video=3, embed_dim=4, hidden=6))
    for enc in (pair.audio, pair.video):
        enc.fc2.weight.data[...] = 0
        enc.fc2.bias.data[...] = np.arange(1, 5)
    rng = np.random.default_rng(0)
    m = pair.similarity(rng.normal(size=(12, 3)), rng.normal(size=(12, 3))).data
    np.testing.assert_allclose(m, 1.0)


def test_set_linear_is_exact():
    enc = make_encoder(raw_dim=2, context=3, hidden=4, embed=2)
    lin = np.random.default_rng(0).normal(size=(2, 6))
    enc.set_linear(lin)
    x = np.random.default_rng(1).normal(size=(7, 2))
    windows = np.stack([x[t : t + 3].reshape(-1) for t in range(5)])
    np.testing.assert_allclose(encode(enc, x).features, windows @ lin.T, atol=1e-12)
    with pytest.raises(ConfigError):
        make_encoder(raw_dim=2, context=3, hidden=5, embed=2).set_linear(lin)


@pytest.mark.parametrize("seed", range(5))
def test_encoder_and_loss_grad_check(seed):
    rng = np.random.default_rng(seed)
    pair = PairEncoder(EncoderConfig(context=3, raw_dim_audio=2, raw_dim_video=3, embed_dim=4, hidden=5), seed=seed)
    audio, video = rng.normal(size=(2, 8, 2)), rng.normal(size=(2, 8, 3))
    w1, b1 = pair.audio.fc1.weight.data.copy(), pair.audio.fc1.bias.data.copy()

    def f(a_raw, w, b):
        pair.audio.fc1.weight, pair.audio.fc1.bias = w, b
        fa, fv = pair(a_raw, Tensor(video))
        return angular_multiway_loss(fa, fv, pair.scale)

    assert grad_check(f, audio, w1, b1) < 1e-5


def test_oracle_encoder_recovers_noiseless_offsets():
    cfg = GenConfig(latent_dim=16, raw_dim_audio=16, raw_dim_video=16, noise_sigma=0.0, occlusion_prob=0.0, frames=11)
    clips = generate_dataset(cfg, 110, seed=0)
    emb = EmbeddingModel.from_encoder(oracle_linear_encoder(cfg))
    m = emb.transform(clips)
    assert m.shape == (110, 7, 7)
    np.testing.assert_array_equal(DiagAvgSync().predict(m), clips.offsets)


@pytest.mark.parametrize("loss", ["angular", "euclidean", "contrastive"])
def test_embedding_training_reduces_loss(loss):
    cfg = GenConfig(frames=11, noise_sigma=0.3, occlusion_prob=0.0)
    clips = generate_dataset(cfg, 64, seed=1)
    model = EmbeddingModel(loss=loss, epochs=4, embed_dim=8, hidden=16, lr=3e-3, dtype="float64").fit(clips)
    assert len(model.history_) == 4
    assert model.history_[-1] < model.history_[0]
    m = model.transform(clips)
    assert m.shape == (64, 7, 7) and np.all(np.isfinite(m))


def test_embedding_fit_is_deterministic():
    clips = generate_dataset(GenConfig(frames=11), 40, seed=2)
    a = EmbeddingModel(epochs=2, random_state=5).fit(clips).transform(clips)
    b = EmbeddingModel(epochs=2, random_state=5).fit(clips).transform(clips)
    assert a.tobytes() == b.tobytes()


def test_unknown_loss():
    clips = generate_dataset(GenConfig(frames=11), 8, seed=2)
    with pytest.raises(ConfigError):
        EmbeddingModel(loss="hinge", epochs=1).fit(clips)
