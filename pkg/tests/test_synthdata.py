import numpy as np
import pytest

from syncmatrix.exceptions import ConfigError
from syncmatrix.similarity import OFFSETS
from syncmatrix.synthdata import (
    PAD,
    ClipSet,
    GenConfig,
    format_spans,
    generate_clip,
    generate_dataset,
    latent_walk,
    mixing_maps,
    parse_spans,
    regenerate,
)


def test_same_seed_bit_identical():
    cfg = GenConfig(seed=3)
    a = generate_clip(cfg, np.random.default_rng(11))
    b = generate_clip(cfg, np.random.default_rng(11))
    assert a.audio_raw.tobytes() == b.audio_raw.tobytes()
    assert a.video_raw.tobytes() == b.video_raw.tobytes()
    assert a.offset == b.offset and np.array_equal(a.occluded, b.occluded)


def test_shapes_and_dtype():
    cfg = GenConfig(frames=13)
    c = generate_clip(cfg, np.random.default_rng(0))
    assert c.audio_raw.shape == (13, cfg.raw_dim_audio)
    assert c.video_raw.shape == (13, cfg.raw_dim_video)
    assert c.audio_raw.dtype == np.float32
    assert -5 <= c.offset <= 5


def test_config_validation():
    with pytest.raises(ConfigError):
        GenConfig(frames=9)
    with pytest.raises(ConfigError):
        GenConfig(noise_sigma=-1)
    with pytest.raises(ConfigError):
        GenConfig(occlusion_prob=1.5)
    with pytest.raises(ConfigError):
        GenConfig.from_dict({"frames": 15, "bogus": 1})
    assert GenConfig.from_dict({"frames": "20"}).frames == 20


def test_balanced_dataset_histogram():
    ds = generate_dataset(GenConfig(), 1100, seed=5)
    counts = np.array([(ds.offsets == o).sum() for o in OFFSETS])
    assert np.all(counts == 100)
    chi2 = ((counts - 100) ** 2 / 100).sum()
    assert chi2 == 0
    odd = generate_dataset(GenConfig(), 25, seed=5)
    counts = np.array([(odd.offsets == o).sum() for o in OFFSETS])
    assert counts.max() - counts.min() <= 1


def test_shift_semantics():
    cfg = GenConfig(noise_sigma=0.0, occlusion_prob=0.0)
    a = generate_clip(cfg, np.random.default_rng(42), offset=1)
    b = generate_clip(cfg, np.random.default_rng(42), offset=-2)
    np.testing.assert_array_equal(a.audio_raw, b.audio_raw)
    # video_o[t] = V z[t + PAD - o]  ->  video_1[t] == video_-2[t - 3]
    d = 1 - (-2)
    np.testing.assert_allclose(a.video_raw[d:], b.video_raw[:-d], rtol=1e-6)


def test_video_leads_for_negative_offset():
    cfg = GenConfig(noise_sigma=0.0, occlusion_prob=0.0)
    rng = np.random.default_rng(1)
    c = generate_clip(cfg, rng, offset=-2)
    A, V = mixing_maps(cfg)
    z_a = np.linalg.lstsq(A, c.audio_raw.T.astype(np.float64), rcond=None)[0].T
    z_v = np.linalg.lstsq(V, c.video_raw.T.astype(np.float64), rcond=None)[0].T
    # the video frame at t shows what the audio reaches only at t + 2
    np.testing.assert_allclose(z_v[:-2], z_a[2:], atol=1e-4)


def test_occluded_frames_independent_of_latent():
    cfg = GenConfig(occlusion_prob=1.0, occlusion_len=4, noise_sigma=0.0)
    _, V = mixing_maps(cfg)
    filled, clean = [], []
    for s in range(2500):  # 4 occluded frames each -> 10k samples
        rng = np.random.default_rng(s)
        clip = generate_clip(cfg, rng)
        replay = np.random.default_rng(s)
        replay.integers(-5, 6)
        z = latent_walk(cfg, cfg.frames + 2 * PAD, replay)
        signal = z[PAD - clip.offset : PAD - clip.offset + cfg.frames] @ V.T
        filled.append(np.c_[clip.video_raw[clip.occluded][:, 0], signal[clip.occluded][:, 0]])
        clean.append(np.c_[clip.video_raw[~clip.occluded][:, 0], signal[~clip.occluded][:, 0]])
    filled = np.concatenate(filled)
    assert len(filled) == 10000
    assert abs(np.corrcoef(filled.T)[0, 1]) < 0.1
    clean = np.concatenate(clean)
    assert np.corrcoef(clean.T)[0, 1] > 0.99


def test_occlusion_mask_and_spans():
    cfg = GenConfig(occlusion_prob=1.0, occlusion_len=3)
    c = generate_clip(cfg, np.random.default_rng(9))
    assert c.occluded.sum() == 3
    text = format_spans(c.occluded)
    np.testing.assert_array_equal(parse_spans(text, cfg.frames), c.occluded)
    assert format_spans(np.zeros(5, bool)) == ""
    assert format_spans(np.array([1, 1, 0, 1, 0], bool)) == "0-2;3-4"
    never = generate_dataset(GenConfig(occlusion_prob=0.0), 30, seed=1)
    assert not never.occluded.any()


def test_manifest_round_trip(tmp_path):
    cfg = GenConfig(frames=11, seed=2)
    ds = generate_dataset(cfg, 40, seed=7)
    bin_path, csv_path = ds.save(tmp_path / "train")
    header = [l for l in csv_path.read_text().splitlines() if not l.startswith("#")][0]
    assert header == "clip_id,frames,offset,occluded_spans,seed"

    back = ClipSet.load(tmp_path / "train")
    assert back.audio.tobytes() == ds.audio.tobytes()
    assert back.video.tobytes() == ds.video.tobytes()
    np.testing.assert_array_equal(back.offsets, ds.offsets)
    np.testing.assert_array_equal(back.occluded, ds.occluded)
    assert back.cfg == cfg and back.master_seed == 7

    again = regenerate(GenConfig(), csv_path)
    assert again.audio.tobytes() == ds.audio.tobytes()
    assert again.video.tobytes() == ds.video.tobytes()


def test_dataset_deterministic_across_calls(tmp_path):
    a = generate_dataset(GenConfig(), 20, seed=3)
    b = generate_dataset(GenConfig(), 20, seed=3)
    a.save(tmp_path / "a")
    b.save(tmp_path / "b")
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    c = generate_dataset(GenConfig(), 20, seed=4)
    assert c.audio.tobytes() != a.audio.tobytes()


def test_clipset_indexing():
    ds = generate_dataset(GenConfig(), 12, seed=0)
    sub = ds[[0, 3]]
    assert len(sub) == 2 and sub.offsets[1] == ds.offsets[3]
    assert ds.clip(3).offset == ds.offsets[3]
    with pytest.raises(ValueError):
        generate_dataset(GenConfig(), 0, seed=0)
