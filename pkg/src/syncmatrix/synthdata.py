"""Seeded generator of paired raw audio/video streams with planted offsets.

A smooth latent walk drives both modalities through fixed random mixing
maps.  The video reads the latent ``offset`` frames late/early, so a
negative offset means the video leads the audio.  Occluded video frames
are replaced by noise that carries no latent information.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np

from . import checkpoint
from .exceptions import ConfigError
from .similarity import MAX_OFFSET, OFFSETS
from .utils import derive_seed

PAD = MAX_OFFSET
OCCLUSION_SCALE = 1.0
MANIFEST_COLUMNS = ["clip_id", "frames", "offset", "occluded_spans", "seed"]


@dataclass(frozen=True)
class GenConfig:
    latent_dim: int = 8
    raw_dim_audio: int = 12
    raw_dim_video: int = 16
    frames: int = 15
    noise_sigma: float = 0.5
    occlusion_prob: float = 0.2
    occlusion_len: int = 4
    smoothness: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if self.frames - 4 <= MAX_OFFSET:
            raise ConfigError(f"frames={self.frames}: need frames - 4 > {MAX_OFFSET} to represent every offset")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        if not 0.0 <= self.occlusion_prob <= 1.0:
            raise ConfigError("occlusion_prob must lie in [0, 1]")
        if not 0 <= self.occlusion_len <= self.frames:
            raise ConfigError("occlusion_len must lie in [0, frames]")
        if not 0.0 <= self.smoothness < 1.0:
            raise ConfigError("smoothness must lie in [0, 1)")
        if min(self.raw_dim_audio, self.raw_dim_video) < self.latent_dim:
            raise ConfigError("raw dims must be >= latent_dim for full-rank mixing")

    def replace(self, **changes) -> "GenConfig":
        return GenConfig(**{**asdict(self), **changes})

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        names = {f.name: f.type for f in fields(cls)}
        unknown = set(d) - set(names)
        if unknown:
            raise ConfigError(f"unknown generator keys: {sorted(unknown)}")
        kinds = {f.name: type(getattr(cls(), f.name)) for f in fields(cls)}
        return cls(**{k: kinds[k](v) for k, v in d.items()})


@dataclass
class SyntheticClip:
    audio_raw: np.ndarray
    video_raw: np.ndarray
    offset: int
    occluded: np.ndarray

    @property
    def class_index(self) -> int:
        return self.offset + MAX_OFFSET


def mixing_maps(cfg: GenConfig) -> Tuple[np.ndarray, np.ndarray]:
    """Fixed full-column-rank maps latent -> raw, one per modality."""
    rng = np.random.default_rng(derive_seed(cfg.seed, "mixing"))
    scale = 1.0 / np.sqrt(cfg.latent_dim)
    A = rng.normal(0.0, scale, (cfg.raw_dim_audio, cfg.latent_dim))
    V = rng.normal(0.0, scale, (cfg.raw_dim_video, cfg.latent_dim))
    return A, V


def latent_walk(cfg: GenConfig, length: int, rng: np.random.Generator) -> np.ndarray:
    """Stationary AR(1) Gaussian walk with unit marginal variance."""
    rho = cfg.smoothness
    e = rng.standard_normal((length, cfg.latent_dim))
    z = np.empty_like(e)
    z[0] = e[0]
    gain = np.sqrt(1.0 - rho * rho)
    for t in range(1, length):
        z[t] = rho * z[t - 1] + gain * e[t]
    return z


def generate_clip(
    cfg: GenConfig,
    rng: np.random.Generator,
    offset: Optional[int] = None,
    maps: Optional[Tuple[np.ndarray, np.ndarray]] = None,
) -> SyntheticClip:
    """Draw one clip.  ``offset`` overrides the uniformly drawn one without
    changing any other random draw."""
    A, V = maps if maps is not None else mixing_maps(cfg)
    T = cfg.frames
    drawn = int(rng.integers(-MAX_OFFSET, MAX_OFFSET + 1))
    offset = drawn if offset is None else int(offset)
    if abs(offset) > MAX_OFFSET:
        raise ValueError(f"offset {offset} outside [-{MAX_OFFSET}, {MAX_OFFSET}]")
    z = latent_walk(cfg, T + 2 * PAD, rng)
    noise_a = rng.standard_normal((T, cfg.raw_dim_audio))
    noise_v = rng.standard_normal((T, cfg.raw_dim_video))
    audio = z[PAD : PAD + T] @ A.T + cfg.noise_sigma * noise_a
    video = z[PAD - offset : PAD - offset + T] @ V.T + cfg.noise_sigma * noise_v

    occluded = np.zeros(T, dtype=bool)
    hit = rng.random() < cfg.occlusion_prob
    start = int(rng.integers(0, T - cfg.occlusion_len + 1))
    filler = OCCLUSION_SCALE * rng.standard_normal((cfg.occlusion_len, cfg.raw_dim_video))
    if hit and cfg.occlusion_len > 0:
        occluded[start : start + cfg.occlusion_len] = True
        video[start : start + cfg.occlusion_len] = filler
    return SyntheticClip(audio.astype(np.float32), video.astype(np.float32), offset, occluded)


@dataclass
class ClipSet:
    """A batch of clips stored as dense arrays."""

    audio: np.ndarray  # B x T x raw_dim_audio
    video: np.ndarray  # B x T x raw_dim_video
    offsets: np.ndarray  # B
    occluded: np.ndarray  # B x T
    seeds: np.ndarray  # per-clip generator seeds
    cfg: Optional[GenConfig] = None
    master_seed: Optional[int] = None

    def __len__(self) -> int:
        return self.audio.shape[0]

    def __getitem__(self, index) -> "ClipSet":
        if isinstance(index, (int, np.integer)):
            index = [int(index)]
        return ClipSet(
            self.audio[index],
            self.video[index],
            self.offsets[index],
            self.occluded[index],
            self.seeds[index],
            self.cfg,
            self.master_seed,
        )

    @property
    def frames(self) -> int:
        return self.audio.shape[1]

    def clip(self, k: int) -> SyntheticClip:
        return SyntheticClip(self.audio[k], self.video[k], int(self.offsets[k]), self.occluded[k])

    # -- persistence ------------------------------------------------------
    def save(self, prefix: Union[str, Path]) -> Tuple[Path, Path]:
        """Write ``<prefix>.bin`` (tensor container) and ``<prefix>.csv`` (manifest)."""
        prefix = Path(prefix)
        table = {}
        for k in range(len(self)):
            table[f"clip.{k}.audio"] = self.audio[k]
            table[f"clip.{k}.video"] = self.video[k]
        bin_path = prefix.with_suffix(".bin")
        csv_path = prefix.with_suffix(".csv")
        checkpoint.save(bin_path, table)
        csv_path.write_text(self.manifest())
        return bin_path, csv_path

    def manifest(self) -> str:
        buf = io.StringIO()
        if self.cfg is not None:
            buf.write("# cfg " + json.dumps(asdict(self.cfg), sort_keys=True) + "\n")
        if self.master_seed is not None:
            buf.write(f"# master_seed {self.master_seed}\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS)
        for k in range(len(self)):
            writer.writerow([k, self.frames, int(self.offsets[k]), format_spans(self.occluded[k]), int(self.seeds[k])])
        return buf.getvalue()

    @classmethod
    def load(cls, prefix: Union[str, Path]) -> "ClipSet":
        prefix = Path(prefix)
        table = checkpoint.load(prefix.with_suffix(".bin"))
        cfg, master, rows = read_manifest(prefix.with_suffix(".csv"))
        count = len(rows)
        audio = np.stack([table[f"clip.{k}.audio"] for k in range(count)])
        video = np.stack([table[f"clip.{k}.video"] for k in range(count)])
        frames = audio.shape[1]
        occluded = np.stack([parse_spans(r["occluded_spans"], frames) for r in rows])
        offsets = np.array([int(r["offset"]) for r in rows], dtype=np.int64)
        seeds = np.array([int(r["seed"]) for r in rows], dtype=np.uint64)
        return cls(audio, video, offsets, occluded, seeds, cfg, master)


def format_spans(mask: np.ndarray) -> str:
    spans, t, T = [], 0, len(mask)
    while t < T:
        if mask[t]:
            s = t
            while t < T and mask[t]:
                t += 1
            spans.append(f"{s}-{t}")
        else:
            t += 1
    return ";".join(spans)


def parse_spans(text: str, frames: int) -> np.ndarray:
    mask = np.zeros(frames, dtype=bool)
    for span in filter(None, (text or "").split(";")):
        s, e = span.split("-")
        mask[int(s) : int(e)] = True
    return mask


def read_manifest(path: Union[str, Path]):
    cfg, master, body = None, None, []
    for line in Path(path).read_text().splitlines():
        if line.startswith("# cfg "):
            cfg = GenConfig(**json.loads(line[len("# cfg ") :]))
        elif line.startswith("# master_seed "):
            master = int(line.split()[-1])
        elif not line.startswith("#"):
            body.append(line)
    rows = list(csv.DictReader(body))
    return cfg, master, rows


def balanced_offsets(count: int, rng: np.random.Generator) -> np.ndarray:
    """Each of the 11 offsets ``count // 11`` or ``count // 11 + 1`` times, shuffled."""
    return rng.permutation(np.resize(OFFSETS, count))


def generate_dataset(cfg: GenConfig, count: int, seed: int, balanced: bool = True) -> ClipSet:
    """Generate ``count`` clips; clip ``k`` uses sub-seed ``(seed, "clip", k)``."""
    if count <= 0:
        raise ValueError("count must be positive")
    maps = mixing_maps(cfg)
    if balanced:
        offsets = balanced_offsets(count, np.random.default_rng(derive_seed(seed, "labels")))
    else:
        offsets = [None] * count
    clips: List[SyntheticClip] = []
    seeds = np.empty(count, dtype=np.uint64)
    for k in range(count):
        seeds[k] = derive_seed(seed, "clip", k)
        rng = np.random.default_rng(int(seeds[k]))
        clips.append(generate_clip(cfg, rng, offsets[k], maps))
    return ClipSet(
        audio=np.stack([c.audio_raw for c in clips]),
        video=np.stack([c.video_raw for c in clips]),
        offsets=np.array([c.offset for c in clips], dtype=np.int64),
        occluded=np.stack([c.occluded for c in clips]),
        seeds=seeds,
        cfg=cfg,
        master_seed=seed,
    )


def regenerate(cfg: GenConfig, manifest_path: Union[str, Path]) -> ClipSet:
    """Rebuild clips from a manifest's per-clip seeds and offsets."""
    file_cfg, master, rows = read_manifest(manifest_path)
    cfg = file_cfg or cfg
    maps = mixing_maps(cfg)
    clips = [generate_clip(cfg, np.random.default_rng(int(r["seed"])), int(r["offset"]), maps) for r in rows]
    return ClipSet(
        audio=np.stack([c.audio_raw for c in clips]),
        video=np.stack([c.video_raw for c in clips]),
        offsets=np.array([c.offset for c in clips], dtype=np.int64),
        occluded=np.stack([c.occluded for c in clips]),
        seeds=np.array([int(r["seed"]) for r in rows], dtype=np.uint64),
        cfg=cfg,
        master_seed=master,
    )
