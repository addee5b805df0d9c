"""Command-line entry point: ``syncmatrix <command> [--config FILE] [--section.key=value ...]``.

Settings come from built-in defaults, then an optional INI file, then
``--section.key=value`` flags.  Every command writes the resolved settings
to ``<out_dir>/<command>.resolved.ini``.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 numeric or
training error.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import io
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import persist
from .encoders import EmbeddingModel, encode
from .estimators import (
    DiagAvgSync,
    SlidingWindowSync,
    SyncClassifier,
    SyncE2E,
    diag_avg_offset,
    saliency,
    sliding_window_offset,
    synccls_predict,
)
from .evaluation import run_benchmark
from .exceptions import ConfigError
from .similarity import MAX_OFFSET, FeatureStream, build_similarity_matrix, save_csv, save_pgm
from .synthdata import ClipSet, GenConfig, generate_dataset
from .utils import derive_seed, worker_count

logger = logging.getLogger("syncmatrix")

COMMANDS = ("gen", "train-embed", "train-cls", "train-e2e", "eval", "infer", "saliency")
METHODS = ("baseline", "diag-avg", "sync-cls", "sync-e2e")

DEFAULTS: Dict[str, Dict[str, object]] = {
    "run": {"seed": 0, "out_dir": "run", "workers": 0, "log_level": "WARNING"},
    "gen": {
        "latent_dim": 8,
        "raw_dim_audio": 12,
        "raw_dim_video": 16,
        "frames": 15,
        "noise_sigma": 0.5,
        "occlusion_prob": 0.2,
        "occlusion_len": 4,
        "smoothness": 0.8,
        "mixing_seed": 0,
        "count": 1000,
        "split": "train",
    },
    "paths": {
        "train": "{out_dir}/train",
        "test": "{out_dir}/test",
        "embed": "{out_dir}/embed.ckpt",
        "cls": "{out_dir}/cls_{frames}.ckpt",
        "e2e": "{out_dir}/e2e_{frames}.ckpt",
    },
    "embed": {
        "context": 5,
        "embed_dim": 32,
        "hidden": 64,
        "loss": "angular",
        "margin": 1.0,
        "lr": 1e-3,
        "batch_size": 32,
        "epochs": 20,
        "dtype": "float32",
    },
    "cls": {
        "channels": "256,256,128",
        "lr": 1e-3,
        "batch_size": 32,
        "max_epochs": 20,
        "patience": 3,
        "validation_fraction": 0.1,
        "dtype": "float32",
    },
    "e2e": {"lr": 1e-4, "batch_size": 32, "max_epochs": 5, "patience": 3, "validation_fraction": 0.1},
    "eval": {
        "frames": "11,13,15,20",
        "trials": 10,
        "clips_per_trial": 1000,
        "methods": ",".join(METHODS),
        "report": "{out_dir}/report",
    },
    "infer": {"audio": "", "video": "", "method": "diag-avg", "model": "", "input": "features"},
    "saliency": {"model": "", "data": "", "clip_id": 0, "target": ""},
}


# -- configuration --------------------------------------------------------------
def _coerce(section: str, key: str, raw: str):
    default = DEFAULTS[section][key]
    try:
        if isinstance(default, bool):
            return raw.strip().lower() in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


def _set(cfg: Dict[str, Dict[str, object]], section: str, key: str, raw: str, origin: str) -> None:
    if section not in DEFAULTS:
        raise ConfigError(f"{origin}: unknown section [{section}]")
    if key not in DEFAULTS[section]:
        raise ConfigError(f"{origin}: unknown key {key!r} in [{section}]")
    cfg[section][key] = _coerce(section, key, raw)


def parse_overrides(extra: Sequence[str]) -> List[tuple]:
    """``--section.key=value`` or ``--section.key value`` -> [(section, key, value)]."""
    out, k = [], 0
    while k < len(extra):
        token = extra[k]
        if not token.startswith("--") or "." not in token.split("=", 1)[0]:
            raise ConfigError(f"unrecognised argument {token!r}")
        name, eq, value = token[2:].partition("=")
        if not eq:
            if k + 1 >= len(extra):
                raise ConfigError(f"missing value for --{name}")
            k += 1
            value = extra[k]
        section, _, key = name.partition(".")
        out.append((section, key, value))
        k += 1
    return out


def resolve_config(path: Optional[str], overrides: Sequence[tuple]) -> Dict[str, Dict[str, object]]:
    """Defaults, then the INI file, then flag overrides."""
    cfg = {s: dict(v) for s, v in DEFAULTS.items()}
    if path:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {str(exc).splitlines()[0]}") from None
        for section in parser.sections():
            for key, raw in parser.items(section):
                _set(cfg, section, key, raw, path)
    for section, key, raw in overrides:
        _set(cfg, section, key, raw, "command line")
    return cfg


def render_config(cfg: Dict[str, Dict[str, object]]) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for section, values in cfg.items():
        parser[section] = {k: str(v) for k, v in values.items()}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def _path(cfg, key: str, **extra) -> Path:
    template = str(cfg["paths"][key])
    try:
        return Path(template.format(out_dir=cfg["run"]["out_dir"], **extra))
    except (KeyError, IndexError) as exc:
        raise ConfigError(f"[paths] {key}: bad placeholder in {template!r}") from exc


def _int_list(text: str, what: str) -> List[int]:
    try:
        return [int(x) for x in str(text).split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"{what}: expected comma-separated integers, got {text!r}") from None


def gen_config(cfg) -> GenConfig:
    g = cfg["gen"]
    return GenConfig(
        latent_dim=g["latent_dim"],
        raw_dim_audio=g["raw_dim_audio"],
        raw_dim_video=g["raw_dim_video"],
        frames=g["frames"],
        noise_sigma=g["noise_sigma"],
        occlusion_prob=g["occlusion_prob"],
        occlusion_len=g["occlusion_len"],
        smoothness=g["smoothness"],
        seed=g["mixing_seed"],
    )


# -- commands -------------------------------------------------------------------
def cmd_gen(cfg, workers: int) -> None:
    split = str(cfg["gen"]["split"])
    if cfg["gen"]["count"] <= 0:
        raise ConfigError("[gen] count must be positive")
    prefix = Path(cfg["run"]["out_dir"]) / split
    clips = generate_dataset(gen_config(cfg), cfg["gen"]["count"], derive_seed(cfg["run"]["seed"], "gen", split))
    clips.save(prefix)


def _load_clips(path: Path) -> ClipSet:
    return ClipSet.load(path)


def _embedding(cfg) -> EmbeddingModel:
    encoder, _ = persist.load_model(_path(cfg, "embed"))
    if encoder is None:
        raise ConfigError("[paths] embed does not point at an encoder checkpoint")
    return EmbeddingModel.from_encoder(encoder)


def _write_history(path: Path, history: List) -> None:
    rows = [{"epoch": k, "loss": h} if not isinstance(h, dict) else h for k, h in enumerate(history)]
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: f"{v:.6f}" if isinstance(v, float) else v for k, v in r.items()})
    path.write_text(buf.getvalue())


def cmd_train_embed(cfg, workers: int) -> None:
    e = cfg["embed"]
    train = _load_clips(_path(cfg, "train"))
    model = EmbeddingModel(
        context=e["context"], embed_dim=e["embed_dim"], hidden=e["hidden"], loss=e["loss"], margin=e["margin"],
        lr=e["lr"], batch_size=e["batch_size"], epochs=e["epochs"], dtype=e["dtype"],
        random_state=derive_seed(cfg["run"]["seed"], "embed"),
    ).fit(train)
    out = _path(cfg, "embed")
    persist.save_model(out, encoder=model.encoder_)
    _write_history(out.with_suffix(".history.csv"), model.history_)


def _classifier(cfg) -> SyncClassifier:
    c = cfg["cls"]
    channels = _int_list(c["channels"], "[cls] channels")
    if len(channels) != 3:
        raise ConfigError("[cls] channels needs three integers")
    return SyncClassifier(
        channels=tuple(channels), lr=c["lr"], batch_size=c["batch_size"], max_epochs=c["max_epochs"],
        patience=c["patience"], validation_fraction=c["validation_fraction"], dtype=c["dtype"],
        random_state=derive_seed(cfg["run"]["seed"], "cls"),
    )


def cmd_train_cls(cfg, workers: int) -> None:
    train = _load_clips(_path(cfg, "train"))
    embedding = _embedding(cfg)
    clf = _classifier(cfg).fit(embedding.transform(train), train.offsets)
    out = _path(cfg, "cls", frames=train.frames)
    persist.save_model(out, net=clf.net_)
    _write_history(out.with_suffix(".history.csv"), clf.history_)


def cmd_train_e2e(cfg, workers: int) -> None:
    e = cfg["e2e"]
    train = _load_clips(_path(cfg, "train"))
    embedding = _embedding(cfg)
    _, net = persist.load_model(_path(cfg, "cls", frames=train.frames))
    if net is None:
        raise ConfigError("[paths] cls does not point at a classifier checkpoint")
    model = SyncE2E(
        embedding, SyncClassifier.from_net(net), lr=e["lr"], batch_size=e["batch_size"], max_epochs=e["max_epochs"],
        patience=e["patience"], validation_fraction=e["validation_fraction"],
        random_state=derive_seed(cfg["run"]["seed"], "e2e"),
    ).fit(train)
    out = _path(cfg, "e2e", frames=train.frames)
    persist.save_model(out, encoder=model.encoder_, net=model.net_)
    _write_history(out.with_suffix(".history.csv"), model.history_)


class MatrixMethod:
    """Encoder -> similarity matrices -> matrix estimator, as one predictor."""

    def __init__(self, embedding: EmbeddingModel, estimator):
        self.embedding = embedding
        self.estimator = estimator

    def predict(self, clips):
        return self.estimator.predict(self.embedding.transform(clips))


def build_methods(cfg, methods: Sequence[str], frames: Sequence[int]) -> Dict[str, Dict[int, object]]:
    unknown = [m for m in methods if m not in METHODS]
    if unknown:
        raise ConfigError(f"[eval] methods: unknown {unknown}; choose from {list(METHODS)}")
    embedding = _embedding(cfg) if set(methods) - {"sync-e2e"} else None
    models: Dict[str, Dict[int, object]] = {}
    for m in methods:
        per_len = {}
        for f in frames:
            if m == "baseline":
                per_len[f] = MatrixMethod(embedding, SlidingWindowSync().fit())
            elif m == "diag-avg":
                per_len[f] = MatrixMethod(embedding, DiagAvgSync().fit())
            elif m == "sync-cls":
                _, net = persist.load_model(_path(cfg, "cls", frames=f))
                per_len[f] = MatrixMethod(embedding, SyncClassifier.from_net(net))
            else:
                enc, net = persist.load_model(_path(cfg, "e2e", frames=f))
                if enc is None or net is None:
                    raise ConfigError(f"{_path(cfg, 'e2e', frames=f)} lacks encoder or classifier tensors")
                per_len[f] = SyncE2E.from_parts(enc, net)
        models[m] = per_len
    return models


def cmd_eval(cfg, workers: int) -> None:
    ev = cfg["eval"]
    frames = _int_list(ev["frames"], "[eval] frames")
    methods = [m.strip() for m in str(ev["methods"]).split(",") if m.strip()]
    if not frames or not methods:
        raise ConfigError("[eval] needs at least one frame count and one method")
    if ev["trials"] < 1 or ev["clips_per_trial"] < 1:
        raise ConfigError("[eval] trials and clips_per_trial must be positive")
    models = build_methods(cfg, methods, frames)
    baseline = "baseline" if "baseline" in methods else methods[0]
    report = run_benchmark(models, gen_config(cfg), frames, ev["trials"], ev["clips_per_trial"],
                           seed=cfg["run"]["seed"], baseline=baseline, workers=workers)
    prefix = Path(str(ev["report"]).format(out_dir=cfg["run"]["out_dir"]))
    prefix.parent.mkdir(parents=True, exist_ok=True)
    report.save(prefix)


def _read_rows(path: str) -> np.ndarray:
    if not path:
        raise ConfigError("[infer] audio and video files are required")
    try:
        data = np.loadtxt(path, delimiter=",", ndmin=2)
    except ValueError as exc:
        raise ConfigError(f"{path}: not a numeric CSV ({exc})") from None
    return data


def cmd_infer(cfg, workers: int) -> None:
    inf = cfg["infer"]
    method, kind = inf["method"], inf["input"]
    if method not in METHODS:
        raise ConfigError(f"[infer] method must be one of {list(METHODS)}")
    if kind not in ("features", "raw"):
        raise ConfigError("[infer] input must be 'features' or 'raw'")
    audio, video = _read_rows(inf["audio"]), _read_rows(inf["video"])
    encoder = net = None
    if inf["model"]:
        encoder, net = persist.load_model(inf["model"])
    if kind == "raw":
        if encoder is None:
            encoder, _ = persist.load_model(_path(cfg, "embed"))
        if encoder is None:
            raise ConfigError("raw input needs an encoder checkpoint")
        audio = encode(encoder.audio, audio, "audio").features
        video = encode(encoder.video, video, "visual").features
    a, v = FeatureStream("audio", audio), FeatureStream("visual", video)
    if method == "baseline":
        pred = sliding_window_offset(a, v)
    else:
        m = build_similarity_matrix(a, v)
        if method == "diag-avg":
            pred = diag_avg_offset(m)
        else:
            if net is None:
                frames = len(m) + (encoder.config.context - 1 if encoder is not None else cfg["embed"]["context"] - 1)
                _, net = persist.load_model(_path(cfg, "cls" if method == "sync-cls" else "e2e", frames=frames))
            if net is None:
                raise ConfigError(f"{method} needs a classifier checkpoint")
            pred = synccls_predict(net, m)
    print(pred.offset.offset)


def cmd_saliency(cfg, workers: int) -> None:
    s = cfg["saliency"]
    data = Path(s["data"]) if s["data"] else _path(cfg, "test")
    clips = _load_clips(data)
    k = s["clip_id"]
    if not 0 <= k < len(clips):
        raise ConfigError(f"[saliency] clip_id {k} outside [0, {len(clips)})")
    model_path = Path(s["model"]) if s["model"] else _path(cfg, "cls", frames=clips.frames)
    encoder, net = persist.load_model(model_path)
    if net is None:
        raise ConfigError(f"{model_path} holds no classifier")
    embedding = EmbeddingModel.from_encoder(encoder) if encoder is not None else _embedding(cfg)
    m = embedding.transform(clips[[k]])[0]
    target = int(s["target"]) if str(s["target"]).strip() else int(clips.offsets[k])
    if abs(target) > MAX_OFFSET:
        raise ConfigError(f"[saliency] target offset {target} outside [-5, 5]")
    grad = saliency(net, m, target + MAX_OFFSET)
    out = Path(cfg["run"]["out_dir"])
    g_max = float(np.abs(grad).max()) or 1.0
    save_csv(out / f"saliency_{k}.csv", grad)
    save_pgm(out / f"saliency_{k}.pgm", grad, -g_max, g_max)
    save_csv(out / f"matrix_{k}.csv", m)
    save_pgm(out / f"matrix_{k}.pgm", m)
    print(f"clip {k} offset {int(clips.offsets[k])} target {target} predicted {synccls_predict(net, m).offset.offset}")


HANDLERS = {
    "gen": cmd_gen,
    "train-embed": cmd_train_embed,
    "train-cls": cmd_train_cls,
    "train-e2e": cmd_train_e2e,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "saliency": cmd_saliency,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="syncmatrix", description="Audio-visual offset estimation on synthetic paired streams.")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("inputs", nargs="*", help="infer only: audio and video feature CSV files")
    parser.add_argument("--config", help="INI file with [section] key = value settings")
    parser.add_argument("--workers", type=int, help="worker cap (falls back to SYNCMATRIX_WORKERS)")
    return parser


def run(argv: Optional[Sequence[str]] = None) -> int:
    args, extra = build_parser().parse_known_args(argv)
    overrides = parse_overrides(extra)
    if args.inputs:
        if args.command != "infer":
            raise ConfigError(f"{args.command} takes no positional arguments")
        if len(args.inputs) != 2:
            raise ConfigError("infer takes two positional files: audio and video features")
        overrides = [("infer", "audio", args.inputs[0]), ("infer", "video", args.inputs[1])] + overrides
    if args.workers is not None:
        overrides.append(("run", "workers", str(args.workers)))
    cfg = resolve_config(args.config, overrides)
    level = str(cfg["run"]["log_level"]).upper()
    if not isinstance(logging.getLevelName(level), int):
        raise ConfigError(f"[run] log_level: unknown level {level!r}")
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    workers = worker_count(cfg["run"]["workers"] or None)
    out_dir = Path(cfg["run"]["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / f"{args.command}.resolved.ini").write_text(render_config(cfg))
    HANDLERS[args.command](cfg, workers)
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        code = run(argv)
    except ConfigError as exc:
        code, msg = 2, f"config error: {exc}"
    except OSError as exc:
        code, msg = 3, f"I/O error: {exc}"
    except ArithmeticError as exc:
        code, msg = 4, f"numeric error: {exc}"
    except ValueError as exc:
        code, msg = 2, f"config error: {exc}"
    if code:
        print(" ".join(msg.split()), file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
