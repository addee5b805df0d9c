"""Model checkpoints on top of the SYNCCKPT container.

Tensor names: ``enc.audio.*``, ``enc.video.*``, ``enc.scale.*`` for the
encoder pair, ``cls.*`` for the classifier, and a few ``meta.*`` scalars
holding sizes that cannot be read off the weight shapes.
"""

from __future__ import annotations

from pathlib import Path
from typing import Dict, Optional, Tuple, Union

import numpy as np

from . import checkpoint
from .encoders import EncoderConfig, PairEncoder
from .estimators import SyncClsNet
from .exceptions import CheckpointError

PathLike = Union[str, Path]


def encoder_tensors(encoder: PairEncoder) -> Dict[str, np.ndarray]:
    table = {f"enc.{k}": v for k, v in encoder.state_dict().items()}
    table["meta.context"] = np.array(encoder.config.context)
    return table


def classifier_tensors(net: SyncClsNet) -> Dict[str, np.ndarray]:
    return {f"cls.{k}": v for k, v in net.state_dict().items()}


def save_model(path: PathLike, encoder: Optional[PairEncoder] = None, net: Optional[SyncClsNet] = None) -> None:
    table: Dict[str, np.ndarray] = {}
    if encoder is not None:
        table.update(encoder_tensors(encoder))
    if net is not None:
        table.update(classifier_tensors(net))
    checkpoint.save(path, table)


def _load_into(module, state: Dict[str, np.ndarray], what: str) -> None:
    try:
        module.load_state_dict(state)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{what} tensors do not match the expected table: {exc}") from exc


def encoder_from_tensors(table: Dict[str, np.ndarray], dtype=np.float32) -> PairEncoder:
    state = checkpoint.select(table, "enc.")
    if "audio.fc1.weight" not in state or "meta.context" not in table:
        raise CheckpointError("checkpoint holds no encoder (enc.* tensors)")
    context = int(table["meta.context"])
    hidden, in_audio = state["audio.fc1.weight"].shape
    _, in_video = state["video.fc1.weight"].shape
    embed = state["audio.fc2.weight"].shape[0]
    if in_audio % context or in_video % context:
        raise CheckpointError("encoder input width is not a multiple of the context")
    cfg = EncoderConfig(context, in_audio // context, in_video // context, embed, hidden)
    encoder = PairEncoder(cfg, dtype=dtype)
    _load_into(encoder, state, "encoder")
    return encoder


def classifier_from_tensors(table: Dict[str, np.ndarray], dtype=np.float32) -> SyncClsNet:
    state = checkpoint.select(table, "cls.")
    if "conv2.weight" not in state:
        raise CheckpointError("checkpoint holds no classifier (cls.* tensors)")
    c1 = state["conv1.weight"].shape[0]
    c2, _, n, _ = state["conv2.weight"].shape
    c3 = state["conv3.weight"].shape[0]
    net = SyncClsNet(n, (c1, c2, c3), dtype=dtype)
    _load_into(net, state, "classifier")
    net.eval()
    return net


def load_model(path: PathLike, dtype=np.float32) -> Tuple[Optional[PairEncoder], Optional[SyncClsNet]]:
    """Whatever the checkpoint holds: ``(encoder or None, net or None)``."""
    table = checkpoint.load(path)
    encoder = encoder_from_tensors(table, dtype) if "meta.context" in table else None
    net = classifier_from_tensors(table, dtype) if any(k.startswith("cls.") for k in table) else None
    if encoder is None and net is None:
        raise CheckpointError(f"{path}: no encoder or classifier tensors")
    return encoder, net
