import struct

import numpy as np
import pytest

from syncmatrix import checkpoint
from syncmatrix.encoders import PairEncoder
from syncmatrix.estimators import SyncClsNet
from syncmatrix.exceptions import CheckpointError


def test_layout_of_one_tensor():
    blob = checkpoint.dumps({"cls.w": np.array([[1.0, 2.0]])})
    assert blob[:8] == b"SYNCCKPT"
    assert struct.unpack_from("<I", blob, 8) == (1,)
    assert struct.unpack_from("<I", blob, 12) == (5,)
    assert blob[16:21] == b"cls.w"
    assert struct.unpack_from("<3I", blob, 21) == (2, 1, 2)
    assert np.frombuffer(blob[33:], "<f4").tolist() == [1.0, 2.0]


def test_round_trip_byte_identical(tmp_path):
    net = SyncClsNet(7, channels=(4, 5, 6), seed=3)
    enc = PairEncoder(seed=1)
    table = {**{f"cls.{k}": v for k, v in net.state_dict().items()},
             **{f"enc.{k}": v for k, v in enc.state_dict().items()}}
    checkpoint.save(tmp_path / "a.ckpt", table)
    back = checkpoint.load(tmp_path / "a.ckpt")
    assert list(back) == list(table)
    checkpoint.save(tmp_path / "b.ckpt", back)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert any(k.startswith("enc.audio.") for k in back)
    assert any(k.startswith("enc.video.") for k in back)

    fresh = SyncClsNet(7, channels=(4, 5, 6), seed=99)
    fresh.load_state_dict(checkpoint.select(back, "cls."))
    for k, v in fresh.state_dict().items():
        np.testing.assert_array_equal(v, np.float32(net.state_dict()[k]))


def test_scalar_and_empty_tensors():
    back = checkpoint.loads(checkpoint.dumps({"s": np.float32(2.5), "e": np.zeros((0, 3))}))
    assert back["s"].shape == () and back["s"] == 2.5
    assert back["e"].shape == (0, 3)


def test_bad_magic_and_truncation():
    with pytest.raises(CheckpointError):
        checkpoint.loads(b"NOTACKPT" + b"\x01\x00\x00\x00")
    blob = checkpoint.dumps({"x": np.ones(10)})
    with pytest.raises(CheckpointError):
        checkpoint.loads(blob[:-8])
    with pytest.raises(CheckpointError):
        checkpoint.loads(blob[:8] + struct.pack("<I", 7) + blob[12:])


def test_shape_mismatch_on_load():
    net = SyncClsNet(7, channels=(4, 4, 4))
    other = SyncClsNet(7, channels=(4, 4, 5))
    with pytest.raises(ValueError):
        other.load_state_dict(net.state_dict())
