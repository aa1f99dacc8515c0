# tests/test_checkpoint.py
# -------------------------------------------------------------------
# Checkpoint container: round trips and every rejection path.
# -------------------------------------------------------------------

import struct

import numpy as np
import pytest

from src.cure_training.checkpoint import (
    MAGIC,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    save_checkpoint,
)
from src.cure_training.errors import (
    CheckpointCrcError,
    CheckpointError,
    CheckpointFormatError,
    CheckpointMagicError,
    CheckpointTruncatedError,
    CheckpointVersionError,
)
from src.cure_training.nn import build_architecture, forward, init


# ---------- Helpers ----------

def make_net(arch: str = "cnn4"):
    return init(build_architecture(arch, (1, 8, 8), 4), seed=3)


# ---------- Tests ----------

@pytest.mark.parametrize("arch", ["linear", "fc", "cnn4"])
def test_float64_round_trip_is_exact(arch):
    net = make_net(arch)
    back = decode_checkpoint(encode_checkpoint(net))
    net.check_same_architecture(back)
    for p, q in zip(net.flat_parameters(), back.flat_parameters()):
        np.testing.assert_array_equal(p, q)


def test_float32_round_trip_is_close():
    net = make_net()
    blob32 = encode_checkpoint(net, dtype="float32")
    assert len(blob32) < len(encode_checkpoint(net))
    back = decode_checkpoint(blob32)
    x = np.random.default_rng(0).uniform(size=(3, 1, 8, 8))
    np.testing.assert_allclose(forward(back, x), forward(net, x), rtol=1e-5, atol=1e-6)


def test_unknown_dtype_rejected():
    with pytest.raises(ValueError):
        encode_checkpoint(make_net(), dtype="float16")


def test_save_and_load(tmp_path):
    net = make_net()
    path = tmp_path / "nested" / "model.ckpt"
    save_checkpoint(net, path)
    assert not (tmp_path / "nested" / "model.ckpt.tmp").exists()
    back = load_checkpoint(path)
    for p, q in zip(net.flat_parameters(), back.flat_parameters()):
        np.testing.assert_array_equal(p, q)


def test_bad_magic():
    blob = encode_checkpoint(make_net())
    with pytest.raises(CheckpointMagicError):
        decode_checkpoint(b"NOTckpt!" + blob[len(MAGIC):])


def test_bad_version():
    blob = bytearray(encode_checkpoint(make_net()))
    struct.pack_into("<I", blob, len(MAGIC), 99)
    with pytest.raises(CheckpointVersionError):
        decode_checkpoint(bytes(blob))


def test_flipped_payload_byte_fails_crc():
    blob = bytearray(encode_checkpoint(make_net()))
    blob[-20] ^= 0xFF
    with pytest.raises(CheckpointCrcError):
        decode_checkpoint(bytes(blob))


@pytest.mark.parametrize("keep", [4, 12, 40, -1])
def test_truncated(keep):
    blob = encode_checkpoint(make_net())
    with pytest.raises(CheckpointTruncatedError):
        decode_checkpoint(blob[:keep])


def test_trailing_bytes():
    with pytest.raises(CheckpointFormatError):
        decode_checkpoint(encode_checkpoint(make_net()) + b"\x00")


def test_garbled_header():
    blob = bytearray(encode_checkpoint(make_net()))
    header_start = len(MAGIC) + 8
    blob[header_start] = ord("x")
    with pytest.raises(CheckpointFormatError):
        decode_checkpoint(bytes(blob))


def test_all_errors_share_base():
    for cls in (CheckpointCrcError, CheckpointMagicError, CheckpointTruncatedError,
                CheckpointVersionError, CheckpointFormatError):
        assert issubclass(cls, CheckpointError)
