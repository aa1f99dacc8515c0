"""
Checkpoint container:

    "CUREckpt" | u32 version | u32 header_len | header (UTF-8 JSON) |
    per parameterized layer: weights, bias (little-endian IEEE-754) | u32 CRC-32

The CRC covers every byte before it.
"""
from __future__ import annotations
import json
import os
import struct
import zlib
from typing import Union

import numpy as np

from .errors import (
    CheckpointCrcError,
    CheckpointFormatError,
    CheckpointMagicError,
    CheckpointTruncatedError,
    CheckpointVersionError,
)
from .logging_setup import get_logger
from .nn import Network

logger = get_logger("cure_training.checkpoint")

MAGIC = b"CUREckpt"
VERSION = 1
_DTYPES = {"float64": "<f8", "float32": "<f4"}

PathLike = Union[str, os.PathLike]


def encode_checkpoint(net: Network, dtype: str = "float64") -> bytes:
    if dtype not in _DTYPES:
        raise ValueError(f"checkpoint dtype must be one of {sorted(_DTYPES)}, got {dtype!r}")
    header = dict(net.describe(), dtype=dtype)
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(header_bytes)), header_bytes]
    for layer in net.param_layers:
        parts.append(layer.weight.astype(_DTYPES[dtype]).tobytes())
        parts.append(layer.bias.astype(_DTYPES[dtype]).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def decode_checkpoint(blob: bytes) -> Network:
    if len(blob) < len(MAGIC):
        raise CheckpointTruncatedError(f"checkpoint is {len(blob)} bytes, shorter than its magic")
    if blob[:len(MAGIC)] != MAGIC:
        raise CheckpointMagicError(f"bad checkpoint magic {blob[:len(MAGIC)]!r}")
    pos = len(MAGIC)
    if len(blob) < pos + 8:
        raise CheckpointTruncatedError("checkpoint ends inside its fixed header")
    version, header_len = struct.unpack_from("<II", blob, pos)
    if version != VERSION:
        raise CheckpointVersionError(f"checkpoint version {version}, this build reads {VERSION}")
    pos += 8
    if len(blob) < pos + header_len:
        raise CheckpointTruncatedError("checkpoint ends inside its architecture header")
    try:
        header = json.loads(blob[pos:pos + header_len].decode("utf-8"))
        net = Network.from_description(header)
        dtype = _DTYPES[header.get("dtype", "float64")]
    except (ValueError, KeyError, TypeError) as e:
        raise CheckpointFormatError(f"unreadable checkpoint header: {e}") from e
    pos += header_len

    item = np.dtype(dtype).itemsize
    payload = sum(layer.num_params for layer in net.param_layers) * item
    if len(blob) < pos + payload + 4:
        raise CheckpointTruncatedError(
            f"checkpoint has {len(blob)} bytes, needs {pos + payload + 4}"
        )
    if len(blob) > pos + payload + 4:
        raise CheckpointFormatError(f"{len(blob) - pos - payload - 4} unexpected trailing bytes")
    (stored_crc,) = struct.unpack_from("<I", blob, pos + payload)
    if zlib.crc32(blob[:pos + payload]) & 0xFFFFFFFF != stored_crc:
        raise CheckpointCrcError("checkpoint CRC-32 mismatch")

    vectors = []
    for layer in net.param_layers:
        n_w, n_b = layer.weight.size, layer.bias.size
        w = np.frombuffer(blob, dtype=dtype, count=n_w, offset=pos).astype(np.float64)
        pos += n_w * item
        b = np.frombuffer(blob, dtype=dtype, count=n_b, offset=pos).astype(np.float64)
        pos += n_b * item
        vectors.append(np.concatenate([w, b]))
    return net.with_flat(vectors)


def save_checkpoint(net: Network, path: PathLike, dtype: str = "float64") -> None:
    blob = encode_checkpoint(net, dtype=dtype)
    os.makedirs(os.path.dirname(os.fspath(path)) or ".", exist_ok=True)
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as f:
        f.write(blob)
    os.replace(tmp, path)
    logger.info("Wrote checkpoint %s (%d params, %s)", path, net.num_parameters, dtype)


def load_checkpoint(path: PathLike) -> Network:
    with open(path, "rb") as f:
        blob = f.read()
    net = decode_checkpoint(blob)
    logger.debug("Loaded checkpoint %s (%d params)", path, net.num_parameters)
    return net
