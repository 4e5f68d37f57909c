"""Bit-exact binary checkpoints.

Layout, all integers little-endian::

    b"XFRL" | u16 version | u32 body length | body | u32 crc32(everything before)

The body holds the build metadata (architecture, head, input shape, width,
seed, frozen depth, channel/kernel sequence) followed by one record per
parameter: layer index, role tag, shape, trainable flag, lr multiplier and
the raw float64 values.
"""
from __future__ import annotations

import os
import struct
import zlib
from pathlib import Path

import numpy as np

from .networks import HeadSpec, NetworkModel, build

MAGIC = b"XFRL"
VERSION = 1
_HEADER = struct.Struct("<4sHI")
_CRC = struct.Struct("<I")


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class TruncatedError(CheckpointError):
    pass


class CRCError(CheckpointError):
    pass


class _Writer:
    def __init__(self):
        self.parts: list[bytes] = []

    def pack(self, fmt: str, *values):
        self.parts.append(struct.pack("<" + fmt, *values))

    def text(self, s: str):
        raw = s.encode("utf-8")
        self.pack("H", len(raw))
        self.parts.append(raw)

    def blob(self) -> bytes:
        return b"".join(self.parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedError("checkpoint body ends inside a record")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct("<" + fmt)
        return s.unpack(self.take(s.size))

    def text(self) -> str:
        (n,) = self.unpack("H")
        return self.take(n).decode("utf-8")


def encode(model: NetworkModel) -> bytes:
    w = _Writer()
    w.text(model.architecture)
    w.text(model.head_spec.task)
    w.pack("H", model.head_spec.num_classes)
    w.pack("3I", *model.input_shape)
    w.pack("d", model.width)
    w.pack("q", model.seed)
    w.pack("H", model.frozen_upto)
    conv = model.conv_config()
    w.pack("H", len(conv))
    for channels, kernel in conv:
        w.pack("2I", channels, kernel)
    named = model.named_params()
    w.pack("I", len(named))
    for layer, role, p in named:
        w.pack("H", layer)
        w.text(role)
        w.pack("B", p.value.ndim)
        w.pack(f"{p.value.ndim}I", *p.value.shape)
        w.pack("?d", p.trainable, p.lr_multiplier)
        w.parts.append(np.ascontiguousarray(p.value, dtype="<f8").tobytes())
    body = w.blob()
    head = _HEADER.pack(MAGIC, VERSION, len(body)) + body
    return head + _CRC.pack(zlib.crc32(head))


def decode(buf: bytes) -> NetworkModel:
    if len(buf) < len(MAGIC) or buf[: len(MAGIC)] != MAGIC:
        raise BadMagicError("not an XFRL checkpoint (bad magic)")
    if len(buf) < _HEADER.size:
        raise TruncatedError("checkpoint truncated inside the header")
    _, version, length = _HEADER.unpack_from(buf)
    if version != VERSION:
        raise VersionError(f"unsupported checkpoint version {version} (expected {VERSION})")
    expected = _HEADER.size + length + _CRC.size
    if len(buf) < expected:
        raise TruncatedError(f"checkpoint truncated: {len(buf)} bytes, header declares {expected}")
    if len(buf) > expected:
        raise CheckpointError(f"{len(buf) - expected} trailing bytes after checkpoint")
    (stored,) = _CRC.unpack_from(buf, expected - _CRC.size)
    if zlib.crc32(buf[: expected - _CRC.size]) != stored:
        raise CRCError("checkpoint CRC32 mismatch")

    r = _Reader(buf[_HEADER.size : expected - _CRC.size])
    architecture = r.text()
    task = r.text()
    (num_classes,) = r.unpack("H")
    input_shape = r.unpack("3I")
    (width,) = r.unpack("d")
    (seed,) = r.unpack("q")
    (frozen_upto,) = r.unpack("H")
    (n_conv,) = r.unpack("H")
    conv = [r.unpack("2I") for _ in range(n_conv)]

    model = build(architecture, HeadSpec(task, num_classes), input_shape, seed, width)
    if [tuple(c) for c in model.conv_config()] != [tuple(c) for c in conv]:
        raise CheckpointError("stored channel/kernel sequence does not match the architecture")
    named = model.named_params()
    (n_params,) = r.unpack("I")
    if n_params != len(named):
        raise CheckpointError(f"checkpoint has {n_params} parameter records, model expects {len(named)}")
    for layer, role, p in named:
        (got_layer,) = r.unpack("H")
        got_role = r.text()
        (ndim,) = r.unpack("B")
        shape = r.unpack(f"{ndim}I")
        if (got_layer, got_role, shape) != (layer, role, p.value.shape):
            raise CheckpointError(f"parameter record {got_layer}/{got_role}{shape} does not match {layer}/{role}{p.value.shape}")
        trainable, lr_mult = r.unpack("?d")
        p.value = np.frombuffer(r.take(8 * p.value.size), dtype="<f8").reshape(shape).astype(np.float64)
        p.trainable, p.lr_multiplier = trainable, lr_mult
    if r.pos != len(r.buf):
        raise CheckpointError("unused bytes at the end of the checkpoint body")
    model.frozen_upto = frozen_upto
    return model


def save_checkpoint(model: NetworkModel, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(model))
    os.replace(tmp, path)


def load_checkpoint(path) -> NetworkModel:
    try:
        buf = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"{path}: {e.strerror}") from None
    try:
        return decode(buf)
    except CheckpointError as e:
        raise type(e)(f"{path}: {e}") from None
