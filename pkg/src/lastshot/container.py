"""Versioned binary container for worlds, pre-trained models and anchor caches.

Layout (all little-endian)::

    magic      8 bytes  b"LSHOTBIN"
    version    u32
    kind       u16 length + utf-8
    n_fields   u32
    field*     name (u16 length + utf-8), type code (u8), payload

Type codes: 0 float64 array, 1 int64 array, 2 utf-8 string. Arrays carry
``ndim`` (u8) and each dimension (u64) before the raw data.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"LSHOTBIN"
VERSION = 1

_F64, _I64, _STR = 0, 1, 2


class ContainerError(ValueError):
    pass


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def write_container(path, kind: str, fields: dict) -> None:
    chunks = [MAGIC, struct.pack("<I", VERSION), _pack_str(kind), struct.pack("<I", len(fields))]
    for name, value in fields.items():
        chunks.append(_pack_str(name))
        if isinstance(value, str):
            raw = value.encode("utf-8")
            chunks.append(struct.pack("<BQ", _STR, len(raw)) + raw)
            continue
        arr = np.asarray(value)
        if arr.dtype.kind in "iub":
            code, arr = _I64, arr.astype("<i8")
        else:
            code, arr = _F64, arr.astype("<f8")
        chunks.append(struct.pack("<BB", code, arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(np.ascontiguousarray(arr).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_container(path, expect_kind: str | None = None):
    """Return ``(kind, fields)``; fields keep their on-disk order."""
    buf = Path(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise ContainerError(f"{path}: truncated container")
        out = buf[pos:pos + n]
        pos += n
        return out

    def take_str():
        (n,) = struct.unpack("<H", take(2))
        return take(n).decode("utf-8")

    if take(8) != MAGIC:
        raise ContainerError(f"{path}: not a lastshot container")
    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise ContainerError(f"{path}: unsupported container version {version}")
    kind = take_str()
    if expect_kind is not None and kind != expect_kind:
        raise ContainerError(f"{path}: holds {kind!r}, expected {expect_kind!r}")
    (n_fields,) = struct.unpack("<I", take(4))
    fields = {}
    for _ in range(n_fields):
        name = take_str()
        (code,) = struct.unpack("<B", take(1))
        if code == _STR:
            (n,) = struct.unpack("<Q", take(8))
            fields[name] = take(n).decode("utf-8")
            continue
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        dtype = "<f8" if code == _F64 else "<i8"
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(take(8 * count), dtype=dtype).reshape(shape)
        fields[name] = arr.astype(np.float64 if code == _F64 else np.int64)
    return kind, fields


def mlp_fields(prefix: str, params) -> dict:
    out = {f"{prefix}.activations": ",".join(params.activations)}
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        out[f"{prefix}.w{i}"] = w
        out[f"{prefix}.b{i}"] = b
    return out


def mlp_from_fields(prefix: str, fields: dict):
    from lastshot.numkit import MlpParams

    acts = fields[f"{prefix}.activations"]
    acts = acts.split(",") if acts else []
    weights, biases = [], []
    i = 0
    while f"{prefix}.w{i}" in fields:
        weights.append(np.array(fields[f"{prefix}.w{i}"]))
        biases.append(np.array(fields[f"{prefix}.b{i}"]))
        i += 1
    return MlpParams(weights, biases, acts)
