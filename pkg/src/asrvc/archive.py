"""Binary containers and the key=value text config format.

NTAR (named-tensor archive), little-endian::

    b"NTAR" u32 version=1 u32 count
    repeated: u16 name_len, name (UTF-8), u8 rank, u32 dims[rank], f32 data (row-major)

FEAT (feature matrix dump), little-endian::

    b"FEAT" u32 version=1 u32 rows u32 cols, f32 data (row-major)

Text blocks (speaker names and the like) ride inside an NTAR as rank-1
tensors of UTF-8 byte values.
"""

from __future__ import annotations

import dataclasses
import os
import struct
import typing

import numpy as np

from .errors import ConfigMismatch, MissingTensor, NotFound, ShapeMismatch, UnsupportedFormat, VersionMismatch
from .fileutil import atomic_write_bytes, atomic_write_text

NTAR_MAGIC = b"NTAR"
FEAT_MAGIC = b"FEAT"
VERSION = 1


def pack_archive(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [NTAR_MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, value in tensors.items():
        arr = np.ascontiguousarray(value, dtype="<f4")
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise ValueError(f"tensor name too long: {name[:40]}...")
        if arr.ndim > 255:
            raise ShapeMismatch(f"{name}: rank {arr.ndim} too large")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def unpack_archive(data: bytes, source: str = "<bytes>") -> dict[str, np.ndarray]:
    if data[:4] != NTAR_MAGIC:
        raise UnsupportedFormat(f"{source}: not a named-tensor archive (bad magic)")
    try:
        version, count = struct.unpack_from("<II", data, 4)
        if version != VERSION:
            raise VersionMismatch(f"{source}: archive version {version}, expected {VERSION}")
        pos = 12
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<B", data, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            n = int(np.prod(dims, dtype=np.int64)) if rank else 1
            if pos + 4 * n > len(data):
                raise UnsupportedFormat(f"{source}: truncated data for tensor {name!r}")
            arr = np.frombuffer(data, dtype="<f4", count=n, offset=pos).reshape(dims)
            pos += 4 * n
            out[name] = arr.astype(np.float32)
    except struct.error as exc:
        raise UnsupportedFormat(f"{source}: truncated archive") from exc
    if pos != len(data):
        raise UnsupportedFormat(f"{source}: {len(data) - pos} trailing bytes")
    return out


def save_archive(path, tensors: dict[str, np.ndarray]) -> None:
    atomic_write_bytes(path, pack_archive(tensors))


def load_archive(path) -> dict[str, np.ndarray]:
    path = os.fspath(path)
    if not os.path.isfile(path):
        raise NotFound(f"{path}: no such file")
    with open(path, "rb") as fh:
        return unpack_archive(fh.read(), source=path)


def require(tensors: dict[str, np.ndarray], name: str, shape=None, source: str = "archive") -> np.ndarray:
    if name not in tensors:
        raise MissingTensor(f"{source}: missing tensor {name!r}")
    arr = tensors[name]
    if shape is not None and tuple(arr.shape) != tuple(shape):
        raise ShapeMismatch(f"{source}: tensor {name!r} has shape {tuple(arr.shape)}, expected {tuple(shape)}")
    return arr


def text_to_tensor(text: str) -> np.ndarray:
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float32)


def tensor_to_text(arr: np.ndarray) -> str:
    return np.asarray(arr).astype(np.uint8).tobytes().decode("utf-8")


def pack_features(matrix: np.ndarray) -> bytes:
    m = np.ascontiguousarray(matrix, dtype="<f4")
    if m.ndim != 2:
        raise ShapeMismatch(f"feature dump needs a matrix, got rank {m.ndim}")
    return FEAT_MAGIC + struct.pack("<III", VERSION, *m.shape) + m.tobytes()


def unpack_features(data: bytes, source: str = "<bytes>") -> np.ndarray:
    if data[:4] != FEAT_MAGIC:
        raise UnsupportedFormat(f"{source}: not a feature dump (bad magic)")
    version, rows, cols = struct.unpack_from("<III", data, 4)
    if version != VERSION:
        raise VersionMismatch(f"{source}: feature dump version {version}, expected {VERSION}")
    if len(data) != 16 + 4 * rows * cols:
        raise UnsupportedFormat(f"{source}: size does not match {rows}x{cols} header")
    return np.frombuffer(data, dtype="<f4", offset=16).reshape(rows, cols).astype(np.float32)


def save_features(path, matrix: np.ndarray) -> None:
    atomic_write_bytes(path, pack_features(matrix))


def load_features(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return unpack_features(fh.read(), source=os.fspath(path))


# -- key=value text configs -------------------------------------------------

def dump_kv(items: dict) -> str:
    lines = []
    for key, value in items.items():
        if isinstance(value, bool):
            value = int(value)
        elif isinstance(value, (tuple, list)):
            value = ",".join(str(v) for v in value)
        lines.append(f"{key}={value}")
    return "\n".join(lines) + "\n"


def parse_kv(text: str) -> dict[str, str]:
    out = {}
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise UnsupportedFormat(f"config line without '=': {raw!r}")
        out[key.strip()] = value.strip()
    return out


def _convert(value: str, hint):
    origin = typing.get_origin(hint)
    if origin is tuple:
        (elem, *_rest) = typing.get_args(hint)
        return tuple(_convert(v, elem) for v in value.split(",") if v != "")
    if hint is bool:
        return value not in ("0", "false", "False", "")
    if hint is int:
        return int(value)
    if hint is float:
        return float(value)
    return value


def config_to_kv(cfg, prefix: str = "") -> dict:
    return {prefix + f.name: getattr(cfg, f.name) for f in dataclasses.fields(cfg)}


def config_from_kv(cls, items: dict[str, str], prefix: str = "", source: str = "config"):
    hints = typing.get_type_hints(cls)
    kwargs = {}
    for f in dataclasses.fields(cls):
        key = prefix + f.name
        if key in items:
            try:
                kwargs[f.name] = _convert(items[key], hints[f.name])
            except ValueError as exc:
                raise ConfigMismatch(f"{source}: bad value for {key}: {items[key]!r}") from exc
    return cls(**kwargs)


def save_kv(path, items: dict) -> None:
    atomic_write_text(path, dump_kv(items))


def load_kv(path) -> dict[str, str]:
    path = os.fspath(path)
    if not os.path.isfile(path):
        raise NotFound(f"{path}: no such file")
    with open(path, encoding="utf-8") as fh:
        return parse_kv(fh.read())
