"""On-disk formats: the binary weight archive and the key=value run config.

Weight archive layout (all integers little-endian)::

    b"ARCW"  u32 version (=1)  u32 entry_count
    entry*:  u32 name_len  name (utf-8)  u8 dtype (0=float32, 1=float64)
             u8 rank  u32 extent * rank  raw little-endian data (C order)
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from dataclasses import dataclass, fields
from typing import Dict, Mapping

import numpy as np

MAGIC = b"ARCW"
VERSION = 1
DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class ArchiveFormatError(ValueError):
    """Malformed archive; `offset` is the byte position where parsing failed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def encode_archive(entries: Mapping[str, np.ndarray]) -> bytes:
    out = [MAGIC, struct.pack("<II", VERSION, len(entries))]
    for name, value in entries.items():
        arr = np.asarray(value)
        if arr.dtype not in DTYPE_CODES:
            raise TypeError(f"{name}: unsupported dtype {arr.dtype}")
        if arr.ndim > 255:
            raise ValueError(f"{name}: rank {arr.ndim} too large")
        raw_name = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw_name)))
        out.append(raw_name)
        out.append(struct.pack("<BB", DTYPE_CODES[arr.dtype], arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype=CODE_DTYPES[DTYPE_CODES[arr.dtype]]).tobytes())
    return b"".join(out)


def decode_archive(blob: bytes) -> "OrderedDict[str, np.ndarray]":
    pos = 0

    def take(count: int, what: str) -> bytes:
        nonlocal pos
        if pos + count > len(blob):
            raise ArchiveFormatError(f"truncated archive while reading {what}", pos)
        chunk = blob[pos:pos + count]
        pos += count
        return chunk

    if take(4, "magic") != MAGIC:
        raise ArchiveFormatError("bad magic, expected b'ARCW'", 0)
    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise ArchiveFormatError(f"unsupported version {version}", 4)
    entries: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for _ in range(count):
        start = pos
        (name_len,) = struct.unpack("<I", take(4, "name length"))
        try:
            name = take(name_len, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise ArchiveFormatError("entry name is not valid utf-8", start + 4) from None
        if name in entries:
            raise ArchiveFormatError(f"duplicate entry {name!r}", start)
        code_pos = pos
        code, rank = struct.unpack("<BB", take(2, "dtype/rank"))
        if code not in CODE_DTYPES:
            raise ArchiveFormatError(f"unknown dtype code {code} for {name!r}", code_pos)
        shape = struct.unpack(f"<{rank}I", take(4 * rank, "extents"))
        dtype = CODE_DTYPES[code]
        size = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        data = np.frombuffer(take(size, f"data of {name!r}"), dtype=dtype).reshape(shape)
        entries[name] = data.astype(dtype.newbyteorder("="))
    if pos != len(blob):
        raise ArchiveFormatError(f"{len(blob) - pos} trailing bytes", pos)
    return entries


def save_archive(path: str, entries: Mapping[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_archive(entries))


def load_archive(path: str) -> "OrderedDict[str, np.ndarray]":
    with open(path, "rb") as fh:
        return decode_archive(fh.read())


def model_state(model) -> "OrderedDict[str, np.ndarray]":
    return OrderedDict((k, p.data) for k, p in model.named_parameters().items())


def load_model_state(model, entries: Mapping[str, np.ndarray]) -> None:
    params = model.named_parameters()
    missing = set(params) - set(entries)
    if missing:
        raise KeyError(f"archive lacks entries: {sorted(missing)}")
    for name, p in params.items():
        value = entries[name]
        if value.shape != p.data.shape:
            raise ValueError(f"{name}: archive shape {value.shape} != model shape {p.data.shape}")
        p.data[...] = value


# ------------------------------------------------------------ run config


@dataclass
class RunConfig:
    """Every `train` flag, serializable as a flat key=value file."""

    mode: str = "static"
    n: int = 4
    stages: str = "A,B,C"
    epochs: int = 8
    seed: int = 0
    coeff: float = 180.0  # degrees
    adaptive_combination: bool = True
    spatial_encoding: bool = True
    backbone_lr_scale: float = 0.1
    lr: float = 0.05
    momentum: float = 0.9
    optimizer: str = "sgd"
    batch_size: int = 32
    train_count: int = 1600
    test_count: int = 400
    bins: int = 8
    out: str = "metrics.csv"
    archive: str = ""


def _parse_value(kind, text: str):
    if kind is bool:
        lowered = text.strip().lower()
        if lowered in ("true", "1", "yes"):
            return True
        if lowered in ("false", "0", "no"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    return kind(text)


def serialize_run_config(cfg: RunConfig) -> str:
    lines = []
    for f in fields(cfg):
        value = getattr(cfg, f.name)
        if isinstance(value, bool):
            value = "true" if value else "false"
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{f.name}={value}")
    return "\n".join(lines) + "\n"


def parse_run_config(text: str) -> RunConfig:
    kinds: Dict[str, type] = {f.name: type(f.default) for f in fields(RunConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in kinds:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ValueError(f"line {lineno}: duplicate key {key!r}")
        try:
            values[key] = _parse_value(kinds[key], value)
        except ValueError as exc:
            raise ValueError(f"line {lineno}: {key}: {exc}") from None
    return RunConfig(**values)
