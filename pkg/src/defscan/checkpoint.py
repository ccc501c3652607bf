"""Binary checkpoint format.

Layout (all integers little-endian u32):
  magic "DEFM" | version | config_len | config utf-8 | tensor_count |
  per tensor: name_len | name utf-8 | rank | extents... | float64 LE values

Files are written atomically (temp file then rename).  Loading validates the
magic, version and every extent product; violations report the byte offset.
"""

from __future__ import annotations

import os
import struct
import tempfile

import numpy as np

from .errors import FormatError, InputError
from .tensor import Module

MAGIC = b"DEFM"
VERSION = 1


def _pack_u32(v: int) -> bytes:
    return struct.pack("<I", v)


def save_checkpoint(path: str, config_text: str,
                    tensors: list[tuple[str, np.ndarray]]) -> None:
    chunks = [MAGIC, _pack_u32(VERSION)]
    cfg = config_text.encode("utf-8")
    chunks.append(_pack_u32(len(cfg)))
    chunks.append(cfg)
    chunks.append(_pack_u32(len(tensors)))
    for name, arr in tensors:
        nb = name.encode("utf-8")
        chunks.append(_pack_u32(len(nb)))
        chunks.append(nb)
        chunks.append(_pack_u32(arr.ndim))
        for ext in arr.shape:
            chunks.append(_pack_u32(ext))
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    blob = b"".join(chunks)

    dirname = os.path.dirname(os.path.abspath(path))
    os.makedirs(dirname, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=dirname, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.off = 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.blob):
            raise FormatError(
                f"truncated checkpoint: needed {n} bytes at byte offset {self.off}, "
                f"file has {len(self.blob)}"
            )
        out = self.blob[self.off:self.off + n]
        self.off += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(path: str) -> tuple[str, list[tuple[str, np.ndarray]]]:
    with open(path, "rb") as fh:
        blob = fh.read()
    r = _Reader(blob)
    magic = r.take(4)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r} at byte offset 0")
    version = r.u32()
    if version != VERSION:
        raise FormatError(f"unsupported version {version} at byte offset 4")
    cfg_len = r.u32()
    config_text = r.take(cfg_len).decode("utf-8")
    count = r.u32()
    tensors = []
    for _ in range(count):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        shape = tuple(r.u32() for _ in range(rank))
        n_values = 1
        for ext in shape:
            n_values *= ext
        data_off = r.off
        raw = r.take(8 * n_values)
        arr = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
        if arr.size != n_values:
            raise FormatError(f"extent product mismatch at byte offset {data_off}")
        tensors.append((name, arr))
    if r.off != len(blob):
        raise FormatError(f"trailing bytes at byte offset {r.off}")
    return config_text, tensors


def model_tensors(model: Module) -> list[tuple[str, np.ndarray]]:
    return [(name, p.data) for name, p in model.named_parameters()]


def save_model(path: str, config_text: str, model: Module) -> None:
    save_checkpoint(path, config_text, model_tensors(model))


def load_into_model(model: Module, tensors: list[tuple[str, np.ndarray]]) -> None:
    """Assign saved tensors to the model's parameters by name."""
    table = dict(tensors)
    seen = set()
    for name, p in model.named_parameters():
        if name not in table:
            raise InputError(f"checkpoint is missing tensor {name!r}")
        arr = table[name]
        if arr.shape != p.data.shape:
            raise InputError(
                f"tensor {name!r} shape {arr.shape} != model shape {p.data.shape}"
            )
        p.data = arr.copy()
        seen.add(name)
    extra = set(table) - seen
    if extra:
        raise InputError(f"checkpoint has unknown tensors: {sorted(extra)[:3]}")
