"""Versioned binary checkpoints and cross-configuration weight transfer.

Byte layout (all integers little-endian)::

    magic      8 bytes  b"DVOXCKPT"
    version    u32      FORMAT_VERSION
    meta_len   u32      length of the JSON metadata block
    meta       utf-8 JSON: {"model_config": ..., "metadata": ...}
    count      u32      number of tensor records
    record*    name_len u16, name (ascii [a-z0-9._]), dtype u8 (1=f32, 2=f64),
               flags u8 (bit0 trainable, bit1 optimizer state), ndim u8,
               dims u32*ndim, raw payload
    crc32      u32      CRC-32 of every preceding byte

Files are written to a temporary sibling and renamed into place.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, TransferError
from .model import Model, ModelConfig, build_model

MAGIC = b"DVOXCKPT"
FORMAT_VERSION = 1
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}
_TRAINABLE = 1
_OPTIM = 2


@dataclass
class Checkpoint:
    model_config: ModelConfig
    tensors: dict[str, np.ndarray]
    trainable: dict[str, bool]
    optimizer_state: dict[str, np.ndarray] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)


def _encode_tensor(name: str, arr: np.ndarray, flags: int) -> bytes:
    code = _CODES.get(arr.dtype)
    if code is None:
        raise FormatError(f"unsupported dtype {arr.dtype} for {name}")
    raw = name.encode("ascii")
    head = struct.pack("<H", len(raw)) + raw + struct.pack("<BBB", code, flags, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()


def save_checkpoint(model: Model, path, optimizer_state: dict | None = None, metadata: dict | None = None):
    meta = json.dumps({"model_config": model.config.to_dict(), "metadata": metadata or {}}, sort_keys=True).encode()
    tensors = model.named_tensors()
    optimizer_state = optimizer_state or {}
    body = bytearray(MAGIC + struct.pack("<II", FORMAT_VERSION, len(meta)) + meta)
    body += struct.pack("<I", len(tensors) + len(optimizer_state))
    for name, p in tensors.items():
        body += _encode_tensor(name, p.data, _TRAINABLE if p.trainable else 0)
    for name, arr in optimizer_state.items():
        body += _encode_tensor(name, np.asarray(arr), _OPTIM)
    body += struct.pack("<I", zlib.crc32(body))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(body)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.buf):
            raise FormatError("truncated checkpoint")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_checkpoint(path) -> Checkpoint:
    buf = Path(path).read_bytes()
    if len(buf) < len(MAGIC) + 12 or buf[:len(MAGIC)] != MAGIC:
        raise FormatError(f"{path}: bad magic, not a checkpoint")
    (crc,) = struct.unpack("<I", buf[-4:])
    if zlib.crc32(buf[:-4]) != crc:
        raise FormatError(f"{path}: checksum mismatch")
    r = _Reader(buf[:-4])
    r.take(len(MAGIC))
    version, meta_len = r.unpack("<II")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    try:
        meta = json.loads(r.take(meta_len).decode("utf-8"))
        cfg = ModelConfig(**meta["model_config"])
    except (ValueError, KeyError, TypeError) as e:
        raise FormatError(f"{path}: bad metadata block: {e}") from None
    (count,) = r.unpack("<I")
    tensors, trainable, optim = {}, {}, {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("ascii", errors="replace")
        code, flags, ndim = r.unpack("<BBB")
        if code not in _DTYPES:
            raise FormatError(f"{path}: unknown dtype code {code} for {name}")
        dims = r.unpack(f"<{ndim}I")
        dt = _DTYPES[code]
        count_el = int(np.prod(dims, dtype=np.int64))
        arr = np.frombuffer(r.take(count_el * dt.itemsize), dtype=dt).reshape(dims).astype(dt.newbyteorder("="))
        if flags & _OPTIM:
            optim[name] = arr
        else:
            tensors[name] = arr
            trainable[name] = bool(flags & _TRAINABLE)
    if r.pos != len(r.buf):
        raise FormatError(f"{path}: trailing bytes after tensor records")
    return Checkpoint(cfg, tensors, trainable, optim, meta.get("metadata", {}))


def _is_offset(name: str) -> bool:
    return ".offset." in name


def load_checkpoint(path, cfg: ModelConfig | None = None, dtype=None) -> Model:
    """Load a model. With ``cfg`` the stored weights are transferred into that
    configuration: shared names are copied, offset predictors absent from the
    file stay at their zero initialization, extra source tensors are ignored.
    """
    ckpt = read_checkpoint(path)
    return model_from_checkpoint(ckpt, cfg, dtype)


def model_from_checkpoint(ckpt: Checkpoint, cfg: ModelConfig | None = None, dtype=None) -> Model:
    if dtype is None:
        dtype = next(iter(ckpt.tensors.values())).dtype if ckpt.tensors else np.float32
    model = build_model(cfg or ckpt.model_config, dtype=dtype)
    transfer_weights(ckpt.tensors, model)
    return model


def transfer_weights(source: dict[str, np.ndarray], model: Model) -> list[str]:
    """Copy matching tensors into ``model``; returns the names that were copied."""
    targets = model.named_tensors()
    conflicts = [n for n, p in targets.items() if n in source and source[n].shape != p.data.shape]
    if conflicts:
        raise TransferError("shape conflict on " + ", ".join(
            f"{n} ({source[n].shape} vs {targets[n].data.shape})" for n in conflicts))
    missing = [n for n in targets if n not in source and not _is_offset(n)]
    if missing:
        raise TransferError("checkpoint lacks " + ", ".join(missing))
    copied = []
    for name, p in targets.items():
        if name in source:
            p.data = source[name].astype(model.dtype, copy=True)
            copied.append(name)
        else:
            p.data = np.zeros_like(p.data)
    model.zero_grad()
    return copied
