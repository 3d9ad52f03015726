"""Dense arrays, seeded random streams and parameter bookkeeping."""
from __future__ import annotations

import math
import re
import zlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, ShapeError

PRECISIONS = {"f64": np.float64, "f32": np.float32}

_NAME_RE = re.compile(r"^[a-z0-9._]+$")
_MAX_ELEMENTS = 2**48


def dtype_for(precision: str) -> np.dtype:
    try:
        return np.dtype(PRECISIONS[precision])
    except KeyError:
        raise ConfigError(f"unknown precision {precision!r}; expected f32 or f64") from None


@dataclass
class Tensor5:
    """Row-major array of rank at most 5 with an optional gradient buffer.

    Activations use the (N, C, D, H, W) layout, W varying fastest.
    """

    data: np.ndarray
    grad: np.ndarray | None = None

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data)
        if self.data.ndim > 5:
            raise ShapeError(f"rank {self.data.ndim} exceeds 5")
        if self.grad is not None and self.grad.shape != self.data.shape:
            raise ShapeError(f"grad shape {self.grad.shape} != data shape {self.data.shape}")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __len__(self):
        return self.data.size


def flatten_index(shape: Sequence[int], index: Sequence[int]) -> int:
    flat = 0
    for extent, i in zip(shape, index):
        if not 0 <= i < extent:
            raise IndexError(f"index {tuple(index)} out of bounds for {tuple(shape)}")
        flat = flat * extent + i
    return flat


def unflatten_index(shape: Sequence[int], flat: int) -> tuple[int, ...]:
    out = []
    for extent in reversed(shape):
        flat, r = divmod(flat, extent)
        out.append(r)
    return tuple(reversed(out))


def _check_shape(shape) -> tuple[int, ...]:
    shape = tuple(int(s) for s in shape)
    if len(shape) != 5:
        raise ShapeError(f"expected a 5-tuple shape, got {shape}")
    if any(s < 0 for s in shape):
        raise ShapeError(f"negative extent in {shape}")
    if math.prod(shape) > _MAX_ELEMENTS:
        raise MemoryError(f"shape {shape} exceeds addressable size")
    return shape


def zeros(shape, dtype=np.float64) -> Tensor5:
    return Tensor5(np.zeros(_check_shape(shape), dtype=dtype))


def full(shape, value: float, dtype=np.float64) -> Tensor5:
    return Tensor5(np.full(_check_shape(shape), value, dtype=dtype))


class Rng:
    """Counter-based (Philox) generator with deterministic child streams.

    ``split(key)`` derives an independent stream from the parent seed and a
    key (int or str), so the derived stream never depends on how many draws
    the parent has made.
    """

    def __init__(self, seed: int | Sequence[int] = 0):
        self.seed = tuple(seed) if isinstance(seed, (tuple, list)) else (int(seed),)
        ss = np.random.SeedSequence([s & 0xFFFFFFFFFFFFFFFF for s in self.seed])
        self.gen = np.random.Generator(np.random.Philox(ss))

    def split(self, *keys: int | str) -> "Rng":
        return Rng(self.seed + tuple(_key_int(k) for k in keys))

    def normal(self, size=None, mean=0.0, std=1.0):
        return self.gen.normal(mean, std, size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self.gen.permutation(n)


def _key_int(key: int | str) -> int:
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    return int(key)


def randn(shape, rng: Rng, mean: float = 0.0, std: float = 1.0, dtype=np.float64) -> Tensor5:
    if std < 0:
        raise ValueError(f"std must be non-negative, got {std}")
    shape = _check_shape(shape)
    draws = rng.normal(shape) if shape else rng.normal()
    return Tensor5((mean + std * draws).astype(dtype))


def _binary(op: Callable, a: Tensor5, b) -> Tensor5:
    if isinstance(b, Tensor5):
        if a.shape != b.shape:
            raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
        return Tensor5(op(a.data, b.data))
    if np.ndim(b) != 0:
        raise ShapeError(f"only scalar broadcasting is supported, got operand of shape {np.shape(b)}")
    return Tensor5(op(a.data, a.data.dtype.type(b)))


def add(a: Tensor5, b) -> Tensor5:
    return _binary(np.add, a, b)


def sub(a: Tensor5, b) -> Tensor5:
    return _binary(np.subtract, a, b)


def mul(a: Tensor5, b) -> Tensor5:
    return _binary(np.multiply, a, b)


@dataclass
class Parameter:
    """A named model tensor. ``trainable=False`` marks running statistics."""

    name: str
    value: Tensor5
    trainable: bool = True
    decay: bool = False
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not _NAME_RE.match(self.name):
            raise ConfigError(f"invalid parameter name {self.name!r}")
        if not isinstance(self.value, Tensor5):
            self.value = Tensor5(self.value)

    @property
    def data(self) -> np.ndarray:
        return self.value.data

    @data.setter
    def data(self, arr):
        self.value.data = arr

    @property
    def grad(self):
        return self.value.grad

    @grad.setter
    def grad(self, g):
        self.value.grad = g

    def zero_grad(self):
        self.value.zero_grad()

    def __repr__(self):
        return f"Parameter({self.name}, shape={self.data.shape}, trainable={self.trainable})"
