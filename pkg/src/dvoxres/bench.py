"""Timing and memory of regular versus deformable convolution."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from .errors import CapacityError, ConfigError
from .ops.conv import ConvSpec, conv3d_backward, conv3d_forward
from .ops.deform import DeformableConvSpec, deformable_conv3d_backward, deformable_conv3d_forward

DEFAULT_MAX_BYTES = 2 * 1024**3


@dataclass
class BenchRow:
    extent: int
    channels: int
    kernel: int
    offset_channels: int
    regular_s: float
    deformable_s: float
    regular_bytes: int
    offset_map_bytes: int


def parse_size(text: str) -> tuple[int, int, int]:
    """``"extent:channels:kernel"``, e.g. ``"16:8:3"``."""
    try:
        e, c, k = (int(v) for v in text.split(":"))
    except ValueError:
        raise ConfigError(f"bad size {text!r}; expected extent:channels:kernel") from None
    if min(e, c, k) < 1 or k % 2 == 0:
        raise ConfigError(f"bad size {text!r}; values must be positive and kernel odd")
    return e, c, k


def estimate_bytes(extent: int, channels: int, k: int, itemsize: int = 4, batch: int = 1) -> int:
    """Rough peak working set of one deformable forward+backward."""
    taps = k**3
    points = extent**3
    cols = batch * channels * taps * points * itemsize
    offsets = batch * 3 * taps * points * itemsize
    # four sparse sampling matrices, 8 entries per sample point (int64 index + value)
    sampler = 4 * 8 * batch * taps * points * (8 + itemsize)
    return 4 * cols + 3 * offsets + sampler


def bench_one(extent: int, channels: int, k: int, repeats: int = 2, dtype=np.float32,
              max_bytes: int = DEFAULT_MAX_BYTES, seed: int = 0) -> BenchRow:
    need = estimate_bytes(extent, channels, k, np.dtype(dtype).itemsize)
    if need > max_bytes:
        raise CapacityError(f"size {extent}:{channels}:{k} needs ~{need / 1024**2:.0f} MiB, limit {max_bytes / 1024**2:.0f} MiB")
    rng = np.random.default_rng(seed)
    spec = ConvSpec(channels, channels, k, 1, k // 2)
    dspec = DeformableConvSpec(spec)
    x = rng.normal(size=(1, channels, extent, extent, extent)).astype(dtype)
    w = (rng.normal(size=spec.weight_shape) / math.sqrt(channels * k**3)).astype(dtype)
    b = np.zeros(channels, dtype)
    ow = (0.01 * rng.normal(size=dspec.offset_predictor.weight_shape)).astype(dtype)
    ob = np.zeros(dspec.offset_channels, dtype)

    def regular():
        y, cols = conv3d_forward(x, w, b, spec, return_cols=True)
        conv3d_backward(np.ones_like(y), x, w, spec, cols=cols)
        return cols

    def deformable():
        y, offsets, cache = deformable_conv3d_forward(x, w, b, ow, ob, dspec, return_cache=True)
        deformable_conv3d_backward(np.ones_like(y), cache, dspec)
        return offsets

    def timed(fn):
        best, out = math.inf, None
        for _ in range(repeats):
            t0 = time.perf_counter()
            out = fn()
            best = min(best, time.perf_counter() - t0)
        return best, out

    t_reg, cols = timed(regular)
    t_def, offsets = timed(deformable)
    points = extent**3
    expected = 3 * k**3 * points * np.dtype(dtype).itemsize
    if offsets.shape[1] != dspec.offset_channels or offsets.nbytes != expected:
        raise AssertionError(f"offset map holds {offsets.nbytes} bytes, expected 3*k^3*P*itemsize = {expected}")
    return BenchRow(extent, channels, k, dspec.offset_channels, t_reg, t_def, cols.nbytes, offsets.nbytes)


def run_bench(sizes, **kw) -> list[BenchRow]:
    if not sizes:
        raise ConfigError("bench needs at least one size")
    parsed = [parse_size(s) if isinstance(s, str) else tuple(s) for s in sizes]
    dtype = np.dtype(kw.get("dtype", np.float32))
    limit = kw.get("max_bytes", DEFAULT_MAX_BYTES)
    # refuse the whole list before allocating anything
    for e, c, k in parsed:
        need = estimate_bytes(e, c, k, dtype.itemsize)
        if need > limit:
            raise CapacityError(f"size {e}:{c}:{k} needs ~{need / 1024**2:.0f} MiB, limit {limit / 1024**2:.0f} MiB")
    return [bench_one(*p, **kw) for p in parsed]
