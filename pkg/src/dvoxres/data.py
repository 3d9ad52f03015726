"""Synthetic labelled volumes, scaling augmentation and a small volume file format.

Class 0 is a soft-edged ellipsoid. Class 1 stretches the ellipsoid's semi-axes
anisotropically by ``class_effect`` and adds a localized intensity bump, so
the discriminating signal is a geometric deformation.

Volume file layout (little-endian)::

    magic    12 bytes  b"DVOXVOLUME\\r\\n"
    version  u32
    dims     5 x u32   (N, C, D, H, W)
    label    u8
    id_len   u16, id (utf-8)
    crc32    u32       CRC-32 of all preceding header bytes
    payload  float32 x prod(dims)
"""
from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError
from .ops.sampling import sample
from .tensor import Rng

VOLUME_MAGIC = b"DVOXVOLUME\r\n"
VOLUME_VERSION = 1
_HEADER = struct.Struct("<12sI5IBH")


@dataclass
class VolumeSample:
    volume: np.ndarray  # (1, 1, D, H, W)
    label: int
    subject_id: str


@dataclass
class SynthSpec:
    n_per_class: int = 100
    extent: tuple = (16, 16, 16)
    base_shape: tuple = (4.0, 4.0, 4.0)
    class_effect: float = 1.3
    # class-1 semi-axis along each axis is multiplied by class_effect ** exponent
    effect_exponents: tuple = (1.0, 0.5, 0.0)
    bump_amplitude: float = 0.2
    bump_sigma: float = 1.5
    noise_std: float = 0.05
    jitter: float = 2.0
    scale_jitter: float = 0.05
    foreground: float = 0.7
    edge_softness: float = 0.1
    seed: int = 0

    def __post_init__(self):
        self.extent = tuple(int(e) for e in self.extent)
        self.base_shape = tuple(float(a) for a in self.base_shape)
        self.effect_exponents = tuple(float(e) for e in self.effect_exponents)
        self.validate()

    def semi_axes(self, label: int) -> np.ndarray:
        axes = np.array(self.base_shape)
        if label == 1:
            axes = axes * self.class_effect ** np.array(self.effect_exponents)
        return axes

    def validate(self):
        if self.class_effect <= 0:
            raise ConfigError("class_effect must be > 0")
        if self.noise_std < 0 or self.jitter < 0 or not 0 <= self.scale_jitter < 1:
            raise ConfigError("noise_std and jitter must be >= 0, scale_jitter in [0, 1)")
        if len(self.extent) != 3 or len(self.base_shape) != 3 or len(self.effect_exponents) != 3:
            raise ConfigError("extent, base_shape and effect_exponents need 3 entries")
        if self.n_per_class < 0:
            raise ConfigError("n_per_class must be >= 0")
        half = (np.array(self.extent) - 1) / 2
        for label in (0, 1):
            reach = self.semi_axes(label) * (1 + self.scale_jitter) + self.jitter
            if (reach > half).any():
                raise ConfigError(f"class {label} shape reaches {reach.round(2).tolist()} voxels from the center, "
                                  f"volume allows {half.tolist()}")


@dataclass
class AugmentSpec:
    scale_range: tuple = ((0.9, 1.1), (0.9, 1.1), (0.9, 1.1))
    enabled: bool = True

    def __post_init__(self):
        rng_ = tuple(self.scale_range)
        if len(rng_) == 2 and not isinstance(rng_[0], (tuple, list)):
            rng_ = (rng_,) * 3
        self.scale_range = tuple((float(lo), float(hi)) for lo, hi in rng_)
        if len(self.scale_range) != 3:
            raise ConfigError("scale_range needs one interval or one per axis")
        for lo, hi in self.scale_range:
            if not 0 < lo <= hi:
                raise ConfigError(f"invalid scale interval [{lo}, {hi}]")


def _grid(extent):
    return np.meshgrid(*(np.arange(e, dtype=np.float64) for e in extent), indexing="ij")


def render_sample(spec: SynthSpec, label: int, rng: Rng) -> np.ndarray:
    center = (np.array(spec.extent) - 1) / 2 + rng.uniform(-spec.jitter, spec.jitter, 3)
    axes = spec.semi_axes(label) * rng.uniform(1 - spec.scale_jitter, 1 + spec.scale_jitter)
    coords = _grid(spec.extent)
    r = np.sqrt(sum(((g - c) / a) ** 2 for g, c, a in zip(coords, center, axes)))
    vol = spec.foreground / (1 + np.exp(-(1 - r) / spec.edge_softness))
    if label == 1 and spec.bump_amplitude:
        bump_at = center + np.array([0.0, 0.5 * axes[1], 0.0])
        d2 = sum((g - b) ** 2 for g, b in zip(coords, bump_at))
        vol = vol + spec.bump_amplitude * np.exp(-d2 / (2 * spec.bump_sigma ** 2))
    noise = rng.normal(vol.shape, std=spec.noise_std) if spec.noise_std else 0.0
    return np.clip(vol + noise, 0.0, 1.0).astype(np.float32).reshape(1, 1, *spec.extent)


def generate_dataset(spec: SynthSpec) -> list[VolumeSample]:
    """Deterministic for a given seed; sample ``i`` uses its own RNG stream."""
    spec.validate()
    root = Rng(spec.seed)
    samples = []
    for i in range(2 * spec.n_per_class):
        label = i % 2
        samples.append(VolumeSample(render_sample(spec, label, root.split(i)), label, f"sub-{i:04d}"))
    return samples


def augment_scale(v: VolumeSample, spec: AugmentSpec, rng: Rng) -> VolumeSample:
    """Rescale each axis about the volume center by a random factor.

    The output voxel ``p`` reads the input at ``c + s * (p - c)`` with
    ``c = extent / 2``, so factors above 1 shrink the content toward the center.
    Reads outside the volume are zero.
    """
    if not spec.enabled:
        return v
    factors = np.array([rng.uniform(lo, hi) for lo, hi in spec.scale_range])
    return VolumeSample(rescale(v.volume, factors), v.label, v.subject_id)


def rescale(volume: np.ndarray, factors) -> np.ndarray:
    extent = volume.shape[2:]
    if min(extent, default=0) == 0:
        return volume.copy()
    center = np.array(extent, dtype=volume.dtype) / 2
    q = [(c + volume.dtype.type(f) * (g - c)).ravel()[None].astype(volume.dtype)
         for g, c, f in zip(_grid(extent), center, factors)]
    out = sample(volume.reshape(1, -1, *extent), *q)
    return out.reshape(volume.shape).astype(volume.dtype)


def stack(samples: list[VolumeSample]) -> tuple[np.ndarray, np.ndarray]:
    x = np.concatenate([s.volume for s in samples], axis=0)
    y = np.array([s.label for s in samples], dtype=np.int64)
    return x, y


def write_volume(path, v: VolumeSample):
    vol = np.asarray(v.volume, dtype="<f4")
    if vol.ndim != 5:
        raise FormatError(f"volume must be 5-D, got shape {vol.shape}")
    ident = v.subject_id.encode("utf-8")
    head = _HEADER.pack(VOLUME_MAGIC, VOLUME_VERSION, *vol.shape, int(v.label), len(ident)) + ident
    head += struct.pack("<I", zlib.crc32(head))
    Path(path).write_bytes(head + vol.tobytes())


def read_volume(path) -> VolumeSample:
    buf = Path(path).read_bytes()
    if len(buf) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, *rest = _HEADER.unpack_from(buf)
    dims, label, id_len = rest[:5], rest[5], rest[6]
    if magic != VOLUME_MAGIC:
        raise FormatError(f"{path}: bad magic")
    end = _HEADER.size + id_len
    if len(buf) < end + 4:
        raise FormatError(f"{path}: truncated header")
    (crc,) = struct.unpack_from("<I", buf, end)
    if zlib.crc32(buf[:end]) != crc:
        raise FormatError(f"{path}: header checksum mismatch")
    if version != VOLUME_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if label not in (0, 1):
        raise FormatError(f"{path}: label {label} not in {{0, 1}}")
    payload = buf[end + 4:]
    expected = math.prod(dims) * 4
    if len(payload) != expected:
        raise FormatError(f"{path}: payload size {len(payload)} bytes, header dims {tuple(dims)} need {expected}")
    try:
        ident = buf[_HEADER.size:end].decode("utf-8")
    except UnicodeDecodeError:
        raise FormatError(f"{path}: subject id is not utf-8") from None
    vol = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
    return VolumeSample(vol, int(label), ident)


MANIFEST_NAME = "manifest.tsv"


def write_dataset(directory, samples: list[VolumeSample]) -> Path:
    """Write one volume file per sample plus a ``path<TAB>label<TAB>id`` manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for s in samples:
        name = f"{s.subject_id}.vol"
        write_volume(directory / name, s)
        lines.append(f"{name}\t{s.label}\t{s.subject_id}")
    manifest = directory / MANIFEST_NAME
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def read_manifest(path) -> list[VolumeSample]:
    path = Path(path)
    samples = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise FormatError(f"{path}:{lineno}: expected 'path<TAB>label<TAB>id'")
        v = read_volume(path.parent / parts[0])
        if str(v.label) != parts[1] or v.subject_id != parts[2]:
            raise FormatError(f"{path}:{lineno}: manifest disagrees with {parts[0]}")
        samples.append(v)
    return samples
