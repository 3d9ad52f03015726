"""Regular 3D convolution via im2col, with analytic backward."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from ..errors import ShapeError


def _triple(v) -> tuple[int, int, int]:
    if isinstance(v, int):
        return (v, v, v)
    t = tuple(int(a) for a in v)
    if len(t) != 3:
        raise ShapeError(f"expected 3 values, got {v!r}")
    return t


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: tuple = (3, 3, 3)
    stride: tuple = (1, 1, 1)
    padding: tuple = (0, 0, 0)
    dilation: tuple = (1, 1, 1)

    def __post_init__(self):
        for name in ("kernel", "stride", "padding", "dilation"):
            object.__setattr__(self, name, _triple(getattr(self, name)))
        if self.in_channels < 1 or self.out_channels < 1:
            raise ShapeError("channel counts must be positive")
        if min(self.kernel) < 1 or min(self.stride) < 1 or min(self.dilation) < 1:
            raise ShapeError("kernel, stride and dilation must be >= 1")
        if min(self.padding) < 0:
            raise ShapeError("padding must be >= 0")

    @property
    def taps(self) -> int:
        return math.prod(self.kernel)

    @property
    def weight_shape(self) -> tuple[int, ...]:
        return (self.out_channels, self.in_channels, *self.kernel)

    def output_shape(self, spatial) -> tuple[int, int, int]:
        out = tuple(
            (n + 2 * p - d * (k - 1) - 1) // s + 1
            for n, p, d, k, s in zip(spatial, self.padding, self.dilation, self.kernel, self.stride)
        )
        if min(out) < 1:
            raise ShapeError(f"input extent {tuple(spatial)} too small for {self}: output {out}")
        return out

    def tap_offsets(self) -> np.ndarray:
        """(taps, 3) integer tap displacements, row-major kernel order."""
        grid = itertools.product(*(range(k) for k in self.kernel))
        return np.array([[i * d for i, d in zip(t, self.dilation)] for t in grid], dtype=np.int64).reshape(-1, 3)

    def base_coords(self, out_spatial) -> np.ndarray:
        """(taps, 3, P) sampling coordinates ``p0*stride - pad + p_n`` in input voxels."""
        grids = np.meshgrid(*(np.arange(o) for o in out_spatial), indexing="ij")
        p0 = np.stack([g.ravel() for g in grids])  # (3, P)
        origin = p0 * np.array(self.stride)[:, None] - np.array(self.padding)[:, None]
        return origin[None, :, :] + self.tap_offsets()[:, :, None]


def _check_input(x: np.ndarray, spec: ConvSpec):
    if x.ndim != 5:
        raise ShapeError(f"expected (N, C, D, H, W) input, got shape {x.shape}")
    if x.shape[1] != spec.in_channels:
        raise ShapeError(f"input has {x.shape[1]} channels, spec expects {spec.in_channels}")


def im2col(x: np.ndarray, spec: ConvSpec) -> np.ndarray:
    """Unfold x into columns of shape (N, C*taps, P), channel-major."""
    _check_input(x, spec)
    n, c = x.shape[:2]
    out_sp = spec.output_shape(x.shape[2:])
    pd, ph, pw = spec.padding
    xp = np.pad(x, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw)))
    sd, sh, sw = spec.stride
    od, oh, ow = out_sp
    cols = np.empty((n, c, spec.taps, od, oh, ow), dtype=x.dtype)
    for k, (a, b, e) in enumerate(spec.tap_offsets()):
        cols[:, :, k] = xp[:, :, a:a + sd * (od - 1) + 1:sd, b:b + sh * (oh - 1) + 1:sh, e:e + sw * (ow - 1) + 1:sw]
    return cols.reshape(n, c * spec.taps, od * oh * ow)


def col2im(cols: np.ndarray, x_shape, spec: ConvSpec) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add columns back onto the input grid."""
    n, c, d, h, w = x_shape
    od, oh, ow = spec.output_shape((d, h, w))
    pd, ph, pw = spec.padding
    sd, sh, sw = spec.stride
    cols = cols.reshape(n, c, spec.taps, od, oh, ow)
    gp = np.zeros((n, c, d + 2 * pd, h + 2 * ph, w + 2 * pw), dtype=cols.dtype)
    for k, (a, b, e) in enumerate(spec.tap_offsets()):
        gp[:, :, a:a + sd * (od - 1) + 1:sd, b:b + sh * (oh - 1) + 1:sh, e:e + sw * (ow - 1) + 1:sw] += cols[:, :, k]
    return gp[:, :, pd:pd + d, ph:ph + h, pw:pw + w]


def apply_columns(cols: np.ndarray, weight: np.ndarray, bias: np.ndarray, out_sp) -> np.ndarray:
    """Contract columns with the kernel. Shared by the regular and deformable paths."""
    o = weight.shape[0]
    y = np.matmul(weight.reshape(o, -1), cols)
    y += bias.reshape(1, o, 1)
    return y.reshape(cols.shape[0], o, *out_sp)


def _check_weight(weight, bias, spec: ConvSpec):
    if weight.shape != spec.weight_shape:
        raise ShapeError(f"weight shape {weight.shape} does not match {spec.weight_shape}")
    if bias.shape != (spec.out_channels,):
        raise ShapeError(f"bias shape {bias.shape} does not match ({spec.out_channels},)")


def conv3d_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray, spec: ConvSpec,
                   return_cols: bool = False):
    _check_weight(weight, bias, spec)
    cols = im2col(x, spec)
    y = apply_columns(cols, weight, bias, spec.output_shape(x.shape[2:]))
    return (y, cols) if return_cols else y


def columns_backward(grad_out: np.ndarray, cols: np.ndarray, weight: np.ndarray):
    """Gradients of :func:`apply_columns` w.r.t. (cols, weight, bias)."""
    n, o = grad_out.shape[:2]
    g = grad_out.reshape(n, o, -1)
    grad_bias = g.sum(axis=(0, 2))
    grad_weight = np.matmul(g, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
    grad_cols = np.matmul(weight.reshape(o, -1).T, g)
    return grad_cols, grad_weight, grad_bias


def conv3d_backward(grad_out: np.ndarray, x: np.ndarray, weight: np.ndarray, spec: ConvSpec,
                    cols: np.ndarray | None = None):
    """Returns (grad_x, grad_weight, grad_bias)."""
    expected = (x.shape[0], spec.out_channels, *spec.output_shape(x.shape[2:]))
    if grad_out.shape != expected:
        raise ShapeError(f"grad_out shape {grad_out.shape} != forward output shape {expected}")
    if cols is None:
        cols = im2col(x, spec)
    grad_cols, grad_weight, grad_bias = columns_backward(grad_out, cols, weight)
    return col2im(grad_cols, x.shape, spec), grad_weight, grad_bias
