"""3D deformable convolution.

An auxiliary convolution (same kernel, stride, padding and dilation as the
main one) predicts ``3 * taps`` offset channels, grouped per tap as
(dd, dh, dw) with taps in row-major kernel order. Tap ``n`` at output
location ``p0`` reads the input at ``p0*stride - pad + p_n + offset`` by
trilinear interpolation; the offset is shared across all channels.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import NumericError, ShapeError
from .conv import ConvSpec, _check_input, _check_weight, apply_columns, columns_backward, conv3d_backward, conv3d_forward
from .sampling import SamplingOperator


@dataclass(frozen=True)
class DeformableConvSpec:
    base: ConvSpec

    @property
    def offset_predictor(self) -> ConvSpec:
        b = self.base
        return ConvSpec(b.in_channels, 3 * b.taps, b.kernel, b.stride, b.padding, b.dilation)

    @property
    def offset_channels(self) -> int:
        return 3 * self.base.taps


@dataclass
class DeformCache:
    """Saved forward state needed by the backward pass."""

    x: np.ndarray
    weight: np.ndarray
    offset_weight: np.ndarray
    offsets: np.ndarray
    sampler: SamplingOperator
    cols: np.ndarray
    offset_cols: np.ndarray


def sampling_coords(offsets: np.ndarray, spec: ConvSpec, out_sp):
    n = offsets.shape[0]
    base = spec.base_coords(out_sp).astype(offsets.dtype)  # (K, 3, P)
    off = offsets.reshape(n, spec.taps, 3, -1)
    q = base[None] + off
    return tuple(q[:, :, a, :].reshape(n, -1) for a in range(3))


def deformable_conv3d_forward(x, weight, bias, offset_weight, offset_bias, spec: DeformableConvSpec,
                              return_cache: bool = False):
    """Returns (y, offsets), or (y, offsets, cache) with ``return_cache``."""
    base = spec.base
    _check_input(x, base)
    _check_weight(weight, bias, base)
    _check_weight(offset_weight, offset_bias, spec.offset_predictor)
    out_sp = base.output_shape(x.shape[2:])
    offsets, offset_cols = conv3d_forward(x, offset_weight, offset_bias, spec.offset_predictor, return_cols=True)
    if not np.isfinite(offsets).all():
        raise NumericError("non-finite offsets predicted")
    n, c = x.shape[:2]
    sampler = SamplingOperator(*sampling_coords(offsets, base, out_sp), x.shape[2:], with_grad=return_cache)
    # (N, taps*P, C) -> (N, C*taps, P), the im2col layout
    vals = sampler.apply(x).reshape(n, base.taps, -1, c)
    cols = np.ascontiguousarray(vals.transpose(0, 3, 1, 2)).reshape(n, c * base.taps, -1)
    y = apply_columns(cols, weight, bias, out_sp)
    if return_cache:
        return y, offsets, DeformCache(x, weight, offset_weight, offsets, sampler, cols, offset_cols)
    return y, offsets


def deformable_conv3d_backward(grad_out, cache: DeformCache, spec: DeformableConvSpec):
    """Returns (grad_x, grad_weight, grad_bias, grad_offset_weight, grad_offset_bias).

    grad_x collects both the trilinear scatter and the offset predictor path.
    """
    base = spec.base
    x = cache.x
    expected = (x.shape[0], base.out_channels, *base.output_shape(x.shape[2:]))
    if grad_out.shape != expected:
        raise ShapeError(f"grad_out shape {grad_out.shape} != forward output shape {expected}")
    n, c = x.shape[:2]
    grad_cols, grad_weight, grad_bias = columns_backward(grad_out, cache.cols, cache.weight)
    k = base.taps
    g = np.ascontiguousarray(grad_cols.reshape(n, c, k, -1).transpose(0, 2, 3, 1))
    grad_x, (gqd, gqh, gqw) = cache.sampler.adjoint(g, x)
    grad_offsets = np.stack([g.reshape(n, k, -1) for g in (gqd, gqh, gqw)], axis=2)
    grad_offsets = grad_offsets.reshape(cache.offsets.shape)
    gx_off, grad_offset_weight, grad_offset_bias = conv3d_backward(
        grad_offsets, x, cache.offset_weight, spec.offset_predictor, cols=cache.offset_cols)
    grad_x += gx_off
    return grad_x, grad_weight, grad_bias, grad_offset_weight, grad_offset_bias
