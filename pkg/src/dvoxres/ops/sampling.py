"""Trilinear sampling of volumes at fractional voxel coordinates.

Corners outside the volume read as zero, matching zero padding. The
derivative with respect to the coordinates is taken on the cell
``[floor(q), floor(q) + 1)``, i.e. right-continuous at lattice points.
"""
from __future__ import annotations

import itertools
from typing import Iterator, NamedTuple

import numpy as np
import scipy.sparse as sp

from ..errors import NumericError

_CORNERS = tuple(itertools.product((0, 1), repeat=3))


class Corner(NamedTuple):
    index: np.ndarray  # flat spatial index, clipped into range
    weight: np.ndarray  # interpolation weight, zero for out-of-bounds corners
    dweight: tuple  # d weight / d (q_d, q_h, q_w)


def _corners(qd, qh, qw, spatial, with_grad: bool = False) -> Iterator[Corner]:
    dims = spatial
    base, frac = [], []
    for q, extent in zip((qd, qh, qw), dims):
        # beyond one voxel outside every corner is masked anyway; clipping keeps int casts sane
        q = np.clip(q, -2, extent + 1)
        f = np.floor(q)
        base.append(f.astype(np.int64))
        frac.append(q - f)
    d_, h_, w_ = dims
    for bits in _CORNERS:
        idx = [b + o for b, o in zip(base, bits)]
        valid = (idx[0] >= 0) & (idx[0] < d_) & (idx[1] >= 0) & (idx[1] < h_) & (idx[2] >= 0) & (idx[2] < w_)
        mask = valid.astype(qd.dtype)
        ax = [t if o else 1 - t for t, o in zip(frac, bits)]
        weight = ax[0] * ax[1] * ax[2] * mask
        flat = (np.clip(idx[0], 0, d_ - 1) * h_ + np.clip(idx[1], 0, h_ - 1)) * w_ + np.clip(idx[2], 0, w_ - 1)
        dweight = ()
        if with_grad:
            sign = [1.0 if o else -1.0 for o in bits]
            dweight = (
                sign[0] * ax[1] * ax[2] * mask,
                sign[1] * ax[0] * ax[2] * mask,
                sign[2] * ax[0] * ax[1] * mask,
            )
        yield Corner(flat, weight, dweight)


def _check_coords(*qs):
    for q in qs:
        if np.isnan(q).any():
            raise NumericError("NaN sampling coordinate")


class SamplingOperator:
    """Trilinear sampling as a sparse linear map, built once per coordinate set.

    Rows are the N*M sample points, columns the N*S voxels of a batch; each row
    holds the 8 corner weights. Volumes are multiplied channel-last so the
    channel dimension rides along as dense columns.
    """

    def __init__(self, qd, qh, qw, spatial, with_grad: bool = False):
        _check_coords(qd, qh, qw)
        self.n, self.m = qd.shape
        self.spatial = tuple(spatial)
        self.s = int(np.prod(spatial))
        index, weight, dweight = [], [], ([], [], [])
        for corner in _corners(qd, qh, qw, spatial, with_grad):
            index.append(corner.index)
            weight.append(corner.weight)
            for a, dw in enumerate(corner.dweight):
                dweight[a].append(dw)
        self._index = (np.stack(index, axis=-1) + (np.arange(self.n) * self.s)[:, None, None]).ravel()
        self._indptr = np.arange(0, self.n * self.m * 8 + 1, 8)
        self.matrix = self._csr(weight)
        self.dmatrices = tuple(self._csr(d) for d in dweight) if with_grad else ()

    def _csr(self, parts):
        data = np.stack(parts, axis=-1).ravel()
        return sp.csr_matrix((data, self._index, self._indptr), shape=(self.n * self.m, self.n * self.s))

    def _channel_last(self, x):
        c = x.shape[1]
        return np.ascontiguousarray(x.reshape(self.n, c, self.s).transpose(0, 2, 1)).reshape(-1, c)

    def apply(self, x) -> np.ndarray:
        """Sample x (N, C, *spatial); returns channel-last values (N, M, C)."""
        return (self.matrix @ self._channel_last(x)).reshape(self.n, self.m, x.shape[1])

    def adjoint(self, grad, x):
        """Given channel-last grad (N, M, C) of the sampled values, return
        (grad_x, (grad_qd, grad_qh, grad_qw)); coordinate grads have shape (N, M)."""
        c = x.shape[1]
        g = grad.reshape(-1, c)
        gx = (self.matrix.T @ g).reshape(self.n, self.s, c).transpose(0, 2, 1).reshape(x.shape)
        xt = self._channel_last(x)
        gq = tuple(np.einsum("mc,mc->m", dm @ xt, g).reshape(self.n, self.m) for dm in self.dmatrices)
        return np.ascontiguousarray(gx), gq


def sample(x: np.ndarray, qd: np.ndarray, qh: np.ndarray, qw: np.ndarray) -> np.ndarray:
    """Sample every channel of x (N, C, D, H, W) at points given per batch item.

    qd, qh, qw have shape (N, M); the result has shape (N, C, M).
    """
    op = SamplingOperator(qd, qh, qw, x.shape[2:])
    return np.ascontiguousarray(op.apply(x).transpose(0, 2, 1))


def sample_backward(grad: np.ndarray, x: np.ndarray, qd, qh, qw):
    """Vector-Jacobian product of :func:`sample`.

    Returns (grad_x, grad_qd, grad_qh, grad_qw).
    """
    op = SamplingOperator(qd, qh, qw, x.shape[2:], with_grad=True)
    gx, gq = op.adjoint(np.ascontiguousarray(grad.transpose(0, 2, 1)), x)
    return (gx, *gq)


def trilinear_sample(x: np.ndarray, n: int, c: int, q) -> float:
    """Value of channel ``c`` of batch item ``n`` at fractional voxel coordinate ``q``."""
    q = np.asarray(q, dtype=x.dtype).reshape(3)
    _check_coords(q)
    vol = x[n:n + 1, c:c + 1]
    return float(sample(vol, q[0:1][None], q[1:2][None], q[2:3][None])[0, 0, 0])


def trilinear_sample_backward(grad: float, x: np.ndarray, n: int, c: int, q):
    """Returns (grad_x with the shape of x, grad_q as a 3-vector)."""
    q = np.asarray(q, dtype=x.dtype).reshape(3)
    _check_coords(q)
    vol = x[n:n + 1, c:c + 1]
    g = np.full((1, 1, 1), grad, dtype=x.dtype)
    gvol, gd, gh, gw = sample_backward(g, vol, q[0:1][None], q[1:2][None], q[2:3][None])
    grad_x = np.zeros_like(x)
    grad_x[n, c] = gvol[0, 0]
    return grad_x, np.array([gd[0, 0], gh[0, 0], gw[0, 0]])
