"""Batch normalization over (N, D, H, W) per channel."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ShapeError

EPS = 1e-5
MOMENTUM = 0.1
_AXES = (0, 2, 3, 4)


@dataclass
class NormCache:
    xhat: np.ndarray
    inv_std: np.ndarray
    gamma: np.ndarray
    train: bool


def _bcast(v):
    return v.reshape(1, -1, 1, 1, 1)


def batchnorm_forward(x, gamma, beta, running_mean, running_var, mode: str = "train",
                      momentum: float = MOMENTUM, eps: float = EPS, return_cache: bool = False):
    """Normalize x. In train mode ``running_mean``/``running_var`` are updated in place."""
    c = x.shape[1]
    for name, v in (("gamma", gamma), ("beta", beta), ("running_mean", running_mean), ("running_var", running_var)):
        if v.shape != (c,):
            raise ShapeError(f"{name} has shape {v.shape}, input has {c} channels")
    train = mode == "train"
    if train:
        mean = x.mean(axis=_AXES)
        var = x.var(axis=_AXES)
        count = x.size // c
        unbiased = var * (count / (count - 1)) if count > 1 else var
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * unbiased
    elif mode == "eval":
        mean, var = running_mean, running_var
    else:
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - _bcast(mean)) * _bcast(inv_std)
    y = xhat * _bcast(gamma) + _bcast(beta)
    if return_cache:
        return y, NormCache(xhat, inv_std, gamma, train)
    return y


def batchnorm_backward(grad_out, cache: NormCache):
    """Returns (grad_x, grad_gamma, grad_beta)."""
    grad_beta = grad_out.sum(axis=_AXES)
    grad_gamma = (grad_out * cache.xhat).sum(axis=_AXES)
    gxhat = grad_out * _bcast(cache.gamma)
    if not cache.train:
        return gxhat * _bcast(cache.inv_std), grad_gamma, grad_beta
    m = grad_out.size // grad_out.shape[1]
    s1 = _bcast(gxhat.sum(axis=_AXES))
    s2 = _bcast((gxhat * cache.xhat).sum(axis=_AXES))
    grad_x = _bcast(cache.inv_std / m) * (m * gxhat - s1 - cache.xhat * s2)
    return grad_x, grad_gamma, grad_beta
