"""Activations, pooling, the linear head and the logistic loss."""
from __future__ import annotations

import numpy as np

from ..errors import DataError, ShapeError


def relu(x):
    return np.maximum(x, 0)


def relu_backward(grad_out, x):
    return grad_out * (x > 0)


def global_avg_pool(x):
    return x.mean(axis=(2, 3, 4), keepdims=True)


def global_avg_pool_backward(grad_out, x_shape):
    count = int(np.prod(x_shape[2:]))
    return np.broadcast_to(grad_out / count, x_shape).copy()


def linear(x, weight, bias):
    """x: (N, F), weight: (O, F), bias: (O,) -> (N, O)."""
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear input has {x.shape[1]} features, weight expects {weight.shape[1]}")
    return x @ weight.T + bias


def linear_backward(grad_out, x, weight):
    """Returns (grad_x, grad_weight, grad_bias)."""
    return grad_out @ weight, grad_out.T @ x, grad_out.sum(axis=0)


def sigmoid(z):
    return np.exp(-np.logaddexp(0, -z))


def _check_labels(labels, z):
    labels = np.asarray(labels)
    if labels.shape != np.shape(z):
        raise ShapeError(f"labels shape {labels.shape} != logits shape {np.shape(z)}")
    if not np.isin(labels, (0, 1)).all():
        raise DataError("labels must be 0 or 1")
    return labels.astype(np.asarray(z).dtype)


def bce_with_logits(z, labels) -> float:
    """Mean binary cross-entropy of sigmoid(z) against labels, in log-sum-exp form."""
    y = _check_labels(labels, z)
    losses = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    return float(losses.mean())


def bce_with_logits_backward(z, labels):
    y = _check_labels(labels, z)
    return (sigmoid(z) - y) / z.size
