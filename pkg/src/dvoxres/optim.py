"""SGD with momentum and Adam. Weight decay applies only to parameters
flagged ``decay`` (convolution and linear weights)."""
from __future__ import annotations

import numpy as np

from .errors import NumericError
from .tensor import Parameter


def sgd_step(w, g, velocity, lr, momentum=0.0, weight_decay=0.0):
    """One in-place SGD update of ``w``; returns the new velocity."""
    if weight_decay:
        g = g + weight_decay * w
    if momentum:
        velocity *= momentum
        velocity += g
        g = velocity
    w -= lr * g
    return velocity


def adam_step(w, g, m, v, t, lr, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
    """One in-place Adam update of ``w`` at step ``t`` (1-based).

    Weight decay is decoupled: ``w`` shrinks by ``lr * weight_decay * w``.
    """
    m *= beta1
    m += (1 - beta1) * g
    v *= beta2
    v += (1 - beta2) * g * g
    mhat = m / (1 - beta1 ** t)
    vhat = v / (1 - beta2 ** t)
    if weight_decay:
        w -= lr * weight_decay * w
    w -= lr * mhat / (np.sqrt(vhat) + eps)


def _check_finite(p: Parameter):
    if not np.isfinite(p.grad).all():
        raise NumericError(f"non-finite gradient in {p.name}")


class SGD:
    def __init__(self, params: list[Parameter], lr: float, momentum: float = 0.0, weight_decay: float = 0.0):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {p.name: np.zeros_like(p.data) for p in params}

    def step(self):
        for p in self.params:
            _check_finite(p)
        for p in self.params:
            wd = self.weight_decay if p.decay else 0.0
            self.velocity[p.name] = sgd_step(p.data, p.grad, self.velocity[p.name], self.lr, self.momentum, wd)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {f"optim.velocity.{k}": v for k, v in self.velocity.items()}


class Adam:
    def __init__(self, params: list[Parameter], lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {p.name: np.zeros_like(p.data) for p in params}
        self.v = {p.name: np.zeros_like(p.data) for p in params}

    def step(self):
        for p in self.params:
            _check_finite(p)
        self.t += 1
        for p in self.params:
            wd = self.weight_decay if p.decay else 0.0
            adam_step(p.data, p.grad, self.m[p.name], self.v[p.name], self.t, self.lr,
                      self.beta1, self.beta2, self.eps, wd)

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {f"optim.m.{k}": v for k, v in self.m.items()}
        out.update({f"optim.v.{k}": v for k, v in self.v.items()})
        out["optim.step"] = np.array([self.t], dtype=np.float64)
        return out
