"""Finite-difference verification of every operator's analytic backward.

Each check builds a random small instance in float64, contracts the
operator output with a random cotangent ``R`` so that ``L = sum(R * y)``,
and compares the analytic gradient of every input slot against central
differences. The error per slot is ``max|a - n| / max(max|a|, max|n|)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .ops.conv import ConvSpec, conv3d_backward, conv3d_forward
from .ops.deform import DeformableConvSpec, deformable_conv3d_backward, deformable_conv3d_forward, sampling_coords
from .ops.functional import (
    bce_with_logits,
    bce_with_logits_backward,
    global_avg_pool,
    global_avg_pool_backward,
    linear,
    linear_backward,
    relu,
    relu_backward,
)
from .ops.norm import batchnorm_backward, batchnorm_forward
from .ops.sampling import sample, sample_backward

STEP = 1e-5
TOLERANCE = 1e-4
NUDGE = 0.01
MAX_COORDS = 250


@dataclass
class SlotResult:
    op: str
    slot: str
    max_rel_error: float
    checked: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


def numeric_grad(loss: Callable[[], float], arr: np.ndarray, coords, step: float = STEP) -> np.ndarray:
    out = np.empty(len(coords))
    flat = arr.reshape(-1)
    for i, j in enumerate(coords):
        orig = flat[j]
        flat[j] = orig + step
        up = loss()
        flat[j] = orig - step
        down = loss()
        flat[j] = orig
        out[i] = (up - down) / (2 * step)
    return out


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.abs(analytic - numeric).max() / scale)


def _compare(op, slots: dict, loss, grads: dict, rng) -> list[SlotResult]:
    results = []
    for name, arr in slots.items():
        size = arr.size
        coords = np.arange(size) if size <= MAX_COORDS else rng.choice(size, MAX_COORDS, replace=False)
        num = numeric_grad(loss, arr, coords)
        ana = np.asarray(grads[name]).reshape(-1)[coords]
        results.append(SlotResult(op, name, rel_error(ana, num), len(coords)))
    return results


def _nudge_from_zero(x: np.ndarray) -> np.ndarray:
    close = np.abs(x) < NUDGE
    x[close] += NUDGE
    return x


def _random_conv_spec(rng, in_c, out_c, spatial) -> ConvSpec:
    while True:
        spec = ConvSpec(in_c, out_c, kernel=tuple(rng.integers(1, 4, 3)), stride=tuple(rng.integers(1, 3, 3)),
                        padding=tuple(rng.integers(0, 2, 3)), dilation=tuple(rng.integers(1, 3, 3)))
        try:
            spec.output_shape(spatial)
            return spec
        except ValueError:
            continue


def _random_shape(rng, max_n=2, max_c=4, max_s=6, min_s=3):
    return (int(rng.integers(1, max_n + 1)), int(rng.integers(1, max_c + 1)),
            *(int(v) for v in rng.integers(min_s, max_s + 1, 3)))


def check_conv3d(rng) -> list[SlotResult]:
    shape = _random_shape(rng)
    spec = _random_conv_spec(rng, shape[1], int(rng.integers(1, 5)), shape[2:])
    x = rng.normal(size=shape)
    w = rng.normal(size=spec.weight_shape)
    b = rng.normal(size=spec.out_channels)
    y = conv3d_forward(x, w, b, spec)
    r = rng.normal(size=y.shape)
    gx, gw, gb = conv3d_backward(r, x, w, spec)

    def loss():
        return float((conv3d_forward(x, w, b, spec) * r).sum())

    return _compare("conv3d", {"x": x, "weight": w, "bias": b}, loss, {"x": gx, "weight": gw, "bias": gb}, rng)


def _nudge_coords(qs, margin=1e-3, max_iter=100):
    for _ in range(max_iter):
        frac = np.concatenate([q.ravel() - np.floor(q.ravel()) for q in qs])
        if np.minimum(frac, 1 - frac).min() > margin:
            return qs
        qs = [q + NUDGE for q in qs]
    raise RuntimeError("could not move sampling coordinates off the lattice")


def check_trilinear_sample(rng) -> list[SlotResult]:
    shape = _random_shape(rng)
    x = rng.normal(size=shape)
    m = 40
    # include points partly outside the volume to exercise the zero-padding boundary
    qs = [rng.uniform(-1.5, s + 0.5, size=(shape[0], m)) for s in shape[2:]]
    qd, qh, qw = _nudge_coords(qs)
    r = rng.normal(size=(shape[0], shape[1], m))
    gx, gqd, gqh, gqw = sample_backward(r, x, qd, qh, qw)

    def loss():
        return float((sample(x, qd, qh, qw) * r).sum())

    slots = {"x": x, "q_d": qd, "q_h": qh, "q_w": qw}
    return _compare("trilinear_sample", slots, loss, {"x": gx, "q_d": gqd, "q_h": gqh, "q_w": gqw}, rng)


def check_deformable_conv3d(rng) -> list[SlotResult]:
    shape = _random_shape(rng, min_s=4)
    base = _random_conv_spec(rng, shape[1], int(rng.integers(1, 4)), shape[2:])
    spec = DeformableConvSpec(base)
    x = rng.normal(size=shape)
    w = rng.normal(size=base.weight_shape)
    b = rng.normal(size=base.out_channels)
    ow = rng.normal(scale=0.1, size=spec.offset_predictor.weight_shape)
    ob = rng.uniform(-1.0, 1.0, size=spec.offset_channels)
    for _ in range(100):
        _, _, cache = deformable_conv3d_forward(x, w, b, ow, ob, spec, return_cache=True)
        qs = sampling_coords(cache.offsets, base, base.output_shape(shape[2:]))
        frac = np.concatenate([q.ravel() - np.floor(q.ravel()) for q in qs])
        if np.minimum(frac, 1 - frac).min() > 1e-3:
            break
        ob += NUDGE
    y, _, cache = deformable_conv3d_forward(x, w, b, ow, ob, spec, return_cache=True)
    r = rng.normal(size=y.shape)
    gx, gw, gb, gow, gob = deformable_conv3d_backward(r, cache, spec)

    def loss():
        return float((deformable_conv3d_forward(x, w, b, ow, ob, spec)[0] * r).sum())

    slots = {"x": x, "weight": w, "bias": b, "offset_weight": ow, "offset_bias": ob}
    grads = {"x": gx, "weight": gw, "bias": gb, "offset_weight": gow, "offset_bias": gob}
    return _compare("deformable_conv3d", slots, loss, grads, rng)


def check_batchnorm(rng) -> list[SlotResult]:
    shape = _random_shape(rng)
    c = shape[1]
    x = rng.normal(loc=0.5, scale=2.0, size=shape)
    gamma = rng.normal(size=c)
    beta = rng.normal(size=c)
    results = []
    for mode in ("train", "eval"):
        rm, rv = rng.normal(size=c), rng.uniform(0.5, 2.0, size=c)
        y, cache = batchnorm_forward(x, gamma, beta, rm.copy(), rv.copy(), mode, return_cache=True)
        r = rng.normal(size=y.shape)
        gx, gg, gb = batchnorm_backward(r, cache)

        def loss():
            return float((batchnorm_forward(x, gamma, beta, rm.copy(), rv.copy(), mode) * r).sum())

        for res in _compare("batchnorm", {"x": x, "gamma": gamma, "beta": beta}, loss,
                            {"x": gx, "gamma": gg, "beta": gb}, rng):
            res.slot = f"{res.slot}[{mode}]"
            results.append(res)
    return results


def check_relu(rng) -> list[SlotResult]:
    x = _nudge_from_zero(rng.normal(size=_random_shape(rng)))
    r = rng.normal(size=x.shape)
    gx = relu_backward(r, x)
    return _compare("relu", {"x": x}, lambda: float((relu(x) * r).sum()), {"x": gx}, rng)


def check_global_avg_pool(rng) -> list[SlotResult]:
    x = rng.normal(size=_random_shape(rng))
    r = rng.normal(size=(x.shape[0], x.shape[1], 1, 1, 1))
    gx = global_avg_pool_backward(r, x.shape)
    return _compare("global_avg_pool", {"x": x}, lambda: float((global_avg_pool(x) * r).sum()), {"x": gx}, rng)


def check_linear(rng) -> list[SlotResult]:
    n, f, o = (int(v) for v in rng.integers(1, 7, 3))
    x, w, b = rng.normal(size=(n, f)), rng.normal(size=(o, f)), rng.normal(size=o)
    r = rng.normal(size=(n, o))
    gx, gw, gb = linear_backward(r, x, w)

    def loss():
        return float((linear(x, w, b) * r).sum())

    return _compare("linear", {"x": x, "weight": w, "bias": b}, loss, {"x": gx, "weight": gw, "bias": gb}, rng)


def check_sigmoid_bce(rng) -> list[SlotResult]:
    n = int(rng.integers(2, 9))
    z = rng.normal(scale=3.0, size=n)
    labels = rng.integers(0, 2, n)
    gz = bce_with_logits_backward(z, labels)
    return _compare("sigmoid_bce", {"logits": z}, lambda: bce_with_logits(z, labels), {"logits": gz}, rng)


CHECKS: dict[str, Callable] = {
    "conv3d": check_conv3d,
    "trilinear_sample": check_trilinear_sample,
    "deformable_conv3d": check_deformable_conv3d,
    "batchnorm": check_batchnorm,
    "relu": check_relu,
    "global_avg_pool": check_global_avg_pool,
    "linear": check_linear,
    "sigmoid_bce": check_sigmoid_bce,
}


def run_gradcheck(ops=None, seed: int = 0, trials: int = 3) -> list[SlotResult]:
    """Run ``trials`` randomized instances of each selected operator check."""
    names = list(CHECKS) if not ops else list(ops)
    unknown = [n for n in names if n not in CHECKS]
    if unknown:
        raise KeyError(f"unknown op(s): {', '.join(unknown)}; choose from {', '.join(CHECKS)}")
    results = []
    for i, name in enumerate(CHECKS):
        if name not in names:
            continue
        for t in range(trials):
            rng = np.random.default_rng([seed, i, t])
            results.extend(CHECKS[name](rng))
    return results


def summarize(results: list[SlotResult]) -> list[tuple[str, str, float, bool]]:
    """Collapse trials into one row per (op, slot) with the worst error."""
    worst: dict[tuple[str, str], float] = {}
    for r in results:
        key = (r.op, r.slot)
        worst[key] = max(worst.get(key, 0.0), r.max_rel_error)
    return [(op, slot, err, err < TOLERANCE) for (op, slot), err in worst.items()]
