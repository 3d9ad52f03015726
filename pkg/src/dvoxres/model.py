"""Conv3D units, VoxRes blocks and the configurable dVoxResNet classifier.

Topology (stage index in brackets is what the deformable index sets refer to)::

    conv[1] s1 -> conv[2] s1 -> conv[3] s2 -> voxres[1] -> voxres[2]
    -> conv[4] s2 -> voxres[3] -> conv[5] s2 -> voxres[4] -> conv[6] s2
    -> global average pool -> linear -> logit
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError
from .ops.conv import ConvSpec, conv3d_backward, conv3d_forward
from .ops.deform import DeformableConvSpec, deformable_conv3d_backward, deformable_conv3d_forward
from .ops.functional import global_avg_pool, global_avg_pool_backward, linear, linear_backward, relu, relu_backward
from .ops.norm import batchnorm_backward, batchnorm_forward
from .tensor import Parameter, Rng, Tensor5, dtype_for

DEFORMABLE_CONV_SLOTS = frozenset({4, 5, 6})
DEFORMABLE_VOXRES_SLOTS = frozenset({2, 3, 4})


@dataclass
class ModelConfig:
    in_channels: int = 1
    widths: tuple = (16, 16, 32, 32, 64, 64)
    deform_conv_idx: frozenset = frozenset()
    deform_voxres_idx: frozenset = frozenset()
    kernel: tuple = (3, 3, 3)
    head_hidden: int = 0
    seed: int = 0

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.kernel = tuple(int(k) for k in self.kernel)
        self.deform_conv_idx = frozenset(int(i) for i in self.deform_conv_idx)
        self.deform_voxres_idx = frozenset(int(i) for i in self.deform_voxres_idx)
        self.validate()

    def validate(self):
        if not self.deform_conv_idx <= DEFORMABLE_CONV_SLOTS:
            bad = sorted(self.deform_conv_idx - DEFORMABLE_CONV_SLOTS)
            raise ConfigError(f"deform_conv_idx {bad} outside {sorted(DEFORMABLE_CONV_SLOTS)}")
        if not self.deform_voxres_idx <= DEFORMABLE_VOXRES_SLOTS:
            bad = sorted(self.deform_voxres_idx - DEFORMABLE_VOXRES_SLOTS)
            raise ConfigError(f"deform_voxres_idx {bad} outside {sorted(DEFORMABLE_VOXRES_SLOTS)}")
        if len(self.widths) != 6 or min(self.widths) < 1:
            raise ConfigError(f"widths must be 6 positive channel counts, got {self.widths}")
        if len(self.kernel) != 3 or any(k < 1 or k % 2 == 0 for k in self.kernel):
            raise ConfigError(f"kernel must be 3 odd extents, got {self.kernel}")
        if self.in_channels < 1 or self.head_hidden < 0:
            raise ConfigError("in_channels must be >= 1 and head_hidden >= 0")

    @property
    def label(self) -> str:
        return format_label(self.deform_conv_idx, self.deform_voxres_idx)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        d["kernel"] = list(self.kernel)
        d["deform_conv_idx"] = sorted(self.deform_conv_idx)
        d["deform_voxres_idx"] = sorted(self.deform_voxres_idx)
        return d


def _parse_idx(part: str, label: str) -> frozenset:
    part = part.strip()
    if part == "-":
        return frozenset()
    try:
        values = [int(v) for v in part.split(",")]
    except ValueError:
        raise ConfigError(f"bad index list {part!r} in label {label!r}") from None
    return frozenset(values)


def parse_label(label: str) -> tuple[frozenset, frozenset]:
    """Parse ``"<conv idxs> ; <voxres idxs>"`` with ``-`` for an empty set, e.g. ``"4, 5 ; 2, 3"``."""
    parts = label.split(";")
    if len(parts) != 2:
        raise ConfigError(f"label {label!r} must have the form '<conv idxs> ; <voxres idxs>'")
    conv, voxres = (_parse_idx(p, label) for p in parts)
    ModelConfig(deform_conv_idx=conv, deform_voxres_idx=voxres)
    return conv, voxres


def format_label(conv, voxres) -> str:
    def fmt(s):
        return ", ".join(str(i) for i in sorted(s)) if s else "-"

    return f"{fmt(conv)} ; {fmt(voxres)}"


class Conv3d:
    """Regular or deformable convolution with bias."""

    def __init__(self, name: str, spec: ConvSpec, rng: Rng, dtype, deformable: bool = False):
        self.name = name
        self.spec = spec
        self.deformable = deformable
        fan_in = spec.in_channels * spec.taps
        w = rng.split(f"{name}.weight").normal(spec.weight_shape, std=math.sqrt(2.0 / fan_in))
        self.weight = Parameter(f"{name}.weight", Tensor5(w.astype(dtype)), decay=True)
        self.bias = Parameter(f"{name}.bias", Tensor5(np.zeros(spec.out_channels, dtype)))
        self.params = [self.weight, self.bias]
        if deformable:
            self.dspec = DeformableConvSpec(spec)
            pred = self.dspec.offset_predictor
            # zero init: training starts exactly at the regular convolution
            self.offset_weight = Parameter(f"{name}.offset.weight", Tensor5(np.zeros(pred.weight_shape, dtype)), decay=True)
            self.offset_bias = Parameter(f"{name}.offset.bias", Tensor5(np.zeros(pred.out_channels, dtype)))
            self.params += [self.offset_weight, self.offset_bias]
        self._cache = None

    def forward(self, x):
        if self.deformable:
            y, _, self._cache = deformable_conv3d_forward(
                x, self.weight.data, self.bias.data, self.offset_weight.data, self.offset_bias.data,
                self.dspec, return_cache=True)
        else:
            y, cols = conv3d_forward(x, self.weight.data, self.bias.data, self.spec, return_cols=True)
            self._cache = (x, cols)
        return y

    def backward(self, g):
        if self.deformable:
            gx, gw, gb, gow, gob = deformable_conv3d_backward(g, self._cache, self.dspec)
            self.offset_weight.grad += gow
            self.offset_bias.grad += gob
        else:
            x, cols = self._cache
            gx, gw, gb = conv3d_backward(g, x, self.weight.data, self.spec, cols=cols)
        self.weight.grad += gw
        self.bias.grad += gb
        self._cache = None
        return gx


class BatchNorm3d:
    def __init__(self, name: str, channels: int, dtype):
        self.name = name
        self.gamma = Parameter(f"{name}.weight", Tensor5(np.ones(channels, dtype)))
        self.beta = Parameter(f"{name}.bias", Tensor5(np.zeros(channels, dtype)))
        self.running_mean = Parameter(f"{name}.running_mean", Tensor5(np.zeros(channels, dtype)), trainable=False)
        self.running_var = Parameter(f"{name}.running_var", Tensor5(np.ones(channels, dtype)), trainable=False)
        self.params = [self.gamma, self.beta, self.running_mean, self.running_var]
        self._cache = None

    def forward(self, x, train: bool):
        y, self._cache = batchnorm_forward(x, self.gamma.data, self.beta.data, self.running_mean.data,
                                           self.running_var.data, "train" if train else "eval", return_cache=True)
        return y

    def backward(self, g):
        gx, gg, gb = batchnorm_backward(g, self._cache)
        self.gamma.grad += gg
        self.beta.grad += gb
        self._cache = None
        return gx


class ConvUnit:
    """conv -> batchnorm -> relu."""

    def __init__(self, name, spec, rng, dtype, deformable=False):
        self.conv = Conv3d(name, spec, rng, dtype, deformable)
        self.bn = BatchNorm3d(f"{name}.bn", spec.out_channels, dtype)
        self.params = self.conv.params + self.bn.params

    def forward(self, x, train):
        self._pre = self.bn.forward(self.conv.forward(x), train)
        return relu(self._pre)

    def backward(self, g):
        return self.conv.backward(self.bn.backward(relu_backward(g, self._pre)))


class VoxRes:
    """Two conv units sharing a width; the identity skip joins before the last relu."""

    def __init__(self, name, channels, kernel, rng, dtype, deformable=False):
        spec = ConvSpec(channels, channels, kernel, 1, tuple(k // 2 for k in kernel))
        self.unit1 = ConvUnit(f"{name}.conv1", spec, rng, dtype, deformable)
        self.conv2 = Conv3d(f"{name}.conv2", spec, rng, dtype, deformable)
        self.bn2 = BatchNorm3d(f"{name}.conv2.bn", channels, dtype)
        self.params = self.unit1.params + self.conv2.params + self.bn2.params

    def forward(self, x, train):
        h = self.bn2.forward(self.conv2.forward(self.unit1.forward(x, train)), train)
        self._sum = h + x
        return relu(self._sum)

    def backward(self, g):
        gs = relu_backward(g, self._sum)
        return self.unit1.backward(self.conv2.backward(self.bn2.backward(gs))) + gs


class Head:
    """Global average pool followed by a linear layer (optionally one hidden relu layer)."""

    def __init__(self, name, in_features, hidden, rng, dtype):
        self.layers = []
        dims = [in_features] + ([hidden] if hidden else []) + [1]
        for i, (fi, fo) in enumerate(zip(dims[:-1], dims[1:])):
            pname = f"{name}.fc{i}" if hidden else name
            gain = 2.0 if i < len(dims) - 2 else 1.0
            w = rng.split(f"{pname}.weight").normal((fo, fi), std=math.sqrt(gain / fi))
            self.layers.append((Parameter(f"{pname}.weight", Tensor5(w.astype(dtype)), decay=True),
                                Parameter(f"{pname}.bias", Tensor5(np.zeros(fo, dtype)))))
        self.params = [p for pair in self.layers for p in pair]

    def forward(self, x, train):
        self._x_shape = x.shape
        h = global_avg_pool(x).reshape(x.shape[0], x.shape[1])
        self._acts = []
        for i, (w, b) in enumerate(self.layers):
            self._acts.append(h)
            h = linear(h, w.data, b.data)
            if i < len(self.layers) - 1:
                self._acts.append(h)
                h = relu(h)
        return h

    def backward(self, g):
        acts = list(self._acts)
        for i in reversed(range(len(self.layers))):
            w, b = self.layers[i]
            if i < len(self.layers) - 1:
                g = relu_backward(g, acts.pop())
            h = acts.pop()
            g, gw, gb = linear_backward(g, h, w.data)
            w.grad += gw
            b.grad += gb
        n, c = self._x_shape[:2]
        return global_avg_pool_backward(g.reshape(n, c, 1, 1, 1), self._x_shape)


class Model:
    def __init__(self, cfg: ModelConfig, dtype, stages):
        self.config = cfg
        self.dtype = np.dtype(dtype)
        self.stages = stages

    def parameters(self, trainable_only: bool = True) -> list[Parameter]:
        out = []
        for _, stage in self.stages:
            out.extend(p for p in stage.params if p.trainable or not trainable_only)
        return out

    def named_tensors(self) -> dict[str, Parameter]:
        return {p.name: p for p in self.parameters(trainable_only=False)}

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def offset_predictors(self) -> list[str]:
        return sorted(p.name[: -len(".weight")] for p in self.parameters() if p.name.endswith(".offset.weight"))

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def forward(self, x, mode: str = "eval") -> np.ndarray:
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim != 5 or x.shape[1] != self.config.in_channels:
            raise ShapeError(f"expected (N, {self.config.in_channels}, D, H, W) input, got {x.shape}")
        train = mode == "train"
        for name, stage in self.stages:
            try:
                x = stage.forward(x) if isinstance(stage, Conv3d) else stage.forward(x, train)
            except ShapeError as e:
                raise ShapeError(f"stage {name}: {e}") from None
        return x.reshape(-1)

    __call__ = forward

    def backward(self, grad_logits):
        g = np.asarray(grad_logits, dtype=self.dtype).reshape(-1, 1)
        for _, stage in reversed(self.stages):
            g = stage.backward(g)
        return g

    def spatial_trace(self, spatial) -> list[tuple[str, tuple]]:
        """Per-stage output extents for an input of the given spatial shape."""
        trace = [("input", tuple(spatial))]
        for name, stage in self.stages:
            if isinstance(stage, ConvUnit):
                spatial = stage.conv.spec.output_shape(spatial)
            trace.append((name, tuple(spatial)))
        return trace


def build_model(cfg: ModelConfig, rng: Rng | None = None, dtype=np.float32) -> Model:
    """Instantiate dVoxResNet. Each parameter draws from its own named RNG stream,
    so shared parameters are identical whatever the deformable placement."""
    cfg.validate()
    if isinstance(dtype, str):
        dtype = dtype_for(dtype)
    rng = rng if rng is not None else Rng(cfg.seed)
    w = cfg.widths
    k = cfg.kernel
    pad = tuple(v // 2 for v in k)

    def unit(i, cin, cout, stride):
        spec = ConvSpec(cin, cout, k, stride, pad)
        return (f"conv{i}", ConvUnit(f"conv{i}", spec, rng, dtype, i in cfg.deform_conv_idx))

    def voxres(i, ch):
        return (f"voxres{i}", VoxRes(f"voxres{i}", ch, k, rng, dtype, i in cfg.deform_voxres_idx))

    stages = [
        unit(1, cfg.in_channels, w[0], 1),
        unit(2, w[0], w[1], 1),
        unit(3, w[1], w[2], 2),
        voxres(1, w[2]),
        voxres(2, w[2]),
        unit(4, w[2], w[3], 2),
        voxres(3, w[3]),
        unit(5, w[3], w[4], 2),
        voxres(4, w[4]),
        unit(6, w[4], w[5], 2),
        ("head", Head("head", w[5], cfg.head_hidden, rng, dtype)),
    ]
    model = Model(cfg, dtype, stages)
    model.zero_grad()
    return model


def deformable_overhead(cfg: ModelConfig) -> int:
    """Extra trainable parameters contributed by the offset predictors."""
    taps = math.prod(cfg.kernel)
    w = cfg.widths
    conv_in = {4: w[2], 5: w[3], 6: w[4]}
    voxres_in = {2: w[2], 3: w[3], 4: w[4]}
    total = 0
    for inc in [conv_in[i] for i in cfg.deform_conv_idx] + [voxres_in[i] for i in cfg.deform_voxres_idx] * 2:
        total += 3 * taps * inc * taps + 3 * taps
    return total
