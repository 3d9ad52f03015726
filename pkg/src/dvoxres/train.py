"""Minibatch training with augmentation, best-on-validation selection and fine-tuning."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint
from .data import AugmentSpec, VolumeSample, augment_scale, stack
from .errors import ConfigError, DataError, UndefinedMetricError
from .evaluation import roc_auc
from .model import Model, ModelConfig
from .ops.functional import bce_with_logits, bce_with_logits_backward
from .optim import SGD, Adam
from .tensor import Rng

log = logging.getLogger(__name__)


@dataclass
class OptimizerConfig:
    name: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.name not in ("adam", "sgd"):
            raise ConfigError(f"optimizer must be 'adam' or 'sgd', got {self.name!r}")
        if self.lr < 0:
            raise ConfigError("lr must be >= 0")

    def build(self, params):
        if self.name == "sgd":
            return SGD(params, self.lr, self.momentum, self.weight_decay)
        return Adam(params, self.lr, self.beta1, self.beta2, self.eps, self.weight_decay)


@dataclass
class ScheduleConfig:
    kind: str = "constant"
    factor: float = 0.5
    every: int = 10

    def __post_init__(self):
        if self.kind not in ("constant", "step"):
            raise ConfigError(f"lr_schedule kind must be 'constant' or 'step', got {self.kind!r}")
        if self.every < 1:
            raise ConfigError("lr_schedule.every must be >= 1")

    def lr_at(self, base_lr: float, epoch: int) -> float:
        if self.kind == "constant":
            return base_lr
        return base_lr * self.factor ** ((epoch - 1) // self.every)


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 4
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    lr_schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    # 0 disables early stopping
    early_stop_patience: int = 5
    seed: int = 0
    augment: AugmentSpec = field(default_factory=AugmentSpec)
    allow_single_class: bool = False

    def __post_init__(self):
        if isinstance(self.optimizer, dict):
            self.optimizer = OptimizerConfig(**self.optimizer)
        if isinstance(self.lr_schedule, dict):
            self.lr_schedule = ScheduleConfig(**self.lr_schedule)
        if isinstance(self.augment, dict):
            self.augment = AugmentSpec(**self.augment)
        if self.batch_size < 1 or self.epochs < 0 or self.early_stop_patience < 0:
            raise ConfigError("batch_size must be >= 1, epochs and early_stop_patience >= 0")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_auc: float
    lr: float
    wall_time: float


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0

    @property
    def losses(self) -> list[float]:
        return [r.train_loss for r in self.records]

    def write_csv(self, path):
        """Timing is left out so that reruns produce identical files."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "val_auc", "lr", "best"])
            for r in self.records:
                w.writerow([r.epoch, repr(r.train_loss), repr(r.val_auc), repr(r.lr), int(r.epoch == self.best_epoch)])


def predict(model: Model, samples: list[VolumeSample], batch_size: int = 16) -> np.ndarray:
    """Eval-mode logits, one per sample."""
    out = []
    for i in range(0, len(samples), batch_size):
        x, _ = stack(samples[i:i + batch_size])
        out.append(model.forward(x, "eval"))
    return np.concatenate(out) if out else np.zeros(0)


def _val_auc(model, val_set) -> float:
    if not val_set:
        return math.nan
    try:
        return roc_auc(predict(model, val_set), [s.label for s in val_set])
    except UndefinedMetricError:
        return math.nan


def _snapshot(model: Model) -> dict[str, np.ndarray]:
    return {n: p.data.copy() for n, p in model.named_tensors().items()}


def _restore(model: Model, snap: dict[str, np.ndarray]):
    for n, p in model.named_tensors().items():
        p.data = snap[n].copy()


def train(model: Model, train_set: list[VolumeSample], val_set: list[VolumeSample] | None,
          cfg: TrainConfig) -> tuple[Model, TrainLog]:
    """Minimize mean BCE. Returns the model restored to its best-validation-AUC epoch
    (the last epoch when no usable validation set is given)."""
    if not train_set:
        raise DataError("empty training set")
    if len({s.label for s in train_set}) < 2 and not cfg.allow_single_class:
        raise DataError("training set contains a single class")
    rng = Rng(cfg.seed)
    params = model.parameters()
    opt = cfg.optimizer.build(params)
    history = TrainLog()
    best_auc, best_snap, stale = -math.inf, None, 0
    n = len(train_set)
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        opt.lr = cfg.lr_schedule.lr_at(cfg.optimizer.lr, epoch)
        order = rng.split("epoch", epoch).permutation(n)
        total, seen = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            batch = [augment_scale(train_set[i], cfg.augment, rng.split("augment", epoch, int(i))) for i in idx]
            x, y = stack(batch)
            model.zero_grad()
            z = model.forward(x, "train")
            total += bce_with_logits(z, y) * len(idx)
            seen += len(idx)
            model.backward(bce_with_logits_backward(z, y))
            opt.step()
        auc = _val_auc(model, val_set)
        rec = EpochRecord(epoch, total / seen, auc, opt.lr, time.perf_counter() - t0)
        history.records.append(rec)
        log.info("epoch %d loss %.5f val_auc %.4f lr %.2g (%.1fs)", epoch, rec.train_loss, auc, opt.lr, rec.wall_time)
        if not math.isnan(auc):
            if auc > best_auc:
                best_auc, best_snap, stale = auc, _snapshot(model), 0
                history.best_epoch = epoch
            else:
                stale += 1
                if cfg.early_stop_patience and stale >= cfg.early_stop_patience:
                    break
    if best_snap is not None:
        _restore(model, best_snap)
    elif history.records:
        history.best_epoch = history.records[-1].epoch
    return model, history


def finetune(source_ckpt, target_cfg: ModelConfig, train_set, val_set, cfg: TrainConfig,
             dtype=None) -> tuple[Model, TrainLog]:
    """Transfer weights from a checkpoint into ``target_cfg`` and train all parameters."""
    model = load_checkpoint(source_ckpt, target_cfg, dtype=dtype)
    return train(model, train_set, val_set, cfg)


class DVoxResClassifier:
    """Adapter giving a dVoxResNet the ``fit``/``decision_function`` interface
    used by :func:`dvoxres.evaluation.cross_validate`."""

    def __init__(self, cfg: ModelConfig, dtype=np.float32, init_checkpoint=None):
        if init_checkpoint is not None:
            self.model = load_checkpoint(init_checkpoint, cfg, dtype=dtype)
        else:
            from .model import build_model
            self.model = build_model(cfg, dtype=dtype)
        self.log: TrainLog | None = None

    def fit(self, train_set, val_set, cfg: TrainConfig) -> TrainLog:
        self.model, self.log = train(self.model, train_set, val_set, cfg)
        return self.log

    def decision_function(self, samples) -> np.ndarray:
        return predict(self.model, samples)


def dvoxres_factory(cfg: ModelConfig, dtype=np.float32, init_checkpoint=None):
    """``factory(seed)`` building a classifier whose model seed is ``seed``.
    With a checkpoint the seed only affects freshly created offset predictors (zero)."""
    from dataclasses import replace

    def factory(seed: int) -> DVoxResClassifier:
        return DVoxResClassifier(replace(cfg, seed=seed), dtype, init_checkpoint)

    return factory
