"""JSON run configuration with strict key checking."""
from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .data import SynthSpec
from .errors import ConfigError
from .evaluation import CvPlan
from .model import ModelConfig
from .tensor import PRECISIONS
from .train import TrainConfig


@dataclass
class DataSection:
    synth: SynthSpec | None = None
    manifest: str | None = None

    def __post_init__(self):
        if self.synth is None and self.manifest is None:
            self.synth = SynthSpec()
        if self.synth is not None and self.manifest is not None:
            raise ConfigError("data: give either 'synth' or 'manifest', not both")


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: CvPlan = field(default_factory=CvPlan)
    out: str = "runs/default"
    seed: int | None = None
    precision: str = "f32"

    def __post_init__(self):
        if self.precision not in PRECISIONS:
            raise ConfigError(f"precision must be one of {sorted(PRECISIONS)}, got {self.precision!r}")

    def apply_seed(self, seed: int):
        """One seed for every stochastic component."""
        self.seed = seed
        if self.data.synth is not None:
            self.data.synth = dataclasses.replace(self.data.synth, seed=seed)
        self.model = dataclasses.replace(self.model, seed=seed)
        self.train = dataclasses.replace(self.train, seed=seed)
        self.eval = dataclasses.replace(self.eval, seed=seed)

    def to_dict(self) -> dict:
        return _to_plain(self)


def _to_plain(obj):
    if isinstance(obj, ModelConfig):
        return obj.to_dict()
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (tuple, list)):
        return [_to_plain(v) for v in obj]
    if isinstance(obj, (set, frozenset)):
        return sorted(obj)
    return obj


def _dataclass_type(tp):
    for arg in typing.get_args(tp) or (tp,):
        if dataclasses.is_dataclass(arg):
            return arg
    return None


def from_dict(cls, data, path: str = ""):
    """Build dataclass ``cls`` from a mapping, rejecting unknown keys."""
    if not isinstance(data, dict):
        raise ConfigError(f"{path or '<root>'}: expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    for key in data:
        if key not in names:
            raise ConfigError(f"unknown key '{path + '.' if path else ''}{key}'")
    kwargs = {}
    for name, value in data.items():
        sub = _dataclass_type(hints[name])
        key_path = f"{path}.{name}" if path else name
        if sub is not None and value is not None:
            value = from_dict(sub, value, key_path)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except ConfigError as e:
        raise ConfigError(f"{path or '<root>'}: {e}") from None
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{path or '<root>'}: {e}") from None


def load_run_config(path) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON: {e}") from None
    return from_dict(RunConfig, data)


def write_resolved(cfg: RunConfig, directory) -> Path:
    path = Path(directory) / "config.resolved.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    return path
