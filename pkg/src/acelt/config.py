"""Run configuration and its flat ``key = value`` file format.

Example file::

    # desk-scale long-tailed benchmark
    num_classes = 10
    imbalance = 100
    experts = 3
    scheme = linear
    milestones = 0.8, 0.9

Every :class:`RunConfig` field is a valid key; unknown keys are rejected.
Blank lines and ``#`` comments are ignored.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Mapping, Optional

from .aggregate import AGGREGATORS
from .errors import ConfigurationError
from .optim import SCHEMES, OptimConfig

GENERATORS = ("blobs", "csv")
PROFILES = ("exponential", "pareto")
MIXUP_ROUTING = ("both", "dominant")


@dataclass(frozen=True)
class RunConfig:
    # dataset
    generator: str = "blobs"
    profile: str = "exponential"
    num_classes: int = 10
    dim: int = 16
    n_max: int = 500
    imbalance: float = 100.0
    n_min: Optional[int] = None
    pareto_power: float = 6.0
    separation: float = 1.0
    noise: float = 0.35
    test_per_class: int = 100
    train_csv: Optional[str] = None
    test_csv: Optional[str] = None
    many_threshold: int = 100
    few_threshold: int = 20
    # model
    experts: int = 3
    hidden: int = 32
    ssc_mode: bool = False
    lambda_com: float = 1.0
    # optimisation
    base_lr: float = 0.1
    momentum: float = 0.9
    scheme: str = "linear"
    milestones: tuple[float, ...] = (0.8, 0.9)
    decay: float = 0.1
    weight_decay: float = 0.0
    epochs: int = 300
    batch_size: int = 32
    mixup_alpha: float = 0.3
    mixup_off_fraction: float = 0.05
    mixup_routing: str = "dominant"
    # evaluation / bookkeeping
    aggregator: str = "avg_scaled"
    seed: int = 0
    output_dir: str = "runs/default"

    def __post_init__(self):
        object.__setattr__(self, "milestones", tuple(float(m) for m in self.milestones))
        if self.generator not in GENERATORS:
            raise ConfigurationError(f"generator must be one of {GENERATORS}")
        if self.profile not in PROFILES:
            raise ConfigurationError(f"profile must be one of {PROFILES}")
        if self.generator == "csv" and not self.train_csv:
            raise ConfigurationError("generator 'csv' needs train_csv")
        if self.aggregator not in AGGREGATORS:
            raise ConfigurationError(f"aggregator must be one of {tuple(AGGREGATORS)}")
        if self.scheme not in SCHEMES:
            raise ConfigurationError(f"scheme must be one of {SCHEMES}")
        if self.experts < 1 or self.batch_size < 1 or self.epochs < 0:
            raise ConfigurationError("experts and batch_size must be positive, epochs >= 0")
        if self.mixup_alpha < 0 or self.lambda_com < 0:
            raise ConfigurationError("mixup_alpha and lambda_com must be non-negative")
        if self.mixup_routing not in MIXUP_ROUTING:
            raise ConfigurationError(f"mixup_routing must be one of {MIXUP_ROUTING}")
        if not 0 <= self.mixup_off_fraction <= 1:
            raise ConfigurationError("mixup_off_fraction must lie in [0, 1]")

    def optim(self) -> OptimConfig:
        return OptimConfig(
            base_lr=self.base_lr,
            momentum=self.momentum,
            scheme=self.scheme,
            milestones=self.milestones,
            decay=self.decay,
            epochs=self.epochs,
            weight_decay=self.weight_decay,
        )

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["milestones"] = list(self.milestones)
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "RunConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def digest(self) -> str:
        """Stable hash of everything that affects results (not output_dir)."""
        d = self.to_dict()
        d.pop("output_dir")
        blob = json.dumps(d, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


_HINTS = typing.get_type_hints(RunConfig)


def parse_value(key: str, text: str) -> Any:
    """Convert the textual value of ``key`` to its field type."""
    if key not in _HINTS:
        raise ConfigurationError(f"unknown config key {key!r}")
    hint = _HINTS[key]
    text = text.strip()
    if typing.get_origin(hint) is typing.Union:  # Optional[...]
        if text.lower() in ("", "none"):
            return None
        hint = next(a for a in typing.get_args(hint) if a is not type(None))
    try:
        if hint is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if hint is int:
            return int(text)
        if hint is float:
            return float(text)
        if typing.get_origin(hint) is tuple:
            return tuple(float(v) for v in text.replace(" ", "").split(",") if v)
        return text
    except ValueError:
        raise ConfigurationError(f"bad value for {key}: {text!r}") from None


def format_value(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ", ".join(repr(float(v)) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config_text(text: str) -> dict[str, Any]:
    values: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key] = parse_value(key, value)
    return values


def load_config(path, overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    values = parse_config_text(Path(path).read_text()) if path else {}
    values.update(overrides or {})
    return RunConfig.from_dict(values)


def dump_config(config: RunConfig) -> str:
    return "".join(f"{k} = {format_value(v)}\n" for k, v in config.to_dict().items())
