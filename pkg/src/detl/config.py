"""Run configuration: plain ``key = value`` files, every key defaulted, unknown keys refused."""
from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Iterable, Mapping


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # run
    arch: str = "mini-vgg"
    image_size: int = 64
    seed: int = 0
    out: str = "runs/default"
    log_level: str = "INFO"
    # data
    task: str = "target"
    source_counts: tuple[int, ...] = (480, 480)
    target_counts: tuple[int, ...] = (350, 322, 300, 305)
    data_seed: int = 0
    source_dir: str = ""
    target_dir: str = ""
    holdout_per_class: int = 80
    # pretraining (Adam, cosine annealing, best-validation retention)
    pretrain_epochs: int = 100
    pretrain_lr: float = 1e-3
    lr_min: float = 0.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 32
    augment: bool = True
    # fine-tuning (SGD with momentum, constant rate)
    finetune_epochs: int = 50
    finetune_lr: float = 1e-4
    momentum: float = 0.9
    finetune_batch_size: int = 32
    finetune_augment: bool = True
    # augmentation policy
    rotation: float = 15.0
    scale_min: float = 0.9
    scale_max: float = 1.1
    mirror_p: float = 0.5
    # evaluation and reporting
    folds: int = 5
    checkpoint: str = ""
    samples: tuple[str, ...] = ()
    cam_class: int = -1
    widths: tuple[int, ...] = ()
    tolerance: float = 1e-3

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        from .models import PRESETS

        if self.arch not in PRESETS:
            raise ConfigError(f"arch must be one of {', '.join(PRESETS)}, got {self.arch!r}")
        if self.task not in ("source", "target"):
            raise ConfigError(f"task must be 'source' or 'target', got {self.task!r}")
        if len(self.source_counts) != 2:
            raise ConfigError("source_counts needs 2 entries (normal, diseased)")
        if len(self.target_counts) != 4:
            raise ConfigError("target_counts needs 4 entries (normal, pneumonia, other_disease, covid19)")
        if any(c < 0 for c in self.source_counts + self.target_counts):
            raise ConfigError("class counts must be non-negative")
        for key in ("pretrain_epochs", "finetune_epochs", "batch_size", "finetune_batch_size", "folds"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be at least 1")
        for key in ("pretrain_lr", "finetune_lr", "adam_eps", "tolerance"):
            if not getattr(self, key) > 0:
                raise ConfigError(f"{key} must be positive")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.folds < 2:
            raise ConfigError("folds must be at least 2")

    def echo(self) -> str:
        return "".join(f"{f.name} = {_format(getattr(self, f.name))}\n" for f in fields(self))


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    return str(value)


_TYPES = typing.get_type_hints(RunConfig)
KEYS = tuple(f.name for f in fields(RunConfig))


def parse_value(key: str, text: str) -> Any:
    """Convert the string ``text`` to the declared type of ``key``."""
    if key not in _TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    kind = _TYPES[key]
    text = text.strip()
    try:
        if kind is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind in (int, float, str):
            return kind(text)
        (item, _) = typing.get_args(kind)
        return tuple(item(p.strip()) for p in text.split(",") if p.strip())
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r}") from None


def parse_lines(lines: Iterable[str], origin: str = "<config>") -> dict[str, Any]:
    values: dict[str, Any] = {}
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected 'key = value'")
        key, text = (s.strip() for s in line.split("=", 1))
        if key not in _TYPES:
            raise ConfigError(f"{origin}:{lineno}: unknown config key {key!r}")
        try:
            values[key] = parse_value(key, text)
        except ConfigError as exc:
            raise ConfigError(f"{origin}:{lineno}: {exc}") from None
    return values


def load_config(path=None, overrides: Mapping[str, Any] | None = None) -> RunConfig:
    """Defaults, then the file at ``path``, then ``overrides`` (already typed)."""
    values: dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        values.update(parse_lines(path.read_text().splitlines(), str(path)))
    for key, value in (overrides or {}).items():
        if key not in _TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = value
    return dataclasses.replace(RunConfig(), **values)
