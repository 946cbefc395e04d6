"""Run configuration: defaults, a plain ``key = value`` file, and command-line overrides.

File format: one ``key = value`` per line; ``#`` or ``;`` start a comment line.
Booleans accept true/false/yes/no/1/0.  Unknown keys are rejected.
"""

from __future__ import annotations

import configparser
import dataclasses
import os
from dataclasses import dataclass, fields
from pathlib import Path

RUN_DIR_ENV = "RESVMAMBA_RUN_DIR"
VARIANT_ALIASES = {"plain": "plain", "res": "global_residual", "global_residual": "global_residual"}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # model
    model: str = "nano"
    variant: str = "plain"
    state_size: int = 0  # 0 keeps the preset's value
    expansion: int = 2
    image_size: int = 32
    chunk: int = 0  # 0 picks the scan chunk automatically
    # data
    data: str = ""
    split_file: str = ""
    test_data: str = ""
    synth: bool = False
    synth_classes: int = 4
    synth_per_class: int = 64
    split_ratio: float = 0.7
    # recipe
    epochs: int = 150
    warmup_epochs: int = 20
    batch_size: int = 32
    eval_batch_size: int = 64
    lr: float = 1e-3
    min_lr: float = 1e-5
    warmup_lr: float = 1e-6
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    label_smoothing: float = 0.1
    ema_decay: float = 0.9999
    # run
    seed: int = 0
    run_dir: str = ""

    def __post_init__(self):
        if self.variant not in VARIANT_ALIASES:
            raise ConfigError(f"variant must be one of {sorted(VARIANT_ALIASES)}, got {self.variant!r}")
        self.variant = VARIANT_ALIASES[self.variant]
        if self.epochs < 1 or self.batch_size < 1 or self.eval_batch_size < 1:
            raise ConfigError("epochs and batch sizes must be positive")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError(f"warmup_epochs ({self.warmup_epochs}) must be smaller than epochs ({self.epochs})")
        if self.image_size % 32:
            raise ConfigError(f"image_size {self.image_size} must be divisible by 32")

    def resolved_run_dir(self) -> Path:
        if self.run_dir:
            return Path(self.run_dir)
        base = Path(os.environ.get(RUN_DIR_ENV, "runs"))
        return base / f"{self.model}-{self.variant}-seed{self.seed}"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dumps(self) -> str:
        lines = ["# effective run configuration"]
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {str(v).lower() if isinstance(v, bool) else v}")
        return "\n".join(lines) + "\n"


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _coerce(key: str, raw) -> object:
    kind = type(getattr(RunConfig, key)) if hasattr(RunConfig, key) else str
    if isinstance(raw, kind) and not (kind is int and isinstance(raw, bool)):
        return raw
    text = str(raw).strip()
    try:
        if kind is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r} (expected {kind.__name__})") from None
    return text


def parse_config_text(text: str) -> dict:
    cp = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"), inline_comment_prefixes=("#",))
    cp.optionxform = str
    try:
        cp.read_string("[run]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(f"unreadable config: {exc}") from None
    return dict(cp["run"])


def build_config(file: str | None = None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the config file, then ``overrides``; unknown keys raise :class:`ConfigError`."""
    values: dict = {}
    if file:
        try:
            text = Path(file).read_text(encoding="utf-8")
        except OSError as exc:
            raise OSError(f"cannot read config {file}: {exc}") from exc
        values.update(parse_config_text(text))
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    unknown = sorted(set(values) - set(_FIELDS))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    return RunConfig(**{k: _coerce(k, v) for k, v in values.items()})


def parse_set_args(pairs: list[str]) -> dict:
    out = {}
    for p in pairs or []:
        if "=" not in p:
            raise ConfigError(f"--set expects key=value, got {p!r}")
        k, v = p.split("=", 1)
        out[k.strip()] = v.strip()
    return out
