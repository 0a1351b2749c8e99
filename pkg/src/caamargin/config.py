"""Flat ``key = value`` experiment configuration.

Blank lines and ``#`` comments are ignored.  Keys are the field names of
:class:`TrainConfig` and :class:`DataConfig`; an unknown key, a repeated key
or an unparsable value raises :class:`ConfigError` carrying the line number.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, fields
from typing import Optional, Tuple

from .errors import ConfigError
from .losses import DENOMINATORS, MarginConfig

LOSSES = ("cross_entropy", "am_softmax", "aam_softmax", "supcon", "sup_margin_con",
          "caa_margin_con")
OPTIMIZERS = ("sgd", "adam")
LAMBDA_MODES = ("mgda", "fixed")
ACTIVATIONS = ("relu", "tanh", "identity")


@dataclass(frozen=True)
class TrainConfig:
    loss: str = "caa_margin_con"
    m: float = 0.2
    tau: float = 0.07
    s: float = 30.0
    batch_size: int = 64
    epochs: int = 60
    optimizer: str = "adam"
    lr: float = 3e-3
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    lambda_mode: str = "mgda"
    lambda1: float = 0.5
    lambda2: float = 0.5
    seed: int = 0
    hidden: Tuple[int, ...] = (64, 64)
    embed_dim: int = 16
    activation: str = "relu"
    attention: bool = True
    contrastive_m: Optional[float] = None
    denominator: str = "negatives_only"
    aug_noise: float = 0.3
    aug_dropout: float = 0.1
    class_vector_init: float = 0.0

    def __post_init__(self):
        _choice("loss", self.loss, LOSSES)
        _choice("optimizer", self.optimizer, OPTIMIZERS)
        _choice("lambda_mode", self.lambda_mode, LAMBDA_MODES)
        _choice("activation", self.activation, ACTIVATIONS)
        _choice("denominator", self.denominator, DENOMINATORS)
        if self.batch_size < 4 or self.batch_size % 2:
            raise ConfigError(f"batch_size={self.batch_size} must be even and >= 4", key="batch_size")
        if self.epochs < 0:
            raise ConfigError(f"epochs={self.epochs} must be nonnegative", key="epochs")
        if self.lr < 0:
            raise ConfigError(f"lr={self.lr} must be nonnegative", key="lr")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError("lambda1 and lambda2 must be nonnegative", key="lambda1")
        if self.embed_dim < 2:
            raise ConfigError("embed_dim must be at least 2", key="embed_dim")
        cm = self.contrastive_m
        if cm is not None and not 0.0 <= cm < math.pi / 2:
            raise ConfigError(f"contrastive_m={cm} outside [0, pi/2)", key="contrastive_m")
        try:
            self.margin
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    @property
    def margin(self):
        return MarginConfig(m=self.m, tau=self.tau, s=self.s)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class DataConfig:
    n_speakers: int = 20
    utts_per_speaker: int = 50
    d_in: int = 40
    spread: float = 0.6
    outlier_rate: float = 0.15
    outlier_shift: float = 0.5
    radius: float = 3.0
    data_seed: int = 0
    eval_utts: int = 10
    n_target: int = 400
    n_nontarget: int = 400
    p_target: float = 0.01
    c_miss: float = 1.0
    c_fa: float = 1.0

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


def _choice(key, value, allowed):
    if value not in allowed:
        raise ConfigError(f"{key}={value!r} not one of {', '.join(allowed)}", key=key)


def _field_types(cls):
    return {f.name: f.type for f in fields(cls)}


def _parse_bool(text):
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def parse_value(cls, key, text):
    """Convert ``text`` to the declared type of ``cls.key``."""
    kind = _field_types(cls)[key]
    text = text.strip()
    if kind == "int":
        return int(text)
    if kind == "float":
        return float(text)
    if kind == "bool":
        return _parse_bool(text)
    if kind == "Optional[float]":
        return None if text.lower() in ("none", "") else float(text)
    if kind == "Tuple[int, ...]":
        return tuple(int(p) for p in text.replace(" ", "").split(",") if p)
    return text


def format_value(value):
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return "none"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config_text(text, source="<config>"):
    """Parse ``key = value`` lines into ``{key: (raw value, line number)}``."""
    entries = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}: expected 'key = value', got {raw.strip()!r}", line=lineno)
        key, value = (p.strip() for p in line.split("=", 1))
        if key in entries:
            raise ConfigError(f"{source}: duplicate key {key!r}", line=lineno, key=key)
        entries[key] = (value, lineno)
    return entries


def build_configs(entries, overrides=None, source="<config>"):
    """Combine parsed file entries with overrides (already typed) into configs.

    Precedence: ``overrides`` > file entries > dataclass defaults.
    """
    train_keys = _field_types(TrainConfig)
    data_keys = _field_types(DataConfig)
    train, data = {}, {}
    for key, (raw, lineno) in entries.items():
        if key in train_keys:
            cls, target = TrainConfig, train
        elif key in data_keys:
            cls, target = DataConfig, data
        else:
            raise ConfigError(f"{source}: unknown key {key!r}", line=lineno, key=key)
        try:
            target[key] = parse_value(cls, key, raw)
        except ValueError as exc:
            raise ConfigError(f"{source}: bad value for {key!r}: {exc}", line=lineno, key=key) from None
    for key, value in (overrides or {}).items():
        if key in train_keys:
            train[key] = value
        elif key in data_keys:
            data[key] = value
        else:
            raise ConfigError(f"unknown key {key!r}", key=key)
    try:
        return TrainConfig(**train), DataConfig(**data)
    except ConfigError as exc:
        line = entries.get(exc.key, (None, None))[1] if exc.key else None
        if line is not None:
            raise ConfigError(f"{source}: {exc}", line=line, key=exc.key) from None
        raise


def load_config(path=None, overrides=None):
    if path is None:
        return build_configs({}, overrides)
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return build_configs(parse_config_text(text, str(path)), overrides, str(path))


def config_lines(*configs):
    """``key = value`` lines for every field, in declaration order."""
    out = []
    for cfg in configs:
        for f in fields(cfg):
            out.append(f"{f.name} = {format_value(getattr(cfg, f.name))}")
    return out
