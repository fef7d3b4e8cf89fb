"""Flat ``key = value`` run configuration with typed defaults.

Every ablation knob is a single-line change. Unknown keys are rejected and
all errors name the offending line.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields

from .errors import ConfigError

POS_ENCODINGS = ("none", "sincos_abs", "learn_abs", "learn_rel")


@dataclass
class Config:
    dataset: str = "synth:512:0"
    epochs: int = 5
    batch_size: int = 128
    lambda_: float = 100.0
    n_blocks: int = 5
    pos_encoding: str = "learn_rel"
    tau_base: float = 0.99
    warmup_epochs: int = 1
    seed: int = 0
    normalize_att: bool = False
    symmetrize: bool = False
    weight_decay: float = 0.0
    probe_epochs: int = 30
    probe_lr: float = 0.2
    metrics_path: str = ""
    checkpoint_path: str = "model.ckpt"


_KEY_TO_FIELD = {("lambda" if f.name == "lambda_" else f.name): f.name
                 for f in fields(Config)}


def _parse_bool(text: str) -> bool:
    lowered = text.lower()
    if lowered in ("true", "1", "yes", "on"):
        return True
    if lowered in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


_PARSERS = {int: int, float: float, str: str, bool: _parse_bool}


def _validate(cfg: Config) -> None:
    checks = [
        (cfg.epochs >= 1, "epochs must be >= 1"),
        (cfg.batch_size >= 1, "batch_size must be >= 1"),
        (cfg.lambda_ >= 0.0, "lambda must be non-negative"),
        (cfg.n_blocks >= 1, "n_blocks must be >= 1"),
        (cfg.pos_encoding in POS_ENCODINGS,
         f"pos_encoding must be one of {POS_ENCODINGS}"),
        (0.0 <= cfg.tau_base <= 1.0, "tau_base must lie in [0,1]"),
        (cfg.warmup_epochs >= 0, "warmup_epochs must be >= 0"),
        (cfg.weight_decay >= 0.0, "weight_decay must be non-negative"),
        (cfg.probe_epochs >= 1, "probe_epochs must be >= 1"),
        (cfg.probe_lr > 0.0, "probe_lr must be positive"),
    ]
    for ok, message in checks:
        if not ok:
            raise ConfigError(message)


def parse_config(text: str) -> Config:
    """Parse UTF-8 ``key = value`` lines (# comments) into a Config."""
    cfg = Config()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = key.strip(), value.strip()
        field_name = _KEY_TO_FIELD.get(key)
        if field_name is None:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        ftype = type(getattr(cfg, field_name))
        try:
            setattr(cfg, field_name, _PARSERS[ftype](value))
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key!r}: {exc}") from exc
    try:
        _validate(cfg)
    except ConfigError as exc:
        raise ConfigError(f"config validation failed: {exc}") from exc
    return cfg


def load_config(path: str) -> Config:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


def config_hash(cfg: Config) -> str:
    canonical = ";".join(
        f"{name}={getattr(cfg, field_name)}"
        for name, field_name in sorted(_KEY_TO_FIELD.items())
    )
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()
