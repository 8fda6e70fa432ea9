"""Flat key-value run configuration.

Every option of every pipeline stage lives here under a documented
default. Config files hold one ``key = value`` per line with ``#``
comments; command-line flags override file values, which override
defaults. Unknown keys are errors, never silently ignored.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, fields
from typing import Optional, Union

from . import errors

_BOOL_TRUE = {"1", "true", "yes", "on"}
_BOOL_FALSE = {"0", "false", "no", "off"}


@dataclass
class RunConfig:
    # input files
    markers: str = ""
    map: str = ""
    pheno: str = ""
    fixed: str = ""
    trait: str = ""
    missing_code: str = "NA"
    coding: str = "zero-one-two"
    # genome partition
    depth: int = 2
    splits: int = 2
    rule: str = "equal-count"
    region_file: str = ""
    # kernel
    kernel: str = "gaussian"
    poly_c: float = 1.0
    poly_d: int = 2
    bandwidth: Union[float, str] = "auto"
    gaussian_norm_constant: bool = False
    # region models
    pc_count: int = 5
    include: str = "leaves"
    # combiner
    lambda1: Union[float, str] = "auto"
    lambda2: Union[float, str] = "auto"
    folds: int = 10
    # significance testing
    alpha: float = 0.05
    null_sims: int = 10000
    # evaluation
    models: str = "mk,lin,gaus"
    train_frac: float = 0.9
    replicates: int = 30
    # simulation
    preset: str = "mixed"
    # execution
    seed: int = 0
    threads: int = 0  # 0 = number of machine cores
    out: str = ""
    model: str = ""

    def effective_threads(self) -> int:
        return self.threads if self.threads > 0 else (os.cpu_count() or 1)


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}
_DEFAULTS = RunConfig()

_INT_KEYS = {
    "depth", "splits", "poly_d", "pc_count", "folds", "null_sims",
    "replicates", "seed", "threads",
}
_FLOAT_KEYS = {"poly_c", "alpha", "train_frac"}
_AUTO_FLOAT_KEYS = {"bandwidth", "lambda1", "lambda2"}
_BOOL_KEYS = {"gaussian_norm_constant"}


def _coerce(key: str, raw: Union[str, int, float, bool]):
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    try:
        if key in _INT_KEYS:
            return int(text)
        if key in _FLOAT_KEYS:
            return float(text)
        if key in _AUTO_FLOAT_KEYS:
            return "auto" if text == "auto" else float(text)
        if key in _BOOL_KEYS:
            low = text.lower()
            if low in _BOOL_TRUE:
                return True
            if low in _BOOL_FALSE:
                return False
            raise ValueError(f"not a boolean: {text!r}")
    except ValueError as exc:
        raise errors.ConfigError(f"bad value for {key!r}: {exc}") from None
    return text


def parse_config_file(path) -> dict:
    """Read ``key = value`` lines; '#' starts a comment; unknown keys fail."""
    values: dict = {}
    try:
        fh = open(path, "r", encoding="utf-8")
    except OSError as exc:
        raise errors.ConfigError(f"cannot read config file {path}: {exc}") from exc
    with fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            if "=" not in text:
                raise errors.ConfigError(
                    f"{path}:{lineno}: expected 'key = value', got {text!r}"
                )
            key, value = (part.strip() for part in text.split("=", 1))
            if key not in _FIELD_TYPES:
                raise errors.ConfigError(
                    f"{path}:{lineno}: unknown configuration key {key!r}"
                )
            values[key] = _coerce(key, value)
    return values


def resolve(
    file_values: Optional[dict] = None, overrides: Optional[dict] = None
) -> RunConfig:
    """Defaults, overlaid with file values, overlaid with CLI overrides."""
    merged: dict = {}
    for source in (file_values or {}), (overrides or {}):
        for key, value in source.items():
            if key not in _FIELD_TYPES:
                raise errors.ConfigError(f"unknown configuration key {key!r}")
            if value is None:
                continue
            merged[key] = _coerce(key, value)
    return RunConfig(**merged)


def dump_defaults() -> str:
    """Canonical config text listing every key at its default."""
    lines = ["# all configuration keys at their default values"]
    for f in fields(RunConfig):
        default = getattr(_DEFAULTS, f.name)
        if isinstance(default, bool):
            default = "true" if default else "false"
        lines.append(f"{f.name} = {default}")
    return "\n".join(lines) + "\n"


def config_hash(cfg: RunConfig) -> str:
    """Stable digest of the fully resolved configuration."""
    h = hashlib.blake2b(digest_size=16)
    for f in fields(RunConfig):
        h.update(f.name.encode())
        h.update(b"=")
        h.update(str(getattr(cfg, f.name)).encode())
        h.update(b"\n")
    return h.hexdigest()
