"""
Configuration loading: CLI flags over a TOML file over model defaults.
"""
from __future__ import annotations

import logging
import os
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Union

from pydantic import ValidationError

from deltapress.errors import ConfigError, IoError
from deltapress.schemas import CompressionConfig

logger = logging.getLogger(__name__)

THREADS_ENV = "DQRELO_THREADS"
MAX_DEFAULT_THREADS = 8


def load_config_file(path: Union[str, os.PathLike]) -> Dict[str, Any]:
    path = Path(path)
    try:
        with path.open("rb") as handle:
            values = tomllib.load(handle)
    except OSError as exc:
        raise IoError(f"cannot read config {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: invalid TOML: {exc}") from exc

    unknown = sorted(set(values) - set(CompressionConfig.model_fields))
    if unknown:
        raise ConfigError(
            f"Unsupported config keys: {unknown}. Supported: {list(CompressionConfig.model_fields)}"
        )
    logger.debug("loaded config keys %s from %s", sorted(values), path)
    return values


def _describe(exc: ValidationError) -> str:
    parts = []
    for err in exc.errors():
        where = ".".join(str(p) for p in err.get("loc", ())) or "config"
        parts.append(f"{where}: {err['msg']}")
    return "; ".join(parts)


def build_config(
    file_values: Optional[Mapping[str, Any]] = None,
    **overrides: Any,
) -> CompressionConfig:
    """Overrides that are None (or empty sequences) fall through to the file, then defaults."""
    merged: Dict[str, Any] = dict(file_values or {})
    for key, value in overrides.items():
        if value is None or (isinstance(value, (tuple, list)) and not value):
            continue
        merged[key] = list(value) if isinstance(value, tuple) else value
    try:
        return CompressionConfig(**merged)
    except ValidationError as exc:
        raise ConfigError(f"invalid configuration: {_describe(exc)}") from exc


def resolve_threads(environ: Optional[Mapping[str, str]] = None) -> int:
    environ = os.environ if environ is None else environ
    default = min(MAX_DEFAULT_THREADS, os.cpu_count() or 1)
    raw = environ.get(THREADS_ENV)
    if raw is None or not raw.strip():
        return default
    try:
        threads = int(raw)
    except ValueError as exc:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from exc
    if threads < 1:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return threads
