from __future__ import annotations

import math
from fractions import Fraction
from typing import Optional, Tuple, Union

from deltapress.errors import ConfigError

FractionLike = Union[str, int, float, Fraction]


def parse_fraction(value: FractionLike) -> Fraction:
    """Parse ``"p/q"`` or a decimal into an exact Fraction.

    Decimal strings are parsed from their text, so ``"0.0625"`` is exactly 1/16.
    """
    if isinstance(value, Fraction):
        return value
    if isinstance(value, bool):
        raise ConfigError(f"not a fraction: {value!r}")
    if isinstance(value, int):
        return Fraction(value)
    if isinstance(value, float):
        if not math.isfinite(value):
            raise ConfigError(f"not a finite fraction: {value!r}")
        return Fraction(str(value))
    text = str(value).strip()
    try:
        return Fraction(text)
    except (ValueError, ZeroDivisionError) as exc:
        raise ConfigError(f"cannot parse fraction {value!r}") from exc


def parse_layer_range(value) -> Optional[Tuple[float, float]]:
    """Accept ``"lo:hi"`` or a two-element sequence."""
    if value is None:
        return None
    if isinstance(value, str):
        parts = value.split(":")
        if len(parts) != 2:
            raise ConfigError(f"layer range must look like LO:HI, got {value!r}")
        lo, hi = (float(parse_fraction(p)) for p in parts)
    else:
        try:
            lo, hi = (float(parse_fraction(v)) for v in value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"layer range must have two bounds, got {value!r}") from exc
    return lo, hi


def format_float(value: Optional[float]) -> str:
    if value is None:
        return "none"
    return f"{value:.10g}"

