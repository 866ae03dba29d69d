"""
Which tensors get compressed and which pass through raw.

Name conventions (checkpoint naming in the common transformer layouts):

* layer index: a dotted segment ``layers``/``layer``/``h``/``blocks``/``block``
  followed by an integer segment, e.g. ``model.layers.12.mlp.up_proj.weight``
  or ``transformer.h.3.attn.c_attn.weight``.
* module groups: token embeddings and LM heads are ``mapping``; anything with a
  norm in its name is ``normalization``; attention projections are
  ``attention``; feed-forward projections are ``mlp``; the rest is ``other``.
"""
from __future__ import annotations

import fnmatch
import logging
import re
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

from deltapress.errors import ConfigError
from deltapress.schemas import CompressionConfig

logger = logging.getLogger(__name__)

LAYER_PATTERN = re.compile(r"(?:^|\.)(?:layers|layer|h|blocks|block)\.(\d+)(?:\.|$)")

MODULE_RULES = (
    ("normalization", re.compile(r"(norm|(^|\.)ln(_\w+)?(\.|$)|layernorm)", re.IGNORECASE)),
    ("mapping", re.compile(r"(embed|wte|wpe|lm_head|(^|\.)output\.weight$|word_embeddings)", re.IGNORECASE)),
    ("attention", re.compile(r"(attn|attention|(^|\.)(q|k|v|o)_proj|query|key|value|c_attn)", re.IGNORECASE)),
    ("mlp", re.compile(r"(mlp|ffn|feed_forward|(gate|up|down)_proj|(^|\.)fc\d?|(^|\.)w[123](\.|$)|experts|c_fc|dense_h_to_4h|dense_4h_to_h)", re.IGNORECASE)),
)


@dataclass
class TargetPartition:
    compress: List[str] = field(default_factory=list)
    passthrough: List[str] = field(default_factory=list)


def layer_index_of(name: str) -> Optional[int]:
    match = LAYER_PATTERN.search(name)
    return int(match.group(1)) if match else None


def num_layers_of(
    names: Sequence[str], index_of: Callable[[str], Optional[int]] = layer_index_of
) -> int:
    indices = [i for i in (index_of(n) for n in names) if i is not None]
    return max(indices) + 1 if indices else 0


def classify_module(name: str) -> str:
    for group, pattern in MODULE_RULES:
        if pattern.search(name):
            return group
    return "other"


def validate_pattern(pattern: str) -> str:
    if not isinstance(pattern, str) or not pattern.strip():
        raise ConfigError(f"empty name pattern: {pattern!r}")
    depth = 0
    for ch in pattern:
        if ch == "[":
            if depth:
                raise ConfigError(f"nested '[' in pattern {pattern!r}")
            depth = 1
        elif ch == "]" and depth:
            depth = 0
    if depth:
        raise ConfigError(f"unclosed '[' in pattern {pattern!r}")
    try:
        re.compile(fnmatch.translate(pattern))
    except re.error as exc:
        raise ConfigError(f"invalid pattern {pattern!r}: {exc}") from exc
    return pattern


def _matches_any(name: str, patterns: Sequence[str]) -> bool:
    return any(fnmatch.fnmatchcase(name, p) for p in patterns)


def select_targets(
    archive_names: Sequence[str],
    cfg: CompressionConfig,
    layer_index_of: Callable[[str], Optional[int]] = layer_index_of,
    num_layers: Optional[int] = None,
) -> TargetPartition:
    """Split names into compress / passthrough.

    A name is compressed iff it matches an include pattern (all names when the
    include list is empty), matches no exclude pattern, belongs to a selected
    module group (when any are set) and, with a layer range, sits at a layer
    fraction inside [lo, hi). Names without a layer index fall outside every
    layer range.
    """
    includes = [validate_pattern(p) for p in cfg.include]
    excludes = [validate_pattern(p) for p in cfg.exclude]
    if num_layers is None:
        num_layers = num_layers_of(archive_names, layer_index_of) if cfg.layer_range else 0

    partition = TargetPartition()
    for name in archive_names:
        keep = (not includes or _matches_any(name, includes)) and not _matches_any(name, excludes)
        if keep and cfg.modules:
            keep = classify_module(name) in cfg.modules
        if keep and cfg.layer_range is not None:
            lo, hi = cfg.layer_range
            index = layer_index_of(name)
            keep = index is not None and num_layers > 0 and lo <= index / num_layers < hi
        (partition.compress if keep else partition.passthrough).append(name)
    logger.info(
        "selected %d tensors to compress, %d passthrough",
        len(partition.compress),
        len(partition.passthrough),
    )
    return partition
