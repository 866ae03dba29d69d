"""
Delta extraction and delta diagnostics.

Statistics follow the conventions below; none of them is fixed by the method
itself, so they are documented here and in DESIGN.md:

* Avg(|delta|) pools every scalar element across tensors (``mean_abs``); the
  per-tensor-mean alternative is reported as ``mean_abs_tensor_avg``.
* Avg(|sigma|) is the mean singular value of each 2-D delta, averaged across
  matrices. Vectors are excluded.
* H(delta) is the Shannon entropy, in bits, of an equal-width histogram over
  each tensor's own [min, max], averaged across tensors. Because the bins
  follow the data, rescaling a delta leaves its entropy unchanged.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from deltapress.archive import ShapeClass, TensorArchive, working_view
from deltapress.errors import (
    ArchitectureMismatchError,
    DegenerateBaselineError,
    EmptyInputError,
    NumericError,
)
from deltapress.linalg import singular_values
from deltapress.schemas import DeltaStats, RetentionResult, TensorStats

logger = logging.getLogger(__name__)

DEFAULT_NUM_BINS = 4096


@dataclass(frozen=True)
class DeltaTensor:
    name: str
    values: np.ndarray
    original_dtype: str
    shape_class: ShapeClass
    original_shape: Tuple[int, ...]


@dataclass
class NameDiff:
    shared: List[str] = field(default_factory=list)
    shape_mismatch: List[str] = field(default_factory=list)
    base_only: List[str] = field(default_factory=list)
    finetuned_only: List[str] = field(default_factory=list)

    @property
    def aligned(self) -> bool:
        return not (self.shape_mismatch or self.base_only or self.finetuned_only)


def diff_names(base: TensorArchive, finetuned: TensorArchive) -> NameDiff:
    """Partition tensor names; order follows the fine-tuned archive."""
    diff = NameDiff()
    for name, record in finetuned.items():
        if name not in base:
            diff.finetuned_only.append(name)
        elif base[name].shape != record.shape:
            diff.shape_mismatch.append(name)
        else:
            diff.shared.append(name)
    diff.base_only = [name for name in base if name not in finetuned]
    return diff


def delta_of(base: TensorArchive, finetuned: TensorArchive, name: str) -> DeltaTensor:
    view = working_view(finetuned[name].to_float32() - base[name].to_float32())
    return DeltaTensor(
        name=name,
        values=view.values,
        original_dtype=finetuned[name].dtype,
        shape_class=view.shape_class,
        original_shape=view.original_shape,
    )


def extract_deltas(
    base: TensorArchive,
    finetuned: TensorArchive,
    *,
    strict: bool = True,
    skipped: Optional[List[str]] = None,
) -> List[DeltaTensor]:
    """finetuned - base for every shared tensor, in float32.

    In relaxed mode, mismatched names are appended to ``skipped`` and logged.
    """
    diff = diff_names(base, finetuned)
    offending = diff.shape_mismatch + diff.base_only + diff.finetuned_only
    if offending:
        if strict:
            raise ArchitectureMismatchError("archives do not share the same tensors", offending)
        for name in offending:
            logger.warning("skipping %s: not aligned between base and fine-tuned", name)
        if skipped is not None:
            skipped.extend(offending)
    return [delta_of(base, finetuned, name) for name in diff.shared]


def histogram_entropy(values: np.ndarray, num_bins: int = DEFAULT_NUM_BINS) -> float:
    flat = np.asarray(values, dtype=np.float64).ravel()
    lo, hi = float(flat.min()), float(flat.max())
    if lo == hi:
        return 0.0
    counts, _ = np.histogram(flat, bins=num_bins, range=(lo, hi))
    p = counts[counts > 0] / flat.size
    return float(-np.sum(p * np.log2(p)))


def tensor_stats(delta: DeltaTensor, num_bins: int = DEFAULT_NUM_BINS) -> TensorStats:
    if not np.isfinite(delta.values).all():
        raise NumericError(f"delta of {delta.name} has non-finite entries")
    abs_values = np.abs(delta.values.astype(np.float64))
    mean_sv = None
    if delta.shape_class != "vector":
        mean_sv = float(np.mean(singular_values(delta.values)))
    return TensorStats(
        numel=int(delta.values.size),
        mean_abs=float(np.mean(abs_values)),
        max_abs=float(abs_values.max()),
        frobenius_norm=float(np.sqrt(np.sum(np.square(abs_values)))),
        mean_sv=mean_sv,
        entropy_bits=histogram_entropy(delta.values, num_bins),
    )


def compute_stats(
    deltas: Sequence[DeltaTensor],
    num_bins: int = DEFAULT_NUM_BINS,
    *,
    threads: int = 1,
) -> DeltaStats:
    if not deltas:
        raise EmptyInputError("compute_stats needs at least one delta")
    if num_bins < 1:
        raise ValueError(f"num_bins must be positive, got {num_bins}")

    ordered = sorted(deltas, key=lambda d: d.name)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            per = list(pool.map(lambda d: tensor_stats(d, num_bins), ordered))
    else:
        per = [tensor_stats(d, num_bins) for d in ordered]

    total_abs = 0.0
    total_numel = 0
    for delta in ordered:
        total_abs += float(np.sum(np.abs(delta.values.astype(np.float64))))
        total_numel += int(delta.values.size)

    svs = [s.mean_sv for s in per if s.mean_sv is not None]
    return DeltaStats(
        mean_abs=total_abs / total_numel,
        mean_abs_tensor_avg=float(np.mean([s.mean_abs for s in per])),
        mean_singular_value=float(np.mean(svs)) if svs else None,
        entropy_bits=float(np.mean([s.entropy_bits for s in per])),
        num_bins=num_bins,
        num_tensors=len(per),
        num_params=total_numel,
        per_tensor={d.name: s for d, s in zip(ordered, per)},
    )


def performance_retention(base_score: float, sft_score: float, compressed_score: float) -> RetentionResult:
    """Share of the fine-tuning gain that survives compression, and its complement."""
    if sft_score == base_score:
        raise DegenerateBaselineError(
            f"sft score equals base score ({base_score}); retention is undefined"
        )
    retention = (compressed_score - base_score) / (sft_score - base_score)
    return RetentionResult(retention=retention, drop=1.0 - retention)


def aggregate_retention(triples: Iterable[Tuple[float, float, float]]) -> RetentionResult:
    """Mean retention over several benchmarks; drop is its complement."""
    results = [performance_retention(*t) for t in triples]
    if not results:
        raise EmptyInputError("aggregate_retention needs at least one score triple")
    retention = float(np.mean([r.retention for r in results]))
    return RetentionResult(retention=retention, drop=1.0 - retention)
