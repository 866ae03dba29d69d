"""
Rendering of reports for stdout.

``kv`` output is one ``key=value`` per line. Global keys are bare, per-tensor
keys are ``tensor.<name>.<field>``. Floats use ``.10g``, missing values print
as ``none`` and booleans as ``true``/``false``. Key order is fixed for a given
report type, so output is stable across runs. ``text`` output shows the same
keys aligned in two columns with floats at ``.6g``.
"""
from __future__ import annotations

from typing import Iterable, List, Optional, Sequence, Tuple

from deltapress.schemas import (
    ContainerManifest,
    DeltaStats,
    MethodResult,
    ReconstructionReport,
    RetentionResult,
    StorageReport,
)
from deltapress.utils import format_float

Pairs = List[Tuple[str, object]]
FORMATS = ("text", "kv")


def format_value(value: object, fmt: str = "kv") -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return format_float(value) if fmt == "kv" else f"{value:.6g}"
    if isinstance(value, (list, tuple)):
        return ",".join(format_value(v, fmt) for v in value)
    return str(value)


def render(pairs: Iterable[Tuple[str, object]], fmt: str = "text") -> str:
    if fmt not in FORMATS:
        raise ValueError(f"Unsupported format: '{fmt}'. Supported: {list(FORMATS)}")
    pairs = list(pairs)
    if fmt == "kv":
        return "\n".join(f"{k}={format_value(v, fmt)}" for k, v in pairs)
    width = max((len(k) for k, _ in pairs), default=0)
    return "\n".join(f"{k.ljust(width)}  {format_value(v, fmt)}" for k, v in pairs)


def stats_pairs(stats: DeltaStats) -> Pairs:
    pairs: Pairs = [
        ("mean_abs", stats.mean_abs),
        ("mean_abs_tensor_avg", stats.mean_abs_tensor_avg),
        ("mean_singular_value", stats.mean_singular_value),
        ("entropy_bits", stats.entropy_bits),
        ("num_bins", stats.num_bins),
        ("num_tensors", stats.num_tensors),
        ("num_params", stats.num_params),
    ]
    for name, ts in stats.per_tensor.items():
        prefix = f"tensor.{name}"
        pairs += [
            (f"{prefix}.numel", ts.numel),
            (f"{prefix}.mean_abs", ts.mean_abs),
            (f"{prefix}.max_abs", ts.max_abs),
            (f"{prefix}.frobenius_norm", ts.frobenius_norm),
            (f"{prefix}.mean_sv", ts.mean_sv),
            (f"{prefix}.entropy_bits", ts.entropy_bits),
        ]
    return pairs


def storage_pairs(storage: StorageReport, manifest: Optional[ContainerManifest] = None) -> Pairs:
    pairs: Pairs = []
    if manifest is not None:
        pairs.append(("method", manifest.method))
        pairs.append(("entries", len(manifest.entries)))
    pairs += [
        ("achieved_rho", storage.achieved_rho),
        ("stored_bits", storage.stored_bits),
        ("model_params", storage.model_params),
        ("bits_b", storage.bits_b),
        ("projected_total", storage.projected_total),
    ]
    pairs += [(f"kind.{kind}", count) for kind, count in storage.per_kind.items()]
    if manifest is not None and manifest.removed:
        pairs.append(("removed", manifest.removed))
    return pairs


def error_pairs(report: ReconstructionReport) -> Pairs:
    pairs: Pairs = [("global_relative_error", report.global_relative_error)]
    if report.skipped:
        pairs.append(("skipped", report.skipped))
    for name, err in report.per_tensor.items():
        prefix = f"tensor.{name}"
        pairs += [
            (f"{prefix}.kind", err.kind),
            (f"{prefix}.frobenius_error", err.frobenius_error),
            (f"{prefix}.relative_error", err.relative_error),
        ]
        if err.predicted_sq_error is not None:
            pairs.append((f"{prefix}.predicted_sq_error", err.predicted_sq_error))
    return pairs


def retention_pairs(result: RetentionResult) -> Pairs:
    return [
        ("retention", result.retention),
        ("drop", result.drop),
        ("drop_percent", result.drop_percent),
    ]


def comparison_pairs(results: Sequence[MethodResult]) -> Pairs:
    pairs: Pairs = []
    for result in results:
        pairs.append((f"method.{result.method}.achieved_rho", result.achieved_rho))
        pairs.append((f"method.{result.method}.global_relative_error", result.global_relative_error))
    return pairs


def sweep_pairs(results: Sequence[MethodResult]) -> Pairs:
    pairs: Pairs = []
    for result in results:
        pairs.append((f"rho1.{result.rho1}.achieved_rho", result.achieved_rho))
        pairs.append((f"rho1.{result.rho1}.global_relative_error", result.global_relative_error))
    return pairs
