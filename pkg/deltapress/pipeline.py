"""
Archive-level compression: pair tensors, pick targets, compress in parallel.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

from deltapress.archive import TensorArchive, working_view
from deltapress.compressor import (
    CompressedEntry,
    absolute_entry,
    compress_view,
    passthrough_entry,
    storage_accounting,
)
from deltapress.config import build_config
from deltapress.container import build_manifest, write_container
from deltapress.errors import ArchitectureMismatchError, EmptyInputError
from deltapress.reconstruct import error_report, reconstruct
from deltapress.schemas import (
    METHODS,
    CompressionConfig,
    ContainerManifest,
    MethodResult,
    StorageReport,
)
from deltapress.selection import TargetPartition, select_targets
from deltapress.stats import NameDiff, diff_names

logger = logging.getLogger(__name__)


@dataclass
class CompressionRun:
    entries: List[CompressedEntry]
    storage: StorageReport
    partition: TargetPartition
    diff: NameDiff
    meta: Dict[str, object] = field(default_factory=dict)

    @property
    def removed(self) -> List[str]:
        return list(self.meta.get("removed", []))

    @property
    def predicted_errors(self) -> Dict[str, Optional[float]]:
        return {e.name: e.predicted_sq_error for e in self.entries}

    def manifest(self) -> ContainerManifest:
        manifest, _ = build_manifest(self.entries, **self.meta)
        return manifest

    def write(self, path: Union[str, Path]) -> ContainerManifest:
        return write_container(self.entries, self.meta, path)


def _delta_entry(
    name: str,
    base: TensorArchive,
    finetuned: TensorArchive,
    cfg: CompressionConfig,
    compress: bool,
) -> CompressedEntry:
    record = finetuned[name]
    view = working_view(record.to_float32() - base[name].to_float32())
    if compress:
        return compress_view(view, cfg, name=name, dtype=record.dtype)
    return passthrough_entry(view, cfg.bits_b, name=name, dtype=record.dtype)


def compress_archives(
    base: TensorArchive,
    finetuned: TensorArchive,
    cfg: CompressionConfig,
    *,
    threads: int = 1,
    strict: bool = False,
) -> CompressionRun:
    """Compress finetuned - base into container entries sorted by name.

    Tensors only the fine-tuned model has, or whose shape changed, are kept
    verbatim; tensors only the base has are recorded as removed. ``strict``
    turns either situation into an ArchitectureMismatchError.
    """
    if len(finetuned) == 0:
        raise EmptyInputError("fine-tuned archive has no tensors")
    diff = diff_names(base, finetuned)
    if strict and not diff.aligned:
        raise ArchitectureMismatchError(
            "archives do not share the same tensors",
            diff.shape_mismatch + diff.base_only + diff.finetuned_only,
        )

    absolute = diff.finetuned_only + diff.shape_mismatch
    for name in absolute:
        logger.warning("%s has no matching base tensor; storing it verbatim", name)
    for name in diff.base_only:
        logger.warning("%s is missing from the fine-tuned model; marking it removed", name)

    partition = select_targets(diff.shared, cfg)
    targets = set(partition.compress)

    def work(name: str) -> CompressedEntry:
        return _delta_entry(name, base, finetuned, cfg, name in targets)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            entries = list(pool.map(work, diff.shared))
    else:
        entries = [work(name) for name in diff.shared]
    entries.extend(absolute_entry(finetuned[name], name=name) for name in absolute)
    entries.sort(key=lambda e: e.name)

    storage = storage_accounting(entries, finetuned.num_params, cfg.bits_b)
    logger.info(
        "compressed %d tensors with %s: achieved rho %.6f",
        len(entries),
        cfg.method,
        storage.achieved_rho,
    )
    meta = {
        "method": cfg.method,
        "config": cfg.echo(),
        "base_fingerprint": base.fingerprint(),
        "source_precision_bits": finetuned.source_precision_bits,
        "model_params": finetuned.num_params,
        "removed": sorted(diff.base_only),
    }
    return CompressionRun(entries=entries, storage=storage, partition=partition, diff=diff, meta=meta)


def _measure(
    base: TensorArchive,
    finetuned: TensorArchive,
    cfg: CompressionConfig,
    threads: int,
) -> MethodResult:
    run = compress_archives(base, finetuned, cfg, threads=threads)
    manifest = run.manifest()
    recon = reconstruct(base, manifest, run.entries, threads=threads)
    report = error_report(base, finetuned, recon, manifest)
    logger.info(
        "%s at rho1 %s: rho %.6f, relative error %.6g",
        cfg.method, cfg.rho1, run.storage.achieved_rho, report.global_relative_error,
    )
    return MethodResult(
        method=cfg.method,
        achieved_rho=run.storage.achieved_rho,
        global_relative_error=report.global_relative_error,
        rho1=str(cfg.rho1),
    )


def compare_methods(
    base: TensorArchive,
    finetuned: TensorArchive,
    cfg: CompressionConfig,
    methods: Sequence[str] = METHODS,
    *,
    threads: int = 1,
) -> List[MethodResult]:
    """Run each method at the same rho1 and b, reconstruct in memory, measure error."""
    return [_measure(base, finetuned, cfg.model_copy(update={"method": m}), threads) for m in methods]


def sweep_rho1(
    base: TensorArchive,
    finetuned: TensorArchive,
    cfg: CompressionConfig,
    rho1_values: Sequence[Union[str, Fraction]],
    *,
    threads: int = 1,
) -> List[MethodResult]:
    """One run per low-rank budget with everything else in ``cfg`` held fixed.

    Each point is validated on its own, so a rho1 that pushes rho1 + 1/b to 1
    fails with ConfigError before any work is done.
    """
    if not rho1_values:
        raise EmptyInputError("sweep_rho1 needs at least one rho1 value")
    configs = [build_config(cfg.echo(), rho1=value) for value in rho1_values]
    return [_measure(base, finetuned, point, threads) for point in configs]
