"""
Rebuild a fine-tuned checkpoint from a base archive plus compressed deltas,
and measure how far it lands from the real one.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, Iterable, List, Optional

import numpy as np

from deltapress.archive import TensorArchive, TensorRecord
from deltapress.compressor import CompressedEntry, decompress_entry
from deltapress.errors import ArchitectureMismatchError, BaseMismatchError, ShapeError
from deltapress.schemas import ContainerManifest, ReconstructionReport, TensorError

logger = logging.getLogger(__name__)

EPSILON = 1e-12


def check_base(base: TensorArchive, manifest: ContainerManifest, *, force: bool = False) -> None:
    actual = base.fingerprint()
    if actual == manifest.base_fingerprint:
        return
    if not force:
        raise BaseMismatchError(manifest.base_fingerprint, actual)
    logger.warning(
        "base fingerprint %s does not match container (%s); continuing because of --force",
        actual,
        manifest.base_fingerprint,
    )


def _apply(base: TensorArchive, entry: CompressedEntry) -> TensorRecord:
    if not entry.base_relative:
        return entry.raw
    if entry.name not in base:
        raise ShapeError(f"{entry.name}: base archive has no such tensor")
    record = base[entry.name]
    delta = decompress_entry(entry, record.shape)
    return TensorRecord.from_array(record.to_float32() + delta, record.dtype)


def reconstruct(
    base: TensorArchive,
    manifest: ContainerManifest,
    entries: Iterable[CompressedEntry],
    *,
    force: bool = False,
    threads: int = 1,
) -> TensorArchive:
    """base + decompressed delta per entry, cast to the base dtype; output ordered by name."""
    check_base(base, manifest, force=force)
    by_name = {entry.name: entry for entry in entries}
    removed = set(manifest.removed)

    names = sorted((set(base.names()) - removed) | set(by_name))

    def build(name: str) -> TensorRecord:
        entry = by_name.get(name)
        return base[name] if entry is None else _apply(base, entry)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            records = list(pool.map(build, names))
    else:
        records = [build(name) for name in names]
    logger.info(
        "reconstructed %d tensors (%d from deltas, %d removed)",
        len(records),
        len(by_name),
        len(removed & set(base.names())),
    )
    return base.with_entries(dict(zip(names, records)))


def _norm_sq(values: np.ndarray) -> float:
    flat = np.asarray(values, dtype=np.float64).ravel()
    return float(np.dot(flat, flat))


def _require_aligned(a: TensorArchive, b: TensorArchive, what: str) -> None:
    offending = sorted(set(a.names()) ^ set(b.names()))
    offending += [n for n in a.names() if n in b and a[n].shape != b[n].shape]
    if offending:
        raise ArchitectureMismatchError(f"{what} are not aligned", offending)


def error_report(
    base: TensorArchive,
    finetuned: TensorArchive,
    reconstructed: TensorArchive,
    manifest: Optional[ContainerManifest] = None,
) -> ReconstructionReport:
    """Per-tensor ||phi_hat - phi||_F against ||phi - base||_F.

    Tensors without a same-shaped base counterpart are listed in ``skipped``.
    """
    _require_aligned(finetuned, reconstructed, "fine-tuned and reconstructed archives")
    records = {} if manifest is None else {r.name: r for r in manifest.entries}

    per_tensor: Dict[str, TensorError] = {}
    skipped: List[str] = []
    total_err = 0.0
    total_delta = 0.0
    for name in sorted(finetuned.names()):
        if name not in base or base[name].shape != finetuned[name].shape:
            skipped.append(name)
            continue
        target = finetuned[name].to_float32()
        err_sq = _norm_sq(reconstructed[name].to_float32().astype(np.float64) - target)
        delta_sq = _norm_sq(target.astype(np.float64) - base[name].to_float32())
        record = records.get(name)
        per_tensor[name] = TensorError(
            frobenius_error=math.sqrt(err_sq),
            relative_error=math.sqrt(err_sq) / max(math.sqrt(delta_sq), EPSILON),
            kind=record.kind if record is not None else "unchanged",
            predicted_sq_error=None if record is None else record.predicted_sq_error,
        )
        total_err += err_sq
        total_delta += delta_sq

    if skipped:
        logger.warning("error report skipped %d tensors without a base counterpart", len(skipped))
    return ReconstructionReport(
        per_tensor=per_tensor,
        global_relative_error=math.sqrt(total_err) / max(math.sqrt(total_delta), EPSILON),
        skipped=skipped,
    )


def diff_archives(a: TensorArchive, b: TensorArchive) -> ReconstructionReport:
    """||b - a||_F per tensor, relative to ||a||_F."""
    _require_aligned(a, b, "archives")
    per_tensor: Dict[str, TensorError] = {}
    total_err = 0.0
    total_ref = 0.0
    for name in sorted(a.names()):
        ref = a[name].to_float32().astype(np.float64)
        err_sq = _norm_sq(b[name].to_float32() - ref)
        ref_sq = _norm_sq(ref)
        per_tensor[name] = TensorError(
            frobenius_error=math.sqrt(err_sq),
            relative_error=math.sqrt(err_sq) / max(math.sqrt(ref_sq), EPSILON),
            kind="same" if err_sq == 0.0 else "differs",
        )
        total_err += err_sq
        total_ref += ref_sq
    return ReconstructionReport(
        per_tensor=per_tensor,
        global_relative_error=math.sqrt(total_err) / max(math.sqrt(total_ref), EPSILON),
    )
