"""
The ``.dqr`` container: magic, a JSON manifest, then one blob per entry.

See FORMAT.md for the normative byte layout. Everything is little-endian.
"""
from __future__ import annotations

import json
import logging
import math
import mmap
import os
import struct
import tempfile
import zlib
from pathlib import Path
from typing import Iterable, Iterator, List, Optional, Tuple, Union

import numpy as np
from pydantic import ValidationError

from deltapress import __version__
from deltapress.archive import DTYPES, TensorRecord
from deltapress.compressor import CompressedEntry, QuantizedDelta
from deltapress.errors import CorruptEntryError, FormatError, IoError
from deltapress.linalg import LowRankFactors
from deltapress.schemas import ContainerManifest, EntryRecord

logger = logging.getLogger(__name__)

PathLike = Union[str, os.PathLike]

MAGIC = b"DQR1"
FORMAT_VERSION = 1
PREFIX = struct.Struct("<4sQ")
FACTOR_NP = {"float16": np.dtype("<f2"), "float32": np.dtype("<f4")}
SIGN_KINDS = ("dqrelo", "onebit", "lowrank_onebit", "onebit_onebit")
FACTOR_KINDS = ("dqrelo", "lowrank", "lowrank_onebit")


def pack_signs(signs: np.ndarray) -> bytes:
    """Row-major, 8 signs per byte, MSB first, last byte zero-padded."""
    flat = np.asarray(signs, dtype=bool).ravel()
    if flat.size < 1:
        raise ValueError("pack_signs needs at least one sign")
    return np.packbits(flat, bitorder="big").tobytes()


def unpack_signs(data: bytes, n: int, m: int, *, name: Optional[str] = None) -> np.ndarray:
    count = n * m
    expected = math.ceil(count / 8)
    if len(data) != expected:
        raise CorruptEntryError(f"sign payload is {len(data)} bytes, expected {expected}", name)
    packed = np.frombuffer(data, dtype=np.uint8)
    bits = np.unpackbits(packed, bitorder="big")
    if bits[count:].any():
        raise CorruptEntryError("sign payload has non-zero padding bits", name)
    return bits[:count].astype(bool).reshape(n, m)


def encode_entry(entry: CompressedEntry) -> bytes:
    parts: List[bytes] = []
    if entry.quant is not None:
        parts.append(struct.pack("<f", entry.quant.alpha))
        parts.append(pack_signs(entry.quant.signs))
    if entry.quant2 is not None:
        parts.append(struct.pack("<f", entry.quant2.alpha))
        parts.append(pack_signs(entry.quant2.signs))
    if entry.factors is not None:
        dt = FACTOR_NP[entry.factor_dtype]
        for arr in (entry.factors.u, entry.factors.sigma, entry.factors.vt):
            parts.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    if entry.sparse_indices is not None:
        parts.append(np.ascontiguousarray(entry.sparse_indices, dtype="<u4").tobytes())
        parts.append(np.ascontiguousarray(entry.sparse_values, dtype="<f2").tobytes())
    if entry.raw is not None:
        parts.append(entry.raw.data.tobytes())
    blob = b"".join(parts)
    if len(blob) * 8 != entry.stored_bits:
        raise CorruptEntryError(
            f"encoded {len(blob) * 8} bits but accounting says {entry.stored_bits}", entry.name
        )
    return blob


def _take(blob: memoryview, cursor: int, nbytes: int, name: str) -> Tuple[bytes, int]:
    end = cursor + nbytes
    if end > len(blob):
        raise CorruptEntryError("payload shorter than its manifest record implies", name)
    return bytes(blob[cursor:end]), end


def _take_signs(blob: memoryview, cursor: int, n: int, m: int, name: str) -> Tuple[QuantizedDelta, int]:
    raw_alpha, cursor = _take(blob, cursor, 4, name)
    (alpha,) = struct.unpack("<f", raw_alpha)
    sign_bytes, cursor = _take(blob, cursor, math.ceil(n * m / 8), name)
    return QuantizedDelta(signs=unpack_signs(sign_bytes, n, m, name=name), alpha=alpha), cursor


def decode_entry(record: EntryRecord, blob: bytes) -> CompressedEntry:
    name = record.name
    shape = tuple(record.shape)
    numel = math.prod(shape)
    if record.shape_class == "vector":
        n, m = 1, numel
    else:
        n, m = shape[0], numel // shape[0]
    view = memoryview(blob)
    cursor = 0
    fields = {}

    if record.kind in SIGN_KINDS:
        fields["quant"], cursor = _take_signs(view, cursor, n, m, name)
    if record.kind == "onebit_onebit":
        fields["quant2"], cursor = _take_signs(view, cursor, n, m, name)
    if record.kind in FACTOR_KINDS:
        dt = FACTOR_NP.get(record.factor_dtype or "")
        r = record.rank
        if dt is None or r is None or r < 1:
            raise CorruptEntryError("low-rank record lacks rank or factor dtype", name)
        arrays = []
        for count, shape_of in ((n * r, (n, r)), (r, (r,)), (r * m, (r, m))):
            raw, cursor = _take(view, cursor, count * dt.itemsize, name)
            arrays.append(np.frombuffer(raw, dtype=dt).astype(np.float32).reshape(shape_of))
        fields["factors"] = LowRankFactors(*arrays)
        fields["factor_dtype"] = record.factor_dtype
    if record.kind == "sparse_vector":
        k = record.nnz
        if k is None or k < 0:
            raise CorruptEntryError("sparse record lacks nnz", name)
        raw_idx, cursor = _take(view, cursor, 4 * k, name)
        raw_val, cursor = _take(view, cursor, 2 * k, name)
        fields["sparse_indices"] = np.frombuffer(raw_idx, dtype="<u4").astype(np.uint32)
        fields["sparse_values"] = np.frombuffer(raw_val, dtype="<f2").astype(np.float16)
    if record.kind == "raw_passthrough":
        raw_dtype = record.raw_dtype or ""
        if raw_dtype not in DTYPES:
            raise CorruptEntryError(f"unsupported raw dtype {raw_dtype!r}", name)
        raw, cursor = _take(view, cursor, numel * DTYPES[raw_dtype].itemsize, name)
        fields["raw"] = TensorRecord(shape=shape, dtype=raw_dtype, data=np.frombuffer(raw, dtype=np.uint8))
    if cursor != len(blob):
        raise CorruptEntryError(f"{len(blob) - cursor} trailing payload bytes", name)

    return CompressedEntry(
        name=name,
        kind=record.kind,
        shape=shape,
        shape_class=record.shape_class,
        dtype=record.dtype,
        base_relative=record.base_relative,
        predicted_sq_error=record.predicted_sq_error,
        **fields,
    )


def _entry_record(entry: CompressedEntry, offset: Tuple[int, int], crc: int) -> EntryRecord:
    return EntryRecord(
        name=entry.name,
        shape=list(entry.shape),
        dtype=entry.dtype,
        shape_class=entry.shape_class,
        kind=entry.kind,
        alpha=None if entry.quant is None else entry.quant.alpha,
        alpha2=None if entry.quant2 is None else entry.quant2.alpha,
        rank=entry.rank,
        nnz=entry.nnz,
        factor_dtype=entry.factor_dtype if entry.factors is not None else None,
        raw_dtype=None if entry.raw is None else entry.raw.dtype,
        base_relative=entry.base_relative,
        stored_bits=entry.stored_bits,
        predicted_sq_error=entry.predicted_sq_error,
        offset=offset,
        crc32=crc,
    )


def build_manifest(
    entries: Iterable[CompressedEntry],
    *,
    method: str,
    base_fingerprint: str,
    source_precision_bits: int,
    model_params: int,
    config: Optional[dict] = None,
    removed: Iterable[str] = (),
) -> Tuple[ContainerManifest, List[bytes]]:
    records: List[EntryRecord] = []
    blobs: List[bytes] = []
    seen = set()
    offset = 0
    for entry in entries:
        if entry.name in seen:
            raise FormatError(f"duplicate entry name '{entry.name}'")
        seen.add(entry.name)
        blob = encode_entry(entry)
        records.append(_entry_record(entry, (offset, offset + len(blob)), zlib.crc32(blob)))
        blobs.append(blob)
        offset += len(blob)
    manifest = ContainerManifest(
        format_version=FORMAT_VERSION,
        tool_version=__version__,
        method=method,
        config=dict(config or {}),
        base_fingerprint=base_fingerprint,
        source_precision_bits=source_precision_bits,
        model_params=model_params,
        removed=list(removed),
        entries=records,
    )
    return manifest, blobs


def write_container(
    entries: Iterable[CompressedEntry],
    meta: dict,
    path: PathLike,
) -> ContainerManifest:
    """Serialize entries; ``meta`` holds the manifest fields other than entries."""
    path = Path(path)
    manifest, blobs = build_manifest(entries, **meta)
    manifest_bytes = manifest.model_dump_json().encode("utf-8")
    tmp_name = None
    try:
        fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
        with os.fdopen(fd, "wb") as handle:
            handle.write(PREFIX.pack(MAGIC, len(manifest_bytes)))
            handle.write(manifest_bytes)
            for blob in blobs:
                handle.write(blob)
        os.chmod(tmp_name, 0o644)
        os.replace(tmp_name, path)
    except OSError as exc:
        if tmp_name is not None and os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise IoError(f"cannot write {path}: {exc}") from exc
    logger.info(
        "wrote %d entries (%d payload bytes) to %s",
        len(manifest.entries),
        sum(len(b) for b in blobs),
        path,
    )
    return manifest


def _validate_offsets(manifest: ContainerManifest, payload_len: int) -> None:
    spans = []
    names = set()
    for record in manifest.entries:
        if record.name in names:
            raise FormatError(f"duplicate entry name '{record.name}'")
        names.add(record.name)
        start, end = record.offset
        if start < 0 or end < start:
            raise FormatError(f"{record.name}: invalid payload range [{start}, {end})")
        if end > payload_len:
            raise CorruptEntryError(
                f"payload range [{start}, {end}) runs past the {payload_len}-byte payload",
                record.name,
            )
        if (end - start) * 8 != record.stored_bits:
            raise CorruptEntryError(
                f"payload range holds {(end - start) * 8} bits, manifest says {record.stored_bits}",
                record.name,
            )
        spans.append((start, end, record.name))
    spans.sort()
    for (_, prev_end, prev_name), (start, _, name) in zip(spans, spans[1:]):
        if start < prev_end:
            raise FormatError(f"payload ranges of '{prev_name}' and '{name}' overlap")


class ContainerReader:
    """Memory-mapped reader; the manifest is parsed and checked on open."""

    def __init__(self, path: PathLike):
        self.path = Path(path)
        try:
            self._file = self.path.open("rb")
        except OSError as exc:
            raise IoError(f"cannot read {self.path}: {exc}") from exc
        try:
            self.manifest, self._payload_start = self._read_manifest()
        except BaseException:
            self._file.close()
            raise
        size = os.fstat(self._file.fileno()).st_size
        self._map = mmap.mmap(self._file.fileno(), 0, access=mmap.ACCESS_READ) if size else None
        self._size = size

    def _read_manifest(self) -> Tuple[ContainerManifest, int]:
        prefix = self._file.read(PREFIX.size)
        if len(prefix) < 4 or prefix[:4] != MAGIC:
            raise FormatError(f"{self.path}: not a .dqr container (bad magic)")
        if len(prefix) != PREFIX.size:
            raise FormatError(f"{self.path}: truncated container prefix")
        _, manifest_len = PREFIX.unpack(prefix)
        size = os.fstat(self._file.fileno()).st_size
        if manifest_len > size - PREFIX.size:
            raise FormatError(f"{self.path}: manifest length {manifest_len} exceeds file size")
        raw = self._file.read(manifest_len)
        try:
            manifest = ContainerManifest.model_validate_json(raw)
        except ValidationError as exc:
            raise FormatError(f"{self.path}: invalid manifest: {exc.errors()[0]['msg']}") from exc
        if manifest.format_version != FORMAT_VERSION:
            raise FormatError(
                f"{self.path}: unsupported container version {manifest.format_version}"
            )
        payload_start = PREFIX.size + manifest_len
        _validate_offsets(manifest, size - payload_start)
        return manifest, payload_start

    def blob(self, record: EntryRecord) -> bytes:
        start, end = record.offset
        if self._map is None:
            data = b""
        else:
            data = self._map[self._payload_start + start : self._payload_start + end]
        if zlib.crc32(data) != record.crc32:
            raise CorruptEntryError("payload checksum mismatch", record.name)
        return data

    def entry(self, record: EntryRecord) -> CompressedEntry:
        return decode_entry(record, self.blob(record))

    def entries(self) -> Iterator[CompressedEntry]:
        for record in self.manifest.entries:
            yield self.entry(record)

    def close(self) -> None:
        if self._map is not None:
            self._map.close()
            self._map = None
        self._file.close()

    def __enter__(self) -> "ContainerReader":
        return self

    def __exit__(self, exc_type=None, exc_value=None, traceback=None) -> None:
        self.close()


def read_container(path: PathLike) -> Tuple[ContainerManifest, Iterator[CompressedEntry]]:
    """Parse and validate the manifest now; decode entries lazily."""
    reader = ContainerReader(path)

    def _iterate() -> Iterator[CompressedEntry]:
        try:
            yield from reader.entries()
        finally:
            reader.close()

    return reader.manifest, _iterate()
