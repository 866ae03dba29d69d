"""
Tensor archives: the single-file named-tensor checkpoint format.

Layout (little-endian): an 8-byte unsigned header length N, N bytes of UTF-8
JSON mapping each tensor name to ``{dtype, shape, data_offsets}`` (plus an
optional ``__metadata__`` string map), then the raw payload. This is the
layout the safetensors ecosystem writes, restricted to F16/BF16/F32.

All numerics run on float32 working views; records keep their storage bytes.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, Literal, Optional, Tuple, Union

import numpy as np

from deltapress.errors import (
    CorruptTensorError,
    FormatError,
    IoError,
    NumericError,
    UnsupportedDtypeError,
)

logger = logging.getLogger(__name__)

PathLike = Union[str, os.PathLike]
ShapeClass = Literal["matrix", "vector", "reshaped-matrix"]

HEADER_PREFIX = 8
HEADER_ALIGN = 8
METADATA_KEY = "__metadata__"
FINGERPRINT_SAMPLE_BYTES = 1024


@dataclass(frozen=True)
class DtypeInfo:
    name: str
    code: str
    itemsize: int
    storage: np.dtype


DTYPES: Dict[str, DtypeInfo] = {
    "float16": DtypeInfo("float16", "F16", 2, np.dtype("<f2")),
    "bfloat16": DtypeInfo("bfloat16", "BF16", 2, np.dtype("<u2")),
    "float32": DtypeInfo("float32", "F32", 4, np.dtype("<f4")),
}
DTYPE_BY_CODE = {info.code: info for info in DTYPES.values()}


def dtype_info(dtype: str) -> DtypeInfo:
    info = DTYPES.get(dtype)
    if info is None:
        raise UnsupportedDtypeError(
            f"Unsupported dtype: '{dtype}'. Supported: {list(DTYPES)}"
        )
    return info


def bf16_to_float32(raw: np.ndarray) -> np.ndarray:
    return (raw.astype(np.uint32) << 16).view(np.float32)


def float32_to_bf16(values: np.ndarray) -> np.ndarray:
    """Round-to-nearest-even truncation of float32 to the upper 16 bits."""
    bits = np.ascontiguousarray(values, dtype=np.float32).view(np.uint32)
    rounding = ((bits >> 16) & 1) + np.uint32(0x7FFF)
    out = ((bits + rounding) >> 16).astype(np.uint16)
    nan = np.isnan(values)
    if nan.any():
        out[nan] = ((bits[nan] >> 16) | 0x0040).astype(np.uint16)
    return out


@dataclass(frozen=True, eq=False)
class TensorRecord:
    shape: Tuple[int, ...]
    dtype: str
    data: np.ndarray

    def __post_init__(self):
        shape = tuple(int(d) for d in self.shape)
        if not shape or any(d < 1 for d in shape):
            raise FormatError(f"tensor shape must be non-empty with dims >= 1, got {list(shape)}")
        info = dtype_info(self.dtype)
        buf = np.frombuffer(self.data, dtype=np.uint8) if not isinstance(self.data, np.ndarray) else self.data
        buf = buf.reshape(-1).view(np.uint8)
        expected = math.prod(shape) * info.itemsize
        if buf.nbytes != expected:
            raise CorruptTensorError(
                f"shape {list(shape)} of {self.dtype} needs {expected} bytes, found {buf.nbytes}"
            )
        if buf.flags.writeable:
            buf = buf.copy()
            buf.flags.writeable = False
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "data", buf)

    @property
    def numel(self) -> int:
        return math.prod(self.shape)

    @property
    def nbytes(self) -> int:
        return self.data.nbytes

    def storage_array(self) -> np.ndarray:
        return self.data.view(DTYPES[self.dtype].storage).reshape(self.shape)

    def to_float32(self) -> np.ndarray:
        raw = self.storage_array()
        if self.dtype == "bfloat16":
            return bf16_to_float32(raw)
        return raw.astype(np.float32)

    def has_nan(self) -> bool:
        return bool(np.isnan(self.to_float32()).any())

    def same_bytes(self, other: "TensorRecord") -> bool:
        return (
            self.shape == other.shape
            and self.dtype == other.dtype
            and np.array_equal(self.data, other.data)
        )

    @classmethod
    def from_array(cls, values: np.ndarray, dtype: str = "float32") -> "TensorRecord":
        """Downcast float32 working values into a record of the given storage dtype."""
        info = dtype_info(dtype)
        values = np.asarray(values, dtype=np.float32)
        if values.ndim == 0:
            values = values.reshape(1)
        if dtype == "bfloat16":
            stored = float32_to_bf16(values)
            check = bf16_to_float32(stored)
        else:
            stored = values.astype(info.storage)
            check = stored
        if dtype != "float32" and not np.isfinite(check).all() and np.isfinite(values).all():
            raise NumericError(f"values overflow {dtype}")
        raw = np.ascontiguousarray(stored).view(np.uint8).reshape(-1)
        return cls(shape=values.shape, dtype=dtype, data=raw)


@dataclass(frozen=True)
class WorkingView:
    """Float32 view of a tensor as a matrix or a vector."""

    values: np.ndarray
    shape_class: ShapeClass
    original_shape: Tuple[int, ...]

    @property
    def reshaped(self) -> bool:
        return self.shape_class == "reshaped-matrix"

    @property
    def is_matrix(self) -> bool:
        return self.shape_class != "vector"

    def restore(self, values: Optional[np.ndarray] = None) -> np.ndarray:
        values = self.values if values is None else values
        return np.asarray(values).reshape(self.original_shape)


def shape_class_of(shape: Tuple[int, ...]) -> ShapeClass:
    if len(shape) <= 1:
        return "vector"
    return "matrix" if len(shape) == 2 else "reshaped-matrix"


def working_view(values: np.ndarray) -> WorkingView:
    values = np.asarray(values, dtype=np.float32)
    if values.ndim == 0:
        values = values.reshape(1)
    shape = tuple(values.shape)
    shape_class = shape_class_of(shape)
    if shape_class == "reshaped-matrix":
        return WorkingView(values.reshape(shape[0], math.prod(shape[1:])), shape_class, shape)
    return WorkingView(values, shape_class, shape)


def as_matrix(record: TensorRecord) -> WorkingView:
    """Upcast a record to float32; rank > 2 folds trailing dims into columns."""
    return working_view(record.to_float32())


@dataclass
class TensorArchive:
    entries: Dict[str, TensorRecord] = field(default_factory=dict)
    metadata: Dict[str, str] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def __getitem__(self, name: str) -> TensorRecord:
        return self.entries[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.entries)

    def names(self) -> list[str]:
        return list(self.entries)

    def items(self):
        return self.entries.items()

    @property
    def num_params(self) -> int:
        return sum(r.numel for r in self.entries.values())

    @property
    def source_precision_bits(self) -> int:
        if any(r.dtype == "float32" for r in self.entries.values()):
            return 32
        return 16

    def fingerprint(self) -> str:
        """Hash of the header plus a leading sample of every tensor's bytes."""
        hasher = hashlib.sha256()
        header = [[name, r.dtype, list(r.shape)] for name, r in self.entries.items()]
        hasher.update(json.dumps(header, separators=(",", ":")).encode("utf-8"))
        for record in self.entries.values():
            hasher.update(record.data[:FINGERPRINT_SAMPLE_BYTES].tobytes())
        return hasher.hexdigest()[:16]

    def with_entries(self, entries: Dict[str, TensorRecord]) -> "TensorArchive":
        return TensorArchive(entries=dict(entries), metadata=dict(self.metadata))


def _parse_header(header: dict, payload_len: int) -> Tuple[Dict[str, str], list]:
    metadata = header.pop(METADATA_KEY, None) or {}
    if not isinstance(metadata, dict) or not all(
        isinstance(k, str) and isinstance(v, str) for k, v in metadata.items()
    ):
        raise FormatError("__metadata__ must map strings to strings")

    layout = []
    for name, info in header.items():
        if not isinstance(info, dict):
            raise FormatError(f"header entry for '{name}' is not an object")
        code = info.get("dtype")
        shape = info.get("shape")
        offsets = info.get("data_offsets")
        if not isinstance(code, str):
            raise FormatError(f"missing dtype for '{name}'")
        dtype = DTYPE_BY_CODE.get(code)
        if dtype is None:
            raise UnsupportedDtypeError(
                f"tensor '{name}' has unsupported dtype '{code}'. Supported: {list(DTYPE_BY_CODE)}"
            )
        if not isinstance(shape, list) or not all(
            isinstance(d, int) and not isinstance(d, bool) for d in shape
        ):
            raise FormatError(f"invalid shape for '{name}'")
        if not shape or any(d < 1 for d in shape):
            raise FormatError(f"tensor '{name}' has unsupported shape {shape}")
        if (
            not isinstance(offsets, list)
            or len(offsets) != 2
            or not all(isinstance(o, int) and not isinstance(o, bool) for o in offsets)
        ):
            raise FormatError(f"invalid data_offsets for '{name}'")
        start, end = offsets
        if start < 0 or end < start or end > payload_len:
            raise CorruptTensorError(
                f"tensor '{name}' offsets [{start}, {end}) fall outside a payload of {payload_len} bytes"
            )
        expected = math.prod(shape) * dtype.itemsize
        if end - start != expected:
            raise CorruptTensorError(
                f"tensor '{name}' declares shape {shape} ({expected} bytes) but spans {end - start} bytes"
            )
        layout.append((name, dtype.name, tuple(shape), start, end))
    return metadata, layout


def load_archive(path: PathLike, *, validate: bool = False, lazy: bool = True) -> TensorArchive:
    """Read a tensor archive; with ``lazy`` the payload stays memory-mapped."""
    path = Path(path)
    try:
        file_size = path.stat().st_size
        with path.open("rb") as handle:
            prefix = handle.read(HEADER_PREFIX)
            if len(prefix) != HEADER_PREFIX:
                raise FormatError(f"{path}: too short for a header length prefix")
            (header_len,) = struct.unpack("<Q", prefix)
            if header_len > file_size - HEADER_PREFIX:
                raise FormatError(f"{path}: header length {header_len} exceeds file size")
            header_bytes = handle.read(header_len)
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc

    try:
        header = json.loads(header_bytes.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: invalid header JSON") from exc
    if not isinstance(header, dict):
        raise FormatError(f"{path}: header is not a JSON object")

    data_start = HEADER_PREFIX + header_len
    payload_len = file_size - data_start
    metadata, layout = _parse_header(header, payload_len)

    if lazy and payload_len > 0:
        payload = np.memmap(path, dtype=np.uint8, mode="r", offset=data_start, shape=(payload_len,))
    else:
        try:
            with path.open("rb") as handle:
                handle.seek(data_start)
                payload = np.frombuffer(handle.read(), dtype=np.uint8)
        except OSError as exc:
            raise IoError(f"cannot read {path}: {exc}") from exc

    entries: Dict[str, TensorRecord] = {}
    for name, dtype, shape, start, end in layout:
        record = TensorRecord(shape=shape, dtype=dtype, data=payload[start:end])
        if validate and record.has_nan():
            raise CorruptTensorError(f"tensor '{name}' contains NaN")
        entries[name] = record
    logger.info("loaded %d tensors from %s", len(entries), path)
    return TensorArchive(entries=entries, metadata=metadata)


def encode_header(archive: TensorArchive) -> bytes:
    header: Dict[str, object] = {}
    if archive.metadata:
        header[METADATA_KEY] = dict(archive.metadata)
    offset = 0
    for name, record in archive.entries.items():
        header[name] = {
            "dtype": DTYPES[record.dtype].code,
            "shape": list(record.shape),
            "data_offsets": [offset, offset + record.nbytes],
        }
        offset += record.nbytes
    raw = json.dumps(header, separators=(",", ":")).encode("utf-8")
    return raw + b" " * (-len(raw) % HEADER_ALIGN)


def save_archive(archive: TensorArchive, path: PathLike) -> None:
    """Write atomically (temp file + rename) so mapped readers of ``path`` survive."""
    path = Path(path)
    header = encode_header(archive)
    tmp_name = None
    try:
        fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent or ".")
        with os.fdopen(fd, "wb") as handle:
            handle.write(struct.pack("<Q", len(header)))
            handle.write(header)
            for record in archive.entries.values():
                handle.write(record.data.tobytes())
        os.chmod(tmp_name, 0o644)
        os.replace(tmp_name, path)
    except OSError as exc:
        if tmp_name is not None and os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise IoError(f"cannot write {path}: {exc}") from exc
    logger.info("wrote %d tensors to %s", len(archive), path)
