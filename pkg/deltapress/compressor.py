"""
Per-tensor delta compression.

``dqrelo`` approximates a delta matrix by a one-bit sign matrix scaled by the
mean absolute value, then spends the remaining budget on a truncated SVD of
what the sign matrix missed. The baselines share the same budget rule:
``svd_only`` gets rank for rho1 + 1/b, ``onebit_only`` is the sign stage alone,
and the two pruning methods keep ceil(rho * n * m) entries.

The staged variants keep each stage at its own cost (a sign stage 1/b, a
low-rank stage rho1) and only change which stage runs first or repeat one:
``svd_then_onebit`` signs the SVD residual, ``onebit_then_onebit`` signs the
sign residual, ``svd_then_svd`` spends 1/b on a first SVD instead of signs.

Vectors (biases, norm scales) always keep their top-|value| entries.
"""
from __future__ import annotations

import logging
import math
import warnings
import zlib
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Dict, Iterable, Optional, Tuple

import numpy as np

from deltapress.archive import ShapeClass, TensorRecord, WorkingView, shape_class_of
from deltapress.errors import (
    BudgetWarning,
    ConfigError,
    CorruptEntryError,
    NumericError,
    ShapeError,
)
from deltapress.linalg import LowRankFactors, assemble, frobenius_norm_sq, truncated_svd
from deltapress.schemas import CompressionConfig, StorageReport
from deltapress.utils import FractionLike, parse_fraction

logger = logging.getLogger(__name__)

ALPHA_BITS = 32
INDEX_BITS = 32
SPARSE_VALUE_BITS = 16
MAX_SPARSE_INDEX = 2**32 - 1

FACTOR_BITS = {"float16": 16, "float32": 32}
KIND_FIELDS = {
    "dqrelo": {"quant", "factors"},
    "onebit": {"quant"},
    "lowrank": {"factors"},
    "lowrank_onebit": {"quant", "factors"},
    "onebit_onebit": {"quant", "quant2"},
    "sparse_vector": {"sparse_indices", "sparse_values"},
    "raw_passthrough": {"raw"},
}


@dataclass(frozen=True, eq=False)
class QuantizedDelta:
    signs: np.ndarray
    alpha: float

    def dequantize(self) -> np.ndarray:
        alpha = np.float32(self.alpha)
        return np.where(self.signs, alpha, -alpha).astype(np.float32)


@dataclass(frozen=True, eq=False)
class CompressedEntry:
    name: str
    kind: str
    shape: Tuple[int, ...]
    shape_class: ShapeClass
    dtype: str
    quant: Optional[QuantizedDelta] = None
    quant2: Optional[QuantizedDelta] = None
    factors: Optional[LowRankFactors] = None
    sparse_indices: Optional[np.ndarray] = None
    sparse_values: Optional[np.ndarray] = None
    raw: Optional[TensorRecord] = None
    factor_dtype: Optional[str] = None
    base_relative: bool = True
    predicted_sq_error: Optional[float] = None

    def __post_init__(self):
        expected = KIND_FIELDS.get(self.kind)
        if expected is None:
            raise CorruptEntryError(f"unknown entry kind '{self.kind}'", self.name)
        present = {
            f for f in ("quant", "quant2", "factors", "sparse_indices", "sparse_values", "raw")
            if getattr(self, f) is not None
        }
        if present != expected:
            raise CorruptEntryError(
                f"kind '{self.kind}' needs fields {sorted(expected)}, has {sorted(present)}",
                self.name,
            )
        if self.factors is not None and self.factor_dtype not in FACTOR_BITS:
            raise CorruptEntryError(f"unsupported factor dtype {self.factor_dtype!r}", self.name)
        if not self.base_relative and self.kind != "raw_passthrough":
            raise CorruptEntryError("only raw passthrough entries may be absolute", self.name)

    @property
    def numel(self) -> int:
        return math.prod(self.shape)

    @property
    def matrix_shape(self) -> Tuple[int, int]:
        if self.shape_class == "vector" or len(self.shape) < 2:
            return 1, self.numel
        return self.shape[0], self.numel // self.shape[0]

    @property
    def rank(self) -> Optional[int]:
        return None if self.factors is None else self.factors.rank

    @property
    def nnz(self) -> Optional[int]:
        return None if self.sparse_indices is None else int(self.sparse_indices.size)

    @property
    def stored_bits(self) -> int:
        """Serialized payload size in bits, padding of the sign bytes included."""
        bits = 0
        if self.quant is not None:
            bits += ALPHA_BITS + 8 * math.ceil(self.numel / 8)
        if self.quant2 is not None:
            bits += ALPHA_BITS + 8 * math.ceil(self.numel / 8)
        if self.factors is not None:
            bits += self.factors.numel * FACTOR_BITS[self.factor_dtype]
        if self.sparse_indices is not None:
            bits += self.nnz * (INDEX_BITS + SPARSE_VALUE_BITS)
        if self.raw is not None:
            bits += 8 * self.raw.nbytes
        return bits


def _require_finite(delta: np.ndarray) -> None:
    if not np.isfinite(delta).all():
        raise NumericError("delta has non-finite entries")


def sign_quantize(delta: np.ndarray) -> QuantizedDelta:
    """alpha * Sign(delta) with Sign(0) = -1 and alpha = mean |delta|."""
    delta = np.asarray(delta, dtype=np.float32)
    _require_finite(delta)
    alpha = float(np.float32(np.mean(np.abs(delta), dtype=np.float64)))
    return QuantizedDelta(signs=delta > 0, alpha=alpha)


def residual(delta: np.ndarray, quant: QuantizedDelta) -> np.ndarray:
    delta = np.asarray(delta, dtype=np.float32)
    if delta.shape != quant.signs.shape:
        raise ShapeError(f"residual: delta {delta.shape} vs signs {quant.signs.shape}")
    return delta - quant.dequantize()


def rank_for_budget(n: int, m: int, rho1: FractionLike) -> int:
    """r = ceil(n * m * rho1 / (n + m)), clamped to [1, min(n, m)]."""
    rho1 = parse_fraction(rho1)
    if n < 1 or m < 1:
        raise ConfigError(f"matrix dims must be positive, got {n}x{m}")
    if not 0 < rho1 < 1:
        raise ConfigError(f"rho1 must lie in (0, 1), got {rho1}")
    raw = math.ceil(Fraction(n * m) * rho1 / (n + m))
    rank = min(max(raw, 1), min(n, m))
    if rank != raw:
        warnings.warn(
            f"rank {raw} for a {n}x{m} matrix at rho1={rho1} clamped to {rank}",
            BudgetWarning,
            stacklevel=2,
        )
        logger.debug("clamped rank %d -> %d for %dx%d", raw, rank, n, m)
    return rank


def _store_factors(factors: LowRankFactors, factor_dtype: str) -> LowRankFactors:
    """Round factors through their storage dtype so memory matches disk."""
    if factor_dtype == "float32":
        return factors
    stored = factors.astype(np.float16)
    if not all(np.isfinite(a).all() for a in (stored.u, stored.sigma, stored.vt)):
        raise NumericError("low-rank factors overflow float16")
    return stored.astype(np.float32)


def _tail_energy(matrix: np.ndarray, factors: LowRankFactors) -> float:
    kept = float(np.sum(np.square(factors.sigma, dtype=np.float64)))
    return max(frobenius_norm_sq(matrix) - kept, 0.0)


def _tensor_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(name.encode("utf-8"))])


def _top_k_indices(values: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest |value|, ties to the lower index, sorted ascending."""
    order = np.argsort(-np.abs(values), kind="stable")
    return np.sort(order[:k])


def _sparse_fields(flat: np.ndarray, kept: np.ndarray) -> Dict[str, object]:
    if flat.size - 1 > MAX_SPARSE_INDEX:
        raise ConfigError(f"tensor of {flat.size} elements exceeds uint32 sparse indices")
    values = flat[kept].astype(np.float16)
    if not np.isfinite(values).all():
        raise NumericError("kept delta values overflow float16")
    dropped = np.ones(flat.size, dtype=bool)
    dropped[kept] = False
    return {
        "sparse_indices": kept.astype(np.uint32),
        "sparse_values": values,
        "predicted_sq_error": float(np.sum(np.square(flat[dropped], dtype=np.float64))),
    }


def _compress_dqrelo(delta: np.ndarray, cfg: CompressionConfig, name: str) -> Dict[str, object]:
    n, m = delta.shape
    quant = sign_quantize(delta)
    resid = residual(delta, quant)
    factors = truncated_svd(resid, rank_for_budget(n, m, cfg.rho1), strategy=cfg.svd_strategy)
    return {
        "kind": "dqrelo",
        "quant": quant,
        "factors": _store_factors(factors, cfg.factor_dtype),
        "factor_dtype": cfg.factor_dtype,
        "predicted_sq_error": _tail_energy(resid, factors),
    }


def _compress_svd_only(delta: np.ndarray, cfg: CompressionConfig, name: str) -> Dict[str, object]:
    n, m = delta.shape
    factors = truncated_svd(delta, rank_for_budget(n, m, cfg.total_rho), strategy=cfg.svd_strategy)
    return {
        "kind": "lowrank",
        "factors": _store_factors(factors, cfg.factor_dtype),
        "factor_dtype": cfg.factor_dtype,
        "predicted_sq_error": _tail_energy(delta, factors),
    }


def _compress_onebit(delta: np.ndarray, cfg: CompressionConfig, name: str) -> Dict[str, object]:
    quant = sign_quantize(delta)
    return {
        "kind": "onebit",
        "quant": quant,
        "predicted_sq_error": frobenius_norm_sq(residual(delta, quant)),
    }


def _compress_magnitude_prune(delta: np.ndarray, cfg: CompressionConfig, name: str) -> Dict[str, object]:
    flat = delta.ravel()
    k = min(math.ceil(cfg.method_rho * flat.size), flat.size)
    return {"kind": "sparse_vector", **_sparse_fields(flat, _top_k_indices(flat, k))}


def _compress_random_prune(delta: np.ndarray, cfg: CompressionConfig, name: str) -> Dict[str, object]:
    flat = delta.ravel()
    k = min(math.ceil(cfg.method_rho * flat.size), flat.size)
    kept = np.sort(_tensor_rng(cfg.seed, name).choice(flat.size, size=k, replace=False))
    return {"kind": "sparse_vector", **_sparse_fields(flat, kept)}


def _stack(first: LowRankFactors, second: LowRankFactors) -> LowRankFactors:
    return LowRankFactors(
        u=np.hstack([first.u, second.u]),
        sigma=np.concatenate([first.sigma, second.sigma]),
        vt=np.vstack([first.vt, second.vt]),
    )


def _compress_svd_then_svd(delta: np.ndarray, cfg: CompressionConfig, name: str) -> Dict[str, object]:
    """Rank for 1/b, then rank for rho1 on what is left, stored as one factor set."""
    n, m = delta.shape
    r1 = rank_for_budget(n, m, Fraction(1, cfg.bits_b))
    factors = _store_factors(truncated_svd(delta, r1, strategy=cfg.svd_strategy), cfg.factor_dtype)
    r2 = min(rank_for_budget(n, m, cfg.rho1), min(n, m) - r1)
    if r2 >= 1:
        resid = delta - assemble(factors)
        second = truncated_svd(resid, r2, strategy=cfg.svd_strategy)
        factors = _stack(factors, _store_factors(second, cfg.factor_dtype))
    return {
        "kind": "lowrank",
        "factors": factors,
        "factor_dtype": cfg.factor_dtype,
        "predicted_sq_error": frobenius_norm_sq(delta - assemble(factors)),
    }


def _compress_svd_then_onebit(delta: np.ndarray, cfg: CompressionConfig, name: str) -> Dict[str, object]:
    n, m = delta.shape
    first = truncated_svd(delta, rank_for_budget(n, m, cfg.rho1), strategy=cfg.svd_strategy)
    factors = _store_factors(first, cfg.factor_dtype)
    resid = delta - assemble(factors)
    quant = sign_quantize(resid)
    return {
        "kind": "lowrank_onebit",
        "quant": quant,
        "factors": factors,
        "factor_dtype": cfg.factor_dtype,
        "predicted_sq_error": frobenius_norm_sq(residual(resid, quant)),
    }


def _compress_onebit_then_onebit(delta: np.ndarray, cfg: CompressionConfig, name: str) -> Dict[str, object]:
    first = sign_quantize(delta)
    resid = residual(delta, first)
    second = sign_quantize(resid)
    return {
        "kind": "onebit_onebit",
        "quant": first,
        "quant2": second,
        "predicted_sq_error": frobenius_norm_sq(residual(resid, second)),
    }


MATRIX_COMPRESSORS: Dict[str, Callable[[np.ndarray, CompressionConfig, str], Dict[str, object]]] = {
    "dqrelo": _compress_dqrelo,
    "svd_only": _compress_svd_only,
    "onebit_only": _compress_onebit,
    "magnitude_prune": _compress_magnitude_prune,
    "random_prune": _compress_random_prune,
    "svd_then_svd": _compress_svd_then_svd,
    "svd_then_onebit": _compress_svd_then_onebit,
    "onebit_then_onebit": _compress_onebit_then_onebit,
}


def compress_matrix(
    delta: np.ndarray,
    cfg: CompressionConfig,
    *,
    name: str = "",
    original_shape: Optional[Tuple[int, ...]] = None,
    dtype: str = "float32",
) -> CompressedEntry:
    delta = np.asarray(delta, dtype=np.float32)
    if delta.ndim != 2:
        raise ShapeError(f"compress_matrix needs a matrix, got shape {delta.shape}")
    _require_finite(delta)
    compressor = MATRIX_COMPRESSORS.get(cfg.method)
    if compressor is None:
        raise ConfigError(f"Unsupported method: '{cfg.method}'. Supported: {list(MATRIX_COMPRESSORS)}")
    shape = tuple(original_shape) if original_shape is not None else delta.shape
    fields = compressor(delta, cfg, name)
    entry = CompressedEntry(
        name=name,
        shape=shape,
        shape_class="matrix" if len(shape) == 2 else "reshaped-matrix",
        dtype=dtype,
        **fields,
    )
    logger.debug("%s: %s %s rank=%s bits=%d", name, entry.kind, delta.shape, entry.rank, entry.stored_bits)
    return entry


def compress_vector(
    delta: np.ndarray,
    cfg: CompressionConfig,
    *,
    name: str = "",
    dtype: str = "float32",
) -> CompressedEntry:
    """Keep ceil(rho * len) entries of largest magnitude as (index, float16) pairs."""
    flat = np.asarray(delta, dtype=np.float32).ravel()
    if flat.size < 1:
        raise ShapeError("compress_vector needs at least one element")
    _require_finite(flat)
    k = min(math.ceil(cfg.vector_rho * flat.size), flat.size)
    return CompressedEntry(
        name=name,
        kind="sparse_vector",
        shape=(int(flat.size),),
        shape_class="vector",
        dtype=dtype,
        **_sparse_fields(flat, _top_k_indices(flat, k)),
    )


def compress_view(view: WorkingView, cfg: CompressionConfig, *, name: str, dtype: str) -> CompressedEntry:
    if view.is_matrix:
        return compress_matrix(view.values, cfg, name=name, original_shape=view.original_shape, dtype=dtype)
    return compress_vector(view.values, cfg, name=name, dtype=dtype)


RAW_DELTA_DTYPES = {16: "float16", 32: "float32"}


def raw_delta_dtype(bits_b: int) -> str:
    try:
        return RAW_DELTA_DTYPES[bits_b]
    except KeyError:
        raise ConfigError(f"Unsupported bits_b: {bits_b}. Supported: {list(RAW_DELTA_DTYPES)}") from None


def passthrough_entry(view: WorkingView, bits_b: int, *, name: str, dtype: str) -> CompressedEntry:
    """Uncompressed delta stored at b bits per element."""
    record = TensorRecord.from_array(view.restore(), raw_delta_dtype(bits_b))
    return CompressedEntry(
        name=name,
        kind="raw_passthrough",
        shape=view.original_shape,
        shape_class=view.shape_class,
        dtype=dtype,
        raw=record,
        predicted_sq_error=frobenius_norm_sq(record.to_float32() - view.restore()),
    )


def absolute_entry(record: TensorRecord, *, name: str) -> CompressedEntry:
    """A fine-tuned tensor with no base counterpart, kept verbatim."""
    return CompressedEntry(
        name=name,
        kind="raw_passthrough",
        shape=record.shape,
        shape_class=shape_class_of(record.shape),
        dtype=record.dtype,
        raw=record,
        base_relative=False,
        predicted_sq_error=0.0,
    )


def decompress_entry(entry: CompressedEntry, shape: Optional[Tuple[int, ...]] = None) -> np.ndarray:
    """Dense float32 delta (or absolute tensor) in the entry's original shape."""
    if shape is not None and tuple(shape) != tuple(entry.shape):
        raise ShapeError(f"{entry.name}: entry shape {list(entry.shape)} vs requested {list(shape)}")
    n, m = entry.matrix_shape

    if entry.kind == "sparse_vector":
        dense = np.zeros(entry.numel, dtype=np.float32)
        indices = entry.sparse_indices.astype(np.int64)
        if indices.size and indices.max() >= entry.numel:
            raise CorruptEntryError("sparse index out of range", entry.name)
        dense[indices] = entry.sparse_values.astype(np.float32)
        return dense.reshape(entry.shape)
    if entry.kind == "raw_passthrough":
        if entry.raw.shape != tuple(entry.shape):
            raise CorruptEntryError(f"raw tensor shape {list(entry.raw.shape)} vs {list(entry.shape)}", entry.name)
        return entry.raw.to_float32()

    dense = np.zeros((n, m), dtype=np.float32)
    if entry.quant is not None:
        if entry.quant.signs.size != n * m:
            raise CorruptEntryError(f"sign matrix holds {entry.quant.signs.size} bits, expected {n * m}", entry.name)
        dense += entry.quant.dequantize().reshape(n, m)
    if entry.quant2 is not None:
        if entry.quant2.signs.size != n * m:
            raise CorruptEntryError(f"second sign matrix holds {entry.quant2.signs.size} bits, expected {n * m}", entry.name)
        dense += entry.quant2.dequantize().reshape(n, m)
    if entry.factors is not None:
        if entry.factors.shape != (n, m):
            raise CorruptEntryError(f"factors assemble to {entry.factors.shape}, expected {(n, m)}", entry.name)
        dense += assemble(entry.factors)
    return dense.reshape(entry.shape)


def storage_accounting(
    entries: Iterable[CompressedEntry],
    model_params: int,
    bits_b: int,
    K: int = 1,
) -> StorageReport:
    """achieved rho = stored bits / (M * b); total storage (1 + rho K) M."""
    stored = 0
    per_kind: Dict[str, int] = {}
    for entry in entries:
        stored += entry.stored_bits
        per_kind[entry.kind] = per_kind.get(entry.kind, 0) + 1
    achieved = stored / (model_params * bits_b) if model_params > 0 else 0.0
    return StorageReport(
        achieved_rho=achieved,
        projected_total=(1.0 + achieved * K) * model_params,
        stored_bits=stored,
        model_params=model_params,
        bits_b=bits_b,
        num_models=K,
        per_kind=dict(sorted(per_kind.items())),
    )
