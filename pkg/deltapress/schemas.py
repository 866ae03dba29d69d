from __future__ import annotations

from fractions import Fraction
from typing import Any, Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_serializer, field_validator, model_validator

from deltapress.errors import ConfigError
from deltapress.utils import parse_fraction, parse_layer_range

Method = Literal[
    "dqrelo",
    "svd_only",
    "onebit_only",
    "magnitude_prune",
    "random_prune",
    "svd_then_svd",
    "svd_then_onebit",
    "onebit_then_onebit",
]
EntryKind = Literal[
    "dqrelo", "lowrank", "onebit", "lowrank_onebit", "onebit_onebit", "sparse_vector", "raw_passthrough"
]
ModuleGroup = Literal["mapping", "normalization", "attention", "mlp", "other"]
ShapeClassName = Literal["matrix", "vector", "reshaped-matrix"]

METHODS: Tuple[str, ...] = ("dqrelo", "svd_only", "onebit_only", "magnitude_prune", "random_prune")
# Two-stage variants that reorder or repeat the sign and low-rank stages of dqrelo.
STAGED_METHODS: Tuple[str, ...] = ("svd_then_svd", "svd_then_onebit", "onebit_then_onebit")
ALL_METHODS: Tuple[str, ...] = METHODS + STAGED_METHODS
SOURCE_BITS: Tuple[int, ...] = (16, 32)
MODULE_GROUPS: Tuple[str, ...] = ("mapping", "normalization", "attention", "mlp", "other")


class CompressionConfig(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, extra="forbid", frozen=True)

    method: Method = "dqrelo"
    rho1: Fraction = Fraction(1, 16)
    bits_b: int = 16
    vector_ratio_rho: Optional[Fraction] = None
    layer_range: Optional[Tuple[float, float]] = None
    include: List[str] = Field(default_factory=list)
    exclude: List[str] = Field(default_factory=list)
    modules: List[ModuleGroup] = Field(default_factory=list)
    seed: int = 0
    svd_strategy: Literal["auto", "full", "iterative"] = "auto"
    factor_dtype: Literal["float16", "float32"] = "float16"

    @field_validator("rho1", "vector_ratio_rho", mode="before")
    @classmethod
    def _parse_fraction(cls, value):
        if value is None:
            return None
        return parse_fraction(value)

    @field_validator("layer_range", mode="before")
    @classmethod
    def _parse_layer_range(cls, value):
        return parse_layer_range(value)

    @model_validator(mode="after")
    def _check_budget(self):
        if self.bits_b not in SOURCE_BITS:
            raise ConfigError(f"bits_b must be one of {list(SOURCE_BITS)}, got {self.bits_b}")
        if not 0 < self.rho1 < 1:
            raise ConfigError(f"rho1 must lie in (0, 1), got {self.rho1}")
        if self.total_rho >= 1:
            raise ConfigError(
                f"total ratio rho1 + 1/bits_b = {self.total_rho} is not below 1"
            )
        if self.vector_ratio_rho is not None and not 0 < self.vector_ratio_rho <= 1:
            raise ConfigError(f"vector_ratio_rho must lie in (0, 1], got {self.vector_ratio_rho}")
        if self.layer_range is not None:
            lo, hi = self.layer_range
            if not 0.0 <= lo < hi <= 1.0:
                raise ConfigError(f"layer_range must satisfy 0 <= lo < hi <= 1, got {lo}:{hi}")
        return self

    @field_serializer("rho1", "vector_ratio_rho")
    def _fraction_text(self, value: Optional[Fraction]):
        return None if value is None else str(value)

    @property
    def total_rho(self) -> Fraction:
        """rho1 + 1/b: the budget every method is held to."""
        return self.rho1 + Fraction(1, self.bits_b)

    @property
    def method_rho(self) -> Fraction:
        if self.method == "onebit_only":
            return Fraction(1, self.bits_b)
        if self.method == "onebit_then_onebit":
            return Fraction(2, self.bits_b)
        return self.total_rho

    @property
    def vector_rho(self) -> Fraction:
        if self.vector_ratio_rho is not None:
            return self.vector_ratio_rho
        return min(self.method_rho, Fraction(1))

    def echo(self) -> Dict[str, Any]:
        return self.model_dump(mode="json")


class TensorStats(BaseModel):
    numel: int
    mean_abs: float
    max_abs: float
    frobenius_norm: float
    mean_sv: Optional[float] = None
    entropy_bits: float


class DeltaStats(BaseModel):
    mean_abs: float
    mean_abs_tensor_avg: float
    mean_singular_value: Optional[float] = None
    entropy_bits: float
    num_bins: int
    num_tensors: int
    num_params: int
    per_tensor: Dict[str, TensorStats] = Field(default_factory=dict)


class RetentionResult(BaseModel):
    retention: float
    drop: float

    @property
    def drop_percent(self) -> float:
        return self.drop * 100.0


class StorageReport(BaseModel):
    achieved_rho: float
    projected_total: float
    stored_bits: int
    model_params: int
    bits_b: int
    num_models: int
    per_kind: Dict[str, int] = Field(default_factory=dict)


class TensorError(BaseModel):
    frobenius_error: float
    relative_error: float
    kind: str
    predicted_sq_error: Optional[float] = None


class ReconstructionReport(BaseModel):
    per_tensor: Dict[str, TensorError] = Field(default_factory=dict)
    global_relative_error: float
    skipped: List[str] = Field(default_factory=list)


class MethodResult(BaseModel):
    method: str
    achieved_rho: float
    global_relative_error: float
    rho1: Optional[str] = None


class EntryRecord(BaseModel):
    """Manifest line for one compressed tensor; offsets are payload-relative."""

    model_config = ConfigDict(extra="forbid")

    name: str
    shape: List[int]
    dtype: str
    shape_class: ShapeClassName
    kind: EntryKind
    alpha: Optional[float] = None
    alpha2: Optional[float] = None
    rank: Optional[int] = None
    nnz: Optional[int] = None
    factor_dtype: Optional[str] = None
    raw_dtype: Optional[str] = None
    base_relative: bool = True
    stored_bits: int
    predicted_sq_error: Optional[float] = None
    offset: Tuple[int, int]
    crc32: int

    @field_validator("shape")
    @classmethod
    def _check_shape(cls, value: List[int]) -> List[int]:
        if not value or any(d < 1 for d in value):
            raise ValueError(f"entry shape must be non-empty with every dim >= 1, got {value}")
        return value


class ContainerManifest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    format_version: int
    tool_version: str
    method: str
    config: Dict[str, Any] = Field(default_factory=dict)
    base_fingerprint: str
    source_precision_bits: int
    model_params: int
    removed: List[str] = Field(default_factory=list)
    entries: List[EntryRecord] = Field(default_factory=list)
