"""
Numerical kernels: Frobenius norms, SVD with an accuracy contract, assembly.

The contract is what matters, not the algorithm: for a rank-r truncation the
squared Frobenius error equals the discarded squared singular values within
1e-4 relative. Decompositions run in float64; factors come back in float32.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Literal

import numpy as np
import scipy.linalg
from scipy.sparse.linalg import ArpackNoConvergence, svds

from deltapress.errors import ConvergenceError, NumericError, RankError, ShapeError

logger = logging.getLogger(__name__)

SvdStrategy = Literal["auto", "full", "iterative"]

FULL_SVD_LIMIT = 512
CONVERGENCE_TOL = 1e-6
MAX_ITERATIONS = 1000
START_VECTOR_SEED = 0


@dataclass(frozen=True)
class SvdResult:
    u: np.ndarray
    singular_values: np.ndarray
    vt: np.ndarray


def _check_factor_shapes(u: np.ndarray, sigma: np.ndarray, vt: np.ndarray) -> None:
    if u.ndim != 2 or sigma.ndim != 1 or vt.ndim != 2:
        raise ShapeError(
            f"factors must be (n, r), (r,), (r, m); got {u.shape}, {sigma.shape}, {vt.shape}"
        )
    r = sigma.shape[0]
    if u.shape[1] != r or vt.shape[0] != r:
        raise ShapeError(f"factor ranks disagree: U {u.shape}, sigma {sigma.shape}, Vt {vt.shape}")


@dataclass(frozen=True)
class LowRankFactors:
    u: np.ndarray
    sigma: np.ndarray
    vt: np.ndarray

    def __post_init__(self):
        _check_factor_shapes(self.u, self.sigma, self.vt)
        if self.rank < 1:
            raise RankError("low-rank factors need rank >= 1")

    @property
    def rank(self) -> int:
        return int(self.sigma.shape[0])

    @property
    def shape(self) -> tuple[int, int]:
        return int(self.u.shape[0]), int(self.vt.shape[1])

    @property
    def numel(self) -> int:
        n, m = self.shape
        return self.rank * (n + m + 1)

    def astype(self, dtype) -> "LowRankFactors":
        return LowRankFactors(
            self.u.astype(dtype), self.sigma.astype(dtype), self.vt.astype(dtype)
        )


def _require_finite(matrix: np.ndarray) -> None:
    if not np.isfinite(matrix).all():
        raise NumericError("matrix has non-finite entries")


def frobenius_norm_sq(matrix: np.ndarray) -> float:
    """Sum of squared entries, accumulated in float64."""
    arr = np.asarray(matrix)
    _require_finite(arr)
    return float(np.sum(np.square(arr, dtype=np.float64)))


def singular_values(matrix: np.ndarray) -> np.ndarray:
    arr = np.asarray(matrix, dtype=np.float64)
    _require_finite(arr)
    try:
        return scipy.linalg.svdvals(arr, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise ConvergenceError("singular value computation failed", iterations=0) from exc


def full_svd(matrix: np.ndarray) -> SvdResult:
    arr = np.asarray(matrix, dtype=np.float64)
    _require_finite(arr)
    try:
        u, s, vt = scipy.linalg.svd(arr, full_matrices=False, check_finite=False, lapack_driver="gesdd")
    except np.linalg.LinAlgError:
        logger.debug("gesdd failed on %s, retrying with gesvd", arr.shape)
        try:
            u, s, vt = scipy.linalg.svd(arr, full_matrices=False, check_finite=False, lapack_driver="gesvd")
        except np.linalg.LinAlgError as exc:
            raise ConvergenceError("dense SVD failed", iterations=0) from exc
    return SvdResult(u=u, singular_values=s, vt=vt)


def _zero_factors(n: int, m: int, r: int) -> LowRankFactors:
    return LowRankFactors(
        u=np.eye(n, r, dtype=np.float32),
        sigma=np.zeros(r, dtype=np.float32),
        vt=np.eye(r, m, dtype=np.float32),
    )


def _iterative_top_r(arr: np.ndarray, r: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    rng = np.random.default_rng(START_VECTOR_SEED)
    v0 = rng.standard_normal(min(arr.shape))
    try:
        u, s, vt = svds(arr, k=r, tol=CONVERGENCE_TOL, maxiter=MAX_ITERATIONS, v0=v0, solver="arpack")
    except ArpackNoConvergence as exc:
        raise ConvergenceError("iterative top-r SVD did not converge", iterations=MAX_ITERATIONS) from exc
    order = np.argsort(s)[::-1]
    return u[:, order], s[order], vt[order, :]


def pick_strategy(n: int, m: int, r: int, strategy: SvdStrategy = "auto") -> str:
    if strategy != "auto":
        return strategy
    k = min(n, m)
    if k <= FULL_SVD_LIMIT or r >= k:
        return "full"
    return "iterative"


def truncated_svd(matrix: np.ndarray, r: int, *, strategy: SvdStrategy = "auto") -> LowRankFactors:
    """Top-r singular triples of ``matrix``."""
    arr = np.asarray(matrix, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"truncated_svd needs a matrix, got shape {arr.shape}")
    n, m = arr.shape
    if not isinstance(r, (int, np.integer)) or r < 1 or r > min(n, m):
        raise RankError(f"rank {r} outside [1, {min(n, m)}] for a {n}x{m} matrix")
    r = int(r)
    _require_finite(arr)
    if not arr.any():
        return _zero_factors(n, m, r)

    chosen = pick_strategy(n, m, r, strategy)
    if chosen == "iterative" and r >= min(n, m):
        chosen = "full"
    logger.debug("truncated_svd %dx%d r=%d strategy=%s", n, m, r, chosen)
    if chosen == "full":
        res = full_svd(arr)
        u, s, vt = res.u[:, :r], res.singular_values[:r], res.vt[:r, :]
    elif chosen == "iterative":
        u, s, vt = _iterative_top_r(arr, r)
    else:
        raise ValueError(f"Unsupported SVD strategy: '{strategy}'")
    return LowRankFactors(
        u=np.ascontiguousarray(u, dtype=np.float32),
        sigma=np.ascontiguousarray(s, dtype=np.float32),
        vt=np.ascontiguousarray(vt, dtype=np.float32),
    )


def assemble(factors: LowRankFactors) -> np.ndarray:
    """U_r diag(sigma_r) Vt_r as a float32 matrix."""
    u, sigma, vt = factors.u, factors.sigma, factors.vt
    _check_factor_shapes(u, sigma, vt)
    dense = (u.astype(np.float64) * sigma.astype(np.float64)) @ vt.astype(np.float64)
    return dense.astype(np.float32)
