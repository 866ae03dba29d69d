"""
Built-in checks of the numeric kernels on synthetic matrices.

Run with ``python -m deltapress selftest``. Each check returns a
``CheckResult``; the command exits 3 if any check fails.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, List, Tuple

import numpy as np

from deltapress.compressor import rank_for_budget, residual, sign_quantize
from deltapress.container import pack_signs, unpack_signs
from deltapress.linalg import assemble, frobenius_norm_sq, singular_values, truncated_svd
from deltapress.stats import performance_retention

logger = logging.getLogger(__name__)

SEED = 20240521


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str


def _rel_close(a: float, b: float, tol: float) -> bool:
    return abs(a - b) <= tol * max(abs(a), abs(b), 1e-30)


def _heavy_tailed(rng: np.random.Generator, n: int, m: int) -> np.ndarray:
    return (rng.standard_t(df=3, size=(n, m)) * 1e-3).astype(np.float32)


def check_alpha_optimality(rng: np.random.Generator) -> Tuple[bool, str]:
    delta = _heavy_tailed(rng, 64, 48)
    quant = sign_quantize(delta)
    best = frobenius_norm_sq(residual(delta, quant))
    signs = np.where(quant.signs, 1.0, -1.0)
    worst_gap = math.inf
    for candidate in np.linspace(0.8, 1.2, 41) * quant.alpha:
        err = float(np.sum(np.square(delta.astype(np.float64) - candidate * signs)))
        worst_gap = min(worst_gap, err - best)
    return worst_gap >= -1e-7 * best, f"min(candidate - optimum) = {worst_gap:.3e}"


def check_eckart_young(rng: np.random.Generator) -> Tuple[bool, str]:
    matrix = rng.standard_normal((40, 30)).astype(np.float32)
    r = 7
    factors = truncated_svd(matrix, r)
    err = frobenius_norm_sq(matrix.astype(np.float64) - assemble(factors))
    tail = float(np.sum(np.square(singular_values(matrix)[r:])))
    return _rel_close(err, tail, 1e-4), f"error^2 {err:.6g} vs tail {tail:.6g}"


def check_scaling(rng: np.random.Generator) -> Tuple[bool, str]:
    delta = _heavy_tailed(rng, 32, 24)
    c = 5.0

    def dqrelo_error(d: np.ndarray) -> float:
        resid = residual(d, sign_quantize(d))
        factors = truncated_svd(resid, 4)
        return frobenius_norm_sq(resid.astype(np.float64) - assemble(factors))

    base, scaled = dqrelo_error(delta), dqrelo_error(delta * np.float32(c))
    return _rel_close(scaled, c * c * base, 1e-4), f"ratio {scaled / base:.6g}, expected {c * c:g}"


def check_rank_formula(rng: np.random.Generator) -> Tuple[bool, str]:
    square = rank_for_budget(4096, 4096, Fraction(1, 16))
    wide = rank_for_budget(1024, 4096, Fraction(1, 16))
    return (square, wide) == (128, 52), f"r(4096x4096)={square}, r(1024x4096)={wide}"


def check_sign_packing(rng: np.random.Generator) -> Tuple[bool, str]:
    pattern = pack_signs(np.array([[True, False] * 4])) == b"\xaa"
    single = pack_signs(np.array([[True]])) == b"\x80"
    signs = rng.random((3, 11)) > 0.5
    roundtrip = np.array_equal(unpack_signs(pack_signs(signs), 3, 11), signs)
    return pattern and single and roundtrip, f"0xAA={pattern} 0x80={single} roundtrip={roundtrip}"


def check_dominance(rng: np.random.Generator) -> Tuple[bool, str]:
    n, m = 96, 64
    low_rank = rng.standard_normal((n, 3)) @ rng.standard_normal((3, m)) * 1e-3
    delta = (low_rank + _heavy_tailed(rng, n, m)).astype(np.float32)
    quant = sign_quantize(delta)
    resid = residual(delta, quant)
    onebit = frobenius_norm_sq(resid)
    factors = truncated_svd(resid, rank_for_budget(n, m, Fraction(1, 16)))
    dqrelo = frobenius_norm_sq(resid.astype(np.float64) - assemble(factors))
    return dqrelo < onebit, f"dqrelo {dqrelo:.6g} < onebit {onebit:.6g}"


def check_retention(rng: np.random.Generator) -> Tuple[bool, str]:
    result = performance_retention(5.45, 88.93, 84.84)
    ok = round(result.retention, 4) == 0.9510 and round(result.drop_percent, 2) == 4.90
    return ok, f"retention {result.retention:.5f}, drop {result.drop_percent:.3f}%"


CHECKS: List[Tuple[str, Callable[[np.random.Generator], Tuple[bool, str]]]] = [
    ("alpha_optimality", check_alpha_optimality),
    ("eckart_young", check_eckart_young),
    ("scaling", check_scaling),
    ("rank_formula", check_rank_formula),
    ("sign_packing", check_sign_packing),
    ("dominance", check_dominance),
    ("retention", check_retention),
]


def run_selftest(seed: int = SEED) -> List[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []
    for name, check in CHECKS:
        try:
            passed, detail = check(rng)
        except Exception as exc:  # a crashing kernel is a failed check, not an aborted run
            logger.exception("selftest check %s raised", name)
            passed, detail = False, f"{type(exc).__name__}: {exc}"
        logger.debug("selftest %s: %s (%s)", name, passed, detail)
        results.append(CheckResult(name=name, passed=bool(passed), detail=detail))
    return results
