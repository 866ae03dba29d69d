"""Tests for SVD kernels against a reference one-sided Jacobi SVD."""
import numpy as np
import pytest

from scipy.sparse.linalg import ArpackNoConvergence

from deltapress.errors import ConvergenceError, NumericError, RankError, ShapeError
from deltapress.linalg import (
    LowRankFactors,
    assemble,
    frobenius_norm_sq,
    pick_strategy,
    singular_values,
    truncated_svd,
)


def jacobi_singular_values(matrix: np.ndarray, sweeps: int = 60) -> np.ndarray:
    """One-sided Jacobi: orthogonalize columns by plane rotations, read off norms."""
    a = np.array(matrix, dtype=np.float64)
    if a.shape[0] < a.shape[1]:
        a = a.T.copy()
    m = a.shape[1]
    for _ in range(sweeps):
        rotated = False
        for p in range(m - 1):
            for q in range(p + 1, m):
                alpha = a[:, p] @ a[:, p]
                beta = a[:, q] @ a[:, q]
                gamma = a[:, p] @ a[:, q]
                if abs(gamma) <= 1e-13 * np.sqrt(alpha * beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = np.sign(zeta) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta)) if zeta != 0 else 1.0
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                ap = a[:, p].copy()
                a[:, p] = c * ap - s * a[:, q]
                a[:, q] = s * ap + c * a[:, q]
        if not rotated:
            break
    return np.sort(np.linalg.norm(a, axis=0))[::-1]


@pytest.fixture
def rng():
    return np.random.default_rng(11)


class TestSingularValues:
    @pytest.mark.parametrize("shape", [(12, 7), (7, 12), (10, 10)])
    def test_match_jacobi_reference(self, rng, shape):
        matrix = rng.standard_normal(shape)
        np.testing.assert_allclose(singular_values(matrix), jacobi_singular_values(matrix), rtol=1e-8)

    def test_non_finite_input(self):
        with pytest.raises(NumericError):
            singular_values(np.array([[1.0, np.inf]]))


class TestTruncatedSvd:
    def test_error_equals_discarded_energy(self, rng):
        for trial in range(20):
            n, m = rng.integers(8, 60, size=2)
            matrix = rng.standard_normal((n, m)).astype(np.float32)
            sv = jacobi_singular_values(matrix)
            for r in sorted({1, 4, min(n, m) // 2}):
                factors = truncated_svd(matrix, r)
                err = frobenius_norm_sq(matrix.astype(np.float64) - assemble(factors))
                tail = float(np.sum(sv[r:] ** 2))
                assert err == pytest.approx(tail, rel=1e-4)

    def test_iterative_matches_full(self, rng):
        spectrum = np.array([10.0, 8.0, 6.0, 4.0, 2.0])
        left, _ = np.linalg.qr(rng.standard_normal((80, 5)))
        right, _ = np.linalg.qr(rng.standard_normal((60, 5)))
        matrix = ((left * spectrum) @ right.T + 1e-3 * rng.standard_normal((80, 60))).astype(np.float32)
        full = truncated_svd(matrix, 5, strategy="full")
        iterative = truncated_svd(matrix, 5, strategy="iterative")
        np.testing.assert_allclose(iterative.sigma, full.sigma, rtol=1e-4)
        np.testing.assert_allclose(assemble(iterative), assemble(full), atol=1e-4)

    def test_singular_values_descending(self, rng):
        factors = truncated_svd(rng.standard_normal((30, 20)), 6, strategy="iterative")
        assert np.all(np.diff(factors.sigma) <= 0)

    def test_scaling_law(self, rng):
        matrix = rng.standard_normal((40, 24)).astype(np.float32)
        base = frobenius_norm_sq(matrix.astype(np.float64) - assemble(truncated_svd(matrix, 3)))
        for c in (2.0, 5.0, 10.0):
            scaled = matrix * np.float32(c)
            err = frobenius_norm_sq(scaled.astype(np.float64) - assemble(truncated_svd(scaled, 3)))
            assert err == pytest.approx(c * c * base, rel=1e-4)

    @pytest.mark.parametrize("strategy", ["full", "iterative"])
    def test_factors_are_orthonormal(self, rng, strategy):
        matrix = rng.standard_normal((70, 45)).astype(np.float32)
        factors = truncated_svd(matrix, 8, strategy=strategy)
        eye = np.eye(8)
        np.testing.assert_allclose(factors.u.T.astype(np.float64) @ factors.u, eye, atol=1e-4)
        np.testing.assert_allclose(factors.vt.astype(np.float64) @ factors.vt.T, eye, atol=1e-4)

    def test_truncating_a_truncation_is_a_fixed_point(self, rng):
        matrix = rng.standard_normal((50, 30)).astype(np.float32)
        once = assemble(truncated_svd(matrix, 5))
        twice = assemble(truncated_svd(once, 5))
        np.testing.assert_allclose(twice, once, atol=1e-4)

    def test_iterative_non_convergence(self, rng, monkeypatch):
        def stalled(*args, **kwargs):
            raise ArpackNoConvergence("ARPACK error -1: No convergence", np.array([]), np.array([]))

        monkeypatch.setattr("deltapress.linalg.svds", stalled)
        with pytest.raises(ConvergenceError) as info:
            truncated_svd(rng.standard_normal((40, 30)), 4, strategy="iterative")
        assert info.value.iterations == 1000
        assert isinstance(info.value, NumericError)

    def test_zero_matrix(self):
        factors = truncated_svd(np.zeros((5, 4)), 2)
        assert factors.rank == 2
        assert not assemble(factors).any()

    @pytest.mark.parametrize("r", [0, 5, -1])
    def test_rank_out_of_range(self, r):
        with pytest.raises(RankError):
            truncated_svd(np.ones((4, 4)), r)

    def test_requires_matrix(self):
        with pytest.raises(ShapeError):
            truncated_svd(np.ones(4), 1)


class TestStrategy:
    def test_auto_prefers_full_for_small_matrices(self):
        assert pick_strategy(512, 4096, 16) == "full"
        assert pick_strategy(1024, 4096, 52) == "iterative"
        assert pick_strategy(1024, 1024, 1024) == "full"

    def test_explicit_strategy_wins(self):
        assert pick_strategy(10, 10, 2, "iterative") == "iterative"


class TestLowRankFactors:
    def test_numel_counts_both_factors_and_sigma(self):
        factors = LowRankFactors(np.zeros((6, 2)), np.ones(2), np.zeros((2, 9)))
        assert factors.numel == 2 * (6 + 9 + 1)
        assert factors.shape == (6, 9)

    def test_mismatched_ranks(self):
        with pytest.raises(ShapeError):
            LowRankFactors(np.zeros((6, 2)), np.ones(3), np.zeros((2, 9)))
