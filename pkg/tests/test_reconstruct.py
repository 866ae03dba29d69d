"""Tests for reconstruction and error reports."""
import logging

import numpy as np
import pytest

from deltapress.errors import ArchitectureMismatchError, BaseMismatchError, ShapeError
from deltapress.pipeline import compress_archives
from deltapress.reconstruct import diff_archives, error_report, reconstruct
from deltapress.schemas import CompressionConfig
from tests.factories import archive, mlp_pair


@pytest.fixture
def rng():
    return np.random.default_rng(23)


def _roundtrip(base, tuned, cfg=None, **kwargs):
    run = compress_archives(base, tuned, cfg or CompressionConfig())
    manifest = run.manifest()
    return manifest, reconstruct(base, manifest, run.entries, **kwargs)


class TestReconstruct:
    def test_zero_delta_gives_base_back(self, rng):
        base, _ = mlp_pair(rng)
        manifest, recon = _roundtrip(base, base)
        assert sorted(recon.names()) == sorted(base.names())
        for name in base:
            assert recon[name].same_bytes(base[name])

    def test_passthrough_only_matches_finetuned(self, rng):
        base, tuned = mlp_pair(rng)
        _, recon = _roundtrip(base, tuned, CompressionConfig(include=["no.such.tensor"]))
        for name in tuned:
            np.testing.assert_allclose(recon[name].to_float32(), tuned[name].to_float32(), atol=1e-4)

    def test_output_dtype_follows_base(self, rng):
        base, tuned = mlp_pair(rng, dtype="bfloat16")
        _, recon = _roundtrip(base, tuned)
        assert {recon[n].dtype for n in recon} == {"bfloat16"}

    def test_error_matches_prediction_on_tiny_mlp(self, rng):
        base, tuned = mlp_pair(rng, dtype="float16")
        run = compress_archives(base, tuned, CompressionConfig(rho1="1/16", bits_b=16))
        manifest = run.manifest()
        recon = reconstruct(base, manifest, run.entries)
        report = error_report(base, tuned, recon, manifest)
        for name, err in report.per_tensor.items():
            assert err.predicted_sq_error is not None
            assert err.frobenius_error**2 == pytest.approx(err.predicted_sq_error, rel=1e-2)

    def test_wrong_base_is_rejected(self, rng):
        base, tuned = mlp_pair(rng)
        other, _ = mlp_pair(rng)
        run = compress_archives(base, tuned, CompressionConfig())
        with pytest.raises(BaseMismatchError):
            reconstruct(other, run.manifest(), run.entries)

    def test_force_overrides_fingerprint(self, rng, caplog):
        base, tuned = mlp_pair(rng)
        other, _ = mlp_pair(rng)
        run = compress_archives(base, tuned, CompressionConfig())
        with caplog.at_level(logging.WARNING):
            recon = reconstruct(other, run.manifest(), run.entries, force=True)
        assert len(recon) == len(tuned)
        assert "fingerprint" in caplog.text

    def test_forced_base_with_other_shapes(self, rng):
        base = archive({"w": rng.standard_normal((4, 6))})
        tuned = archive({"w": rng.standard_normal((4, 6))})
        other = archive({"w": rng.standard_normal((6, 4))})
        run = compress_archives(base, tuned, CompressionConfig())
        with pytest.raises(ShapeError):
            reconstruct(other, run.manifest(), run.entries, force=True)

    def test_new_and_removed_tensors(self, rng):
        base = archive({"w": rng.standard_normal((4, 4)), "old": rng.standard_normal(3)})
        tuned = archive({"w": rng.standard_normal((4, 4)), "new": rng.standard_normal(5)})
        manifest, recon = _roundtrip(base, tuned)
        assert manifest.removed == ["old"]
        assert sorted(recon.names()) == ["new", "w"]
        assert recon["new"].same_bytes(tuned["new"])

    def test_resized_tensor_is_kept_verbatim(self, rng):
        base = archive({"embed": rng.standard_normal((10, 4))})
        tuned = archive({"embed": rng.standard_normal((12, 4))})
        _, recon = _roundtrip(base, tuned)
        assert recon["embed"].same_bytes(tuned["embed"])


class TestErrorReport:
    def test_perfect_reconstruction(self, rng):
        base, tuned = mlp_pair(rng)
        report = error_report(base, tuned, tuned)
        assert report.global_relative_error == 0.0
        assert all(e.frobenius_error == 0.0 for e in report.per_tensor.values())

    def test_base_as_reconstruction(self, rng):
        base, tuned = mlp_pair(rng)
        report = error_report(base, tuned, base)
        assert report.global_relative_error == pytest.approx(1.0)
        for err in report.per_tensor.values():
            assert err.relative_error == pytest.approx(1.0)

    def test_matches_direct_recomputation(self, rng):
        base = archive({"a": rng.standard_normal((5, 3)), "b": rng.standard_normal(7)})
        tuned = archive({"a": rng.standard_normal((5, 3)), "b": rng.standard_normal(7)})
        recon = archive({"a": rng.standard_normal((5, 3)), "b": rng.standard_normal(7)})
        report = error_report(base, tuned, recon)
        errs, norms = [], []
        for name in ("a", "b"):
            t = tuned[name].to_float32().astype(np.float64)
            err = np.linalg.norm(recon[name].to_float32() - t)
            norm = np.linalg.norm(t - base[name].to_float32())
            assert report.per_tensor[name].frobenius_error == pytest.approx(err, rel=1e-9)
            assert report.per_tensor[name].relative_error == pytest.approx(err / norm, rel=1e-9)
            errs.append(err)
            norms.append(norm)
        expected = np.sqrt(np.sum(np.square(errs)) / np.sum(np.square(norms)))
        assert report.global_relative_error == pytest.approx(expected, rel=1e-9)

    def test_unchanged_tensor_has_zero_relative_error(self, rng):
        weights = rng.standard_normal((3, 3))
        base = archive({"w": weights})
        report = error_report(base, base, base)
        assert report.per_tensor["w"].relative_error == 0.0

    def test_misaligned_reconstruction(self, rng):
        base, tuned = mlp_pair(rng)
        partial = tuned.with_entries({n: tuned[n] for n in list(tuned)[:2]})
        with pytest.raises(ArchitectureMismatchError):
            error_report(base, tuned, partial)

    def test_new_tensor_is_skipped(self, rng):
        base = archive({"w": rng.standard_normal(3)})
        tuned = archive({"w": rng.standard_normal(3), "new": rng.standard_normal(2)})
        report = error_report(base, tuned, tuned)
        assert report.skipped == ["new"]


class TestDiffArchives:
    def test_against_itself(self, rng):
        a, _ = mlp_pair(rng)
        report = diff_archives(a, a)
        assert report.global_relative_error == 0.0
        assert {e.kind for e in report.per_tensor.values()} == {"same"}

    def test_relative_to_first(self):
        a = archive({"w": [3.0, 4.0]})
        b = archive({"w": [3.0, 5.0]})
        report = diff_archives(a, b)
        assert report.per_tensor["w"].frobenius_error == pytest.approx(1.0)
        assert report.per_tensor["w"].relative_error == pytest.approx(0.2)

    def test_misaligned(self):
        with pytest.raises(ArchitectureMismatchError):
            diff_archives(archive({"w": [1.0]}), archive({"v": [1.0]}))
