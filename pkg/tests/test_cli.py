"""Integration tests for the command-line surface."""
import json
import struct

import numpy as np
import pytest
from click.testing import CliRunner

from deltapress.archive import load_archive, save_archive
from deltapress.cli import cli
from deltapress.container import MAGIC, ContainerReader
from tests.factories import archive, mlp_pair


def parse_kv(text: str) -> dict:
    return dict(line.split("=", 1) for line in text.splitlines() if line)


@pytest.fixture
def runner():
    return CliRunner(mix_stderr=False)


@pytest.fixture
def checkpoints(tmp_path):
    base, tuned = mlp_pair(np.random.default_rng(41))
    base_path, tuned_path = tmp_path / "base.safetensors", tmp_path / "tuned.safetensors"
    save_archive(base, base_path)
    save_archive(tuned, tuned_path)
    return base_path, tuned_path


@pytest.fixture
def poisoned(tmp_path):
    """A base/fine-tuned pair whose fine-tuned bias holds a NaN."""
    base = {"w": np.ones((4, 4)), "b": np.zeros(4)}
    tuned = {"w": np.full((4, 4), 1.5), "b": np.array([0.1, np.nan, 0.2, 0.3])}
    base_path, tuned_path = tmp_path / "base.safetensors", tmp_path / "nan.safetensors"
    save_archive(archive(base), base_path)
    save_archive(archive(tuned), tuned_path)
    return base_path, tuned_path


@pytest.fixture
def container(runner, checkpoints, tmp_path):
    base_path, tuned_path = checkpoints
    out = tmp_path / "delta.dqr"
    result = runner.invoke(cli, ["compress", "--base", str(base_path), "--finetuned", str(tuned_path), "--out", str(out)])
    assert result.exit_code == 0, result.stderr
    return out


class TestCompress:
    def test_prints_ratio_and_kinds(self, runner, checkpoints, tmp_path):
        base_path, tuned_path = checkpoints
        result = runner.invoke(cli, [
            "compress", "--base", str(base_path), "--finetuned", str(tuned_path),
            "--out", str(tmp_path / "d.dqr"), "--method", "dqrelo", "--rho1", "1/16", "--bits", "16",
            "--format", "kv",
        ])
        assert result.exit_code == 0, result.stderr
        out = parse_kv(result.stdout)
        assert out["method"] == "dqrelo"
        assert out["kind.dqrelo"] == "4"
        assert out["kind.sparse_vector"] == "2"
        assert 0.0 < float(out["achieved_rho"]) < 1.0

    def test_layer_range(self, runner, checkpoints, tmp_path):
        base_path, tuned_path = checkpoints
        result = runner.invoke(cli, [
            "compress", "--base", str(base_path), "--finetuned", str(tuned_path),
            "--out", str(tmp_path / "d.dqr"), "--layer-range", "0:0.5", "--format", "kv",
        ])
        assert result.exit_code == 0, result.stderr
        out = parse_kv(result.stdout)
        assert out["kind.dqrelo"] == "2"
        assert out["kind.sparse_vector"] == "1"
        assert out["kind.raw_passthrough"] == "3"

    def test_report_file(self, runner, checkpoints, tmp_path):
        base_path, tuned_path = checkpoints
        report = tmp_path / "report.txt"
        result = runner.invoke(cli, [
            "compress", "--base", str(base_path), "--finetuned", str(tuned_path),
            "--out", str(tmp_path / "d.dqr"), "--report", str(report), "--format", "kv",
        ])
        assert result.exit_code == 0, result.stderr
        written = parse_kv(report.read_text())
        assert float(written["global_relative_error"]) == pytest.approx(
            float(parse_kv(result.stdout)["global_relative_error"]), rel=1e-6
        )

    def test_config_file(self, runner, checkpoints, tmp_path):
        base_path, tuned_path = checkpoints
        config = tmp_path / "c.toml"
        config.write_text('method = "onebit_only"\n')
        result = runner.invoke(cli, [
            "compress", "--base", str(base_path), "--finetuned", str(tuned_path),
            "--out", str(tmp_path / "d.dqr"), "--config", str(config), "--format", "kv",
        ])
        assert result.exit_code == 0, result.stderr
        assert parse_kv(result.stdout)["method"] == "onebit_only"

    def test_missing_base_is_usage_error(self, runner, checkpoints, tmp_path):
        _, tuned_path = checkpoints
        result = runner.invoke(cli, ["compress", "--finetuned", str(tuned_path), "--out", str(tmp_path / "d.dqr")])
        assert result.exit_code == 1
        assert "Usage:" in result.stderr

    def test_unknown_flag_rejected(self, runner, checkpoints, tmp_path):
        base_path, tuned_path = checkpoints
        result = runner.invoke(cli, [
            "compress", "--base", str(base_path), "--finetuned", str(tuned_path),
            "--out", str(tmp_path / "d.dqr"), "--turbo",
        ])
        assert result.exit_code == 1

    def test_bad_fraction(self, runner, checkpoints, tmp_path):
        base_path, tuned_path = checkpoints
        result = runner.invoke(cli, [
            "compress", "--base", str(base_path), "--finetuned", str(tuned_path),
            "--out", str(tmp_path / "d.dqr"), "--rho1", "a/b",
        ])
        assert result.exit_code == 1
        assert "fraction" in result.stderr

    def test_staged_method(self, runner, checkpoints, tmp_path):
        base_path, tuned_path = checkpoints
        result = runner.invoke(cli, [
            "compress", "--base", str(base_path), "--finetuned", str(tuned_path),
            "--out", str(tmp_path / "d.dqr"), "--method", "onebit_then_onebit", "--format", "kv",
        ])
        assert result.exit_code == 0, result.stderr
        assert parse_kv(result.stdout)["kind.onebit_onebit"] == "4"

    def test_validate_rejects_nan_archive(self, runner, poisoned, tmp_path):
        base_path, tuned_path = poisoned
        args = ["compress", "--base", str(base_path), "--finetuned", str(tuned_path), "--out", str(tmp_path / "d.dqr")]
        assert runner.invoke(cli, args).exit_code == 3
        result = runner.invoke(cli, args + ["--validate"])
        assert result.exit_code == 2
        assert "tensor 'b' contains NaN" in result.stderr

    def test_invalid_thread_env(self, runner, checkpoints, tmp_path):
        base_path, tuned_path = checkpoints
        result = runner.invoke(
            cli,
            ["compress", "--base", str(base_path), "--finetuned", str(tuned_path), "--out", str(tmp_path / "d.dqr")],
            env={"DQRELO_THREADS": "zero"},
        )
        assert result.exit_code == 1
        assert "DQRELO_THREADS" in result.stderr


class TestDecompress:
    def test_round_trip(self, runner, checkpoints, container, tmp_path):
        base_path, tuned_path = checkpoints
        out = tmp_path / "recon.safetensors"
        result = runner.invoke(cli, [
            "decompress", "--base", str(base_path), "--delta", str(container), "--out", str(out),
            "--verify", "--finetuned", str(tuned_path), "--format", "kv",
        ])
        assert result.exit_code == 0, result.stderr
        values = parse_kv(result.stdout)
        assert 0.0 < float(values["global_relative_error"]) < 1.0
        recon = load_archive(out)
        assert sorted(recon.names()) == sorted(load_archive(tuned_path).names())
        for name, rec in recon.items():
            predicted = values.get(f"tensor.{name}.predicted_sq_error")
            assert predicted is not None
            assert float(values[f"tensor.{name}.frobenius_error"]) ** 2 == pytest.approx(float(predicted), rel=1e-2)

    def test_wrong_base_exits_2(self, runner, checkpoints, container, tmp_path):
        _, tuned_path = checkpoints
        result = runner.invoke(cli, [
            "decompress", "--base", str(tuned_path), "--delta", str(container), "--out", str(tmp_path / "r.safetensors"),
        ])
        assert result.exit_code == 2
        assert "fingerprint" in result.stderr

    def test_force_accepts_wrong_base(self, runner, checkpoints, container, tmp_path):
        _, tuned_path = checkpoints
        result = runner.invoke(cli, [
            "decompress", "--base", str(tuned_path), "--delta", str(container),
            "--out", str(tmp_path / "r.safetensors"), "--force",
        ])
        assert result.exit_code == 0, result.stderr

    def test_verify_needs_finetuned(self, runner, checkpoints, container, tmp_path):
        base_path, _ = checkpoints
        result = runner.invoke(cli, [
            "decompress", "--base", str(base_path), "--delta", str(container),
            "--out", str(tmp_path / "r.safetensors"), "--verify",
        ])
        assert result.exit_code == 1

    def test_container_closed_when_base_is_wrong(self, runner, checkpoints, container, tmp_path, monkeypatch):
        _, tuned_path = checkpoints
        closed = []
        original_close = ContainerReader.close

        def tracking_close(self):
            closed.append(self.path)
            original_close(self)

        monkeypatch.setattr(ContainerReader, "close", tracking_close)
        result = runner.invoke(cli, [
            "decompress", "--base", str(tuned_path), "--delta", str(container), "--out", str(tmp_path / "r.safetensors"),
        ])
        assert result.exit_code == 2
        assert closed == [container]

    def test_degenerate_entry_shape_exits_2(self, runner, checkpoints, container, tmp_path):
        base_path, _ = checkpoints
        raw = container.read_bytes()
        (length,) = struct.unpack("<Q", raw[4:12])
        manifest = json.loads(raw[12 : 12 + length])
        manifest["entries"][0]["shape"] = [0, 4]
        body = json.dumps(manifest).encode("utf-8")
        container.write_bytes(MAGIC + struct.pack("<Q", len(body)) + body + raw[12 + length :])
        result = runner.invoke(cli, [
            "decompress", "--base", str(base_path), "--delta", str(container), "--out", str(tmp_path / "r.safetensors"),
        ])
        assert result.exit_code == 2
        assert "shape" in result.stderr

    def test_corrupt_container_exits_2(self, runner, checkpoints, container, tmp_path):
        base_path, _ = checkpoints
        container.write_bytes(container.read_bytes()[:-7])
        result = runner.invoke(cli, [
            "decompress", "--base", str(base_path), "--delta", str(container), "--out", str(tmp_path / "r.safetensors"),
        ])
        assert result.exit_code == 2


class TestReports:
    def test_stats_on_identical_archives(self, runner, checkpoints):
        base_path, _ = checkpoints
        result = runner.invoke(cli, ["stats", "--base", str(base_path), "--finetuned", str(base_path), "--format", "kv"])
        assert result.exit_code == 0, result.stderr
        values = parse_kv(result.stdout)
        assert values["mean_abs"] == "0"
        assert values["num_tensors"] == "6"

    def test_stats_on_non_finite_delta(self, runner, poisoned):
        base_path, tuned_path = poisoned
        result = runner.invoke(cli, ["stats", "--base", str(base_path), "--finetuned", str(tuned_path)])
        assert result.exit_code == 3
        assert "non-finite" in result.stderr
        validated = runner.invoke(cli, ["stats", "--base", str(base_path), "--finetuned", str(tuned_path), "--validate"])
        assert validated.exit_code == 2

    def test_diff_validate(self, runner, poisoned):
        base_path, tuned_path = poisoned
        assert runner.invoke(cli, ["diff", "--a", str(base_path), "--b", str(tuned_path), "--validate"]).exit_code == 2

    def test_diff_against_itself(self, runner, checkpoints):
        base_path, _ = checkpoints
        result = runner.invoke(cli, ["diff", "--a", str(base_path), "--b", str(base_path), "--format", "kv"])
        assert result.exit_code == 0, result.stderr
        values = parse_kv(result.stdout)
        assert values["global_relative_error"] == "0"
        assert all(v == "0" for k, v in values.items() if k.endswith(".frobenius_error"))

    def test_retention(self, runner):
        result = runner.invoke(cli, [
            "retention", "--base-score", "5.45", "--sft-score", "88.93", "--compressed-score", "84.84", "--format", "kv",
        ])
        assert result.exit_code == 0, result.stderr
        values = parse_kv(result.stdout)
        assert float(values["retention"]) == pytest.approx(0.95101, abs=5e-6)
        assert round(float(values["drop_percent"]), 2) == 4.90

    def test_retention_triples_are_averaged(self, runner):
        result = runner.invoke(cli, ["retention", "--triple", "0,10,9", "--triple", "0,10,7", "--format", "kv"])
        assert result.exit_code == 0, result.stderr
        assert float(parse_kv(result.stdout)["retention"]) == pytest.approx(0.8)

    def test_retention_degenerate(self, runner):
        result = runner.invoke(cli, ["retention", "--base-score", "1", "--sft-score", "1", "--compressed-score", "1"])
        assert result.exit_code == 1

    def test_retention_needs_scores(self, runner):
        assert runner.invoke(cli, ["retention"]).exit_code == 1

    def test_text_format_is_aligned(self, runner):
        result = runner.invoke(cli, ["retention", "--triple", "0,10,9"])
        assert result.exit_code == 0
        lines = result.stdout.splitlines()
        assert lines[0].split() == ["retention", "0.9"]

    def test_compare(self, runner, checkpoints):
        base_path, tuned_path = checkpoints
        result = runner.invoke(cli, [
            "compare", "--base", str(base_path), "--finetuned", str(tuned_path),
            "--method", "dqrelo", "--method", "onebit_only", "--format", "kv",
        ])
        assert result.exit_code == 0, result.stderr
        values = parse_kv(result.stdout)
        assert set(values) == {
            "method.dqrelo.achieved_rho",
            "method.dqrelo.global_relative_error",
            "method.onebit_only.achieved_rho",
            "method.onebit_only.global_relative_error",
        }


    def test_sweep(self, runner, checkpoints):
        base_path, tuned_path = checkpoints
        result = runner.invoke(cli, [
            "sweep", "--base", str(base_path), "--finetuned", str(tuned_path),
            "--rho1", "1/32", "--rho1", "1/8", "--format", "kv",
        ])
        assert result.exit_code == 0, result.stderr
        values = parse_kv(result.stdout)
        assert float(values["rho1.1/32.achieved_rho"]) < float(values["rho1.1/8.achieved_rho"])
        assert float(values["rho1.1/8.global_relative_error"]) < float(values["rho1.1/32.global_relative_error"])

    def test_sweep_needs_rho1(self, runner, checkpoints):
        base_path, tuned_path = checkpoints
        assert runner.invoke(cli, ["sweep", "--base", str(base_path), "--finetuned", str(tuned_path)]).exit_code == 1

class TestSelftest:
    def test_all_checks_pass(self, runner):
        result = runner.invoke(cli, ["selftest"])
        assert result.exit_code == 0, result.stdout + result.stderr
        lines = result.stdout.splitlines()
        assert len(lines) == 7
        assert all(line.startswith("ok") for line in lines)

    def test_version(self, runner):
        result = runner.invoke(cli, ["--version"])
        assert result.exit_code == 0
        assert "deltapress" in result.stdout
