"""
Command-line surface.

Exit codes: 0 success, 1 user error (bad flags, bad config, misaligned
archives), 2 corrupt or mismatched data, 3 numeric failure.
"""
from __future__ import annotations

import logging
import sys
from pathlib import Path
from typing import List, Optional, Tuple

import click

from deltapress import __version__
from deltapress.archive import load_archive, save_archive
from deltapress.config import build_config, load_config_file, resolve_threads
from deltapress.container import ContainerReader
from deltapress.errors import EXIT_NUMERIC, EXIT_OK, EXIT_USER, DeltaPressError
from deltapress.pipeline import compare_methods, compress_archives, sweep_rho1
from deltapress.reconstruct import diff_archives, error_report, reconstruct
from deltapress.report import (
    FORMATS,
    comparison_pairs,
    error_pairs,
    render,
    retention_pairs,
    stats_pairs,
    storage_pairs,
    sweep_pairs,
)
from deltapress.schemas import ALL_METHODS, METHODS, MODULE_GROUPS
from deltapress.selftest import run_selftest
from deltapress.stats import aggregate_retention, compute_stats, extract_deltas
from deltapress.utils import parse_fraction

logger = logging.getLogger(__name__)

LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR")
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"

existing_file = click.Path(exists=True, dir_okay=False, path_type=Path)
output_file = click.Path(dir_okay=False, writable=True, path_type=Path)
format_option = click.option(
    "--format", "fmt", type=click.Choice(FORMATS), default="text", show_default=True,
    help="Report layout on stdout.",
)
validate_option = click.option(
    "--validate", is_flag=True, help="Reject archives holding NaN values.",
)


class DeltaGroup(click.Group):
    """click group that maps library errors and usage errors onto the exit-code contract."""

    def main(self, *args, standalone_mode: bool = True, **kwargs):
        if not standalone_mode:
            return super().main(*args, standalone_mode=False, **kwargs)
        try:
            rv = super().main(*args, standalone_mode=False, **kwargs)
        except click.ClickException as exc:
            exc.show()
            sys.exit(EXIT_USER)
        except click.Abort:
            click.echo("Aborted!", err=True)
            sys.exit(EXIT_USER)
        except DeltaPressError as exc:
            logger.debug("command failed", exc_info=True)
            click.echo(f"error: {exc}", err=True)
            sys.exit(exc.exit_code)
        sys.exit(rv if isinstance(rv, int) else EXIT_OK)


class _EchoHandler(logging.Handler):
    """Writes through click so records follow whatever stderr is current."""

    def emit(self, record: logging.LogRecord) -> None:
        try:
            click.echo(self.format(record), err=True)
        except Exception:
            self.handleError(record)


def _configure_logging(level: str) -> None:
    logging.basicConfig(level=getattr(logging, level), format=LOG_FORMAT, handlers=[_EchoHandler()], force=True)
    logging.captureWarnings(True)


@click.group(cls=DeltaGroup, context_settings={"help_option_names": ["-h", "--help"]})
@click.version_option(__version__, prog_name="deltapress")
@click.option("--log-level", type=click.Choice(LOG_LEVELS, case_sensitive=False), default=None,
              help="Logging threshold for stderr (default WARNING).")
@click.option("-v", "--verbose", is_flag=True, help="Shorthand for --log-level INFO.")
@click.pass_context
def cli(ctx: click.Context, log_level: Optional[str], verbose: bool):
    """Compress fine-tuned checkpoints as deltas against their base model."""
    level = (log_level or ("INFO" if verbose else "WARNING")).upper()
    _configure_logging(level)
    ctx.obj = {"threads": resolve_threads()}


def _emit(pairs, fmt: str) -> None:
    text = render(pairs, fmt)
    if text:
        click.echo(text)


@cli.command("compress")
@click.option("--base", required=True, type=existing_file, help="Base model archive.")
@click.option("--finetuned", required=True, type=existing_file, help="Fine-tuned model archive.")
@click.option("--out", required=True, type=output_file, help="Container to write (.dqr).")
@click.option("--method", type=click.Choice(ALL_METHODS), default=None)
@click.option("--rho1", default=None, help="Low-rank budget as p/q or decimal.")
@click.option("--bits", "bits_b", type=int, default=None, help="Bits per uncompressed element.")
@click.option("--vector-rho", default=None, help="Kept fraction of vector entries.")
@click.option("--layer-range", default=None, help="Compress only layers in LO:HI (fractions of depth).")
@click.option("--include", multiple=True, help="Glob of tensor names to compress (repeatable).")
@click.option("--exclude", multiple=True, help="Glob of tensor names to keep raw (repeatable).")
@click.option("--module", "modules", multiple=True, type=click.Choice(MODULE_GROUPS),
              help="Compress only these module groups (repeatable).")
@click.option("--seed", type=int, default=None)
@click.option("--svd-strategy", type=click.Choice(["auto", "full", "iterative"]), default=None)
@click.option("--factor-dtype", type=click.Choice(["float16", "float32"]), default=None)
@click.option("--config", "config_path", type=existing_file, default=None, help="TOML defaults.")
@click.option("--report", "report_path", type=output_file, default=None,
              help="Write the reconstruction error report (kv) here.")
@click.option("--strict", is_flag=True, help="Fail when the archives do not share every tensor.")
@validate_option
@format_option
@click.pass_obj
def cmd_compress(obj, base, finetuned, out, method, rho1, bits_b, vector_rho, layer_range,
                 include, exclude, modules, seed, svd_strategy, factor_dtype, config_path,
                 report_path, strict, validate, fmt):
    """Compress finetuned - base into a .dqr container."""
    file_values = load_config_file(config_path) if config_path else None
    cfg = build_config(
        file_values,
        method=method,
        rho1=rho1,
        bits_b=bits_b,
        vector_ratio_rho=vector_rho,
        layer_range=layer_range,
        include=include,
        exclude=exclude,
        modules=modules,
        seed=seed,
        svd_strategy=svd_strategy,
        factor_dtype=factor_dtype,
    )
    base_archive = load_archive(base, validate=validate)
    ft_archive = load_archive(finetuned, validate=validate)
    run = compress_archives(base_archive, ft_archive, cfg, threads=obj["threads"], strict=strict)
    manifest = run.write(out)
    pairs = storage_pairs(run.storage, manifest)

    if report_path is not None:
        recon = reconstruct(base_archive, manifest, run.entries, threads=obj["threads"])
        report = error_report(base_archive, ft_archive, recon, manifest)
        try:
            report_path.write_text(render(error_pairs(report), "kv") + "\n", encoding="utf-8")
        except OSError as exc:
            raise click.FileError(str(report_path), hint=str(exc)) from exc
        pairs.append(("global_relative_error", report.global_relative_error))
    _emit(pairs, fmt)


@cli.command("decompress")
@click.option("--base", required=True, type=existing_file)
@click.option("--delta", required=True, type=existing_file, help="Container written by compress.")
@click.option("--out", required=True, type=output_file)
@click.option("--force", is_flag=True, help="Proceed even if the base fingerprint differs.")
@click.option("--verify", is_flag=True, help="Report error against --finetuned.")
@click.option("--finetuned", type=existing_file, default=None)
@format_option
@click.pass_obj
def cmd_decompress(obj, base, delta, out, force, verify, finetuned, fmt):
    """Rebuild an approximate fine-tuned archive from base + container."""
    if verify and finetuned is None:
        raise click.UsageError("--verify needs --finetuned")
    base_archive = load_archive(base)
    with ContainerReader(delta) as reader:
        manifest = reader.manifest
        recon = reconstruct(base_archive, manifest, reader.entries(), force=force, threads=obj["threads"])
    save_archive(recon, out)

    pairs = [("tensors", len(recon)), ("method", manifest.method)]
    if verify:
        report = error_report(base_archive, load_archive(finetuned), recon, manifest)
        pairs += error_pairs(report)
    _emit(pairs, fmt)


@cli.command("stats")
@click.option("--base", required=True, type=existing_file)
@click.option("--finetuned", required=True, type=existing_file)
@click.option("--bins", type=click.IntRange(min=1), default=4096, show_default=True)
@click.option("--skip-mismatched", is_flag=True, help="Skip unaligned tensors instead of failing.")
@validate_option
@format_option
@click.pass_obj
def cmd_stats(obj, base, finetuned, bins, skip_mismatched, validate, fmt):
    """Delta statistics: mean |delta|, mean singular value, entropy."""
    skipped: List[str] = []
    base_archive = load_archive(base, validate=validate)
    ft_archive = load_archive(finetuned, validate=validate)
    deltas = extract_deltas(base_archive, ft_archive, strict=not skip_mismatched, skipped=skipped)
    stats = compute_stats(deltas, bins, threads=obj["threads"])
    pairs = stats_pairs(stats)
    if skipped:
        pairs.insert(0, ("skipped", skipped))
    _emit(pairs, fmt)


@cli.command("diff")
@click.option("--a", "path_a", required=True, type=existing_file)
@click.option("--b", "path_b", required=True, type=existing_file)
@validate_option
@format_option
def cmd_diff(path_a, path_b, validate, fmt):
    """Per-tensor Frobenius distance between two aligned archives."""
    a, b = load_archive(path_a, validate=validate), load_archive(path_b, validate=validate)
    _emit(error_pairs(diff_archives(a, b)), fmt)


def _parse_triple(text: str) -> Tuple[float, float, float]:
    parts = text.split(",")
    if len(parts) != 3:
        raise click.BadParameter(f"expected BASE,SFT,COMPRESSED, got {text!r}", param_hint="--triple")
    try:
        return tuple(float(parse_fraction(p)) for p in parts)
    except DeltaPressError as exc:
        raise click.BadParameter(str(exc), param_hint="--triple") from exc


@cli.command("retention")
@click.option("--base-score", type=float, default=None)
@click.option("--sft-score", type=float, default=None)
@click.option("--compressed-score", type=float, default=None)
@click.option("--triple", "triples", multiple=True, help="BASE,SFT,COMPRESSED (repeatable, averaged).")
@format_option
def cmd_retention(base_score, sft_score, compressed_score, triples, fmt):
    """Share of the fine-tuning gain kept after compression."""
    scores = [base_score, sft_score, compressed_score]
    collected = [_parse_triple(t) for t in triples]
    if any(s is not None for s in scores):
        if any(s is None for s in scores):
            raise click.UsageError("--base-score, --sft-score and --compressed-score go together")
        collected.insert(0, tuple(scores))
    if not collected:
        raise click.UsageError("give the three scores or at least one --triple")
    _emit(retention_pairs(aggregate_retention(collected)), fmt)


@cli.command("compare")
@click.option("--base", required=True, type=existing_file)
@click.option("--finetuned", required=True, type=existing_file)
@click.option("--method", "methods", multiple=True, type=click.Choice(ALL_METHODS),
              help="Methods to run (repeatable, default the baselines).")
@click.option("--rho1", default=None)
@click.option("--bits", "bits_b", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--config", "config_path", type=existing_file, default=None)
@format_option
@click.pass_obj
def cmd_compare(obj, base, finetuned, methods, rho1, bits_b, seed, config_path, fmt):
    """Every method at the same budget: achieved ratio and reconstruction error."""
    file_values = load_config_file(config_path) if config_path else None
    cfg = build_config(file_values, rho1=rho1, bits_b=bits_b, seed=seed)
    results = compare_methods(
        load_archive(base), load_archive(finetuned), cfg, methods or METHODS, threads=obj["threads"]
    )
    _emit(comparison_pairs(results), fmt)


@cli.command("sweep")
@click.option("--base", required=True, type=existing_file)
@click.option("--finetuned", required=True, type=existing_file)
@click.option("--rho1", "rho1_values", multiple=True, required=True,
              help="Low-rank budget to try (repeatable).")
@click.option("--method", type=click.Choice(ALL_METHODS), default=None)
@click.option("--bits", "bits_b", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--config", "config_path", type=existing_file, default=None)
@format_option
@click.pass_obj
def cmd_sweep(obj, base, finetuned, rho1_values, method, bits_b, seed, config_path, fmt):
    """One method across several rho1 values: achieved ratio and reconstruction error."""
    file_values = load_config_file(config_path) if config_path else None
    cfg = build_config(file_values, method=method, bits_b=bits_b, seed=seed)
    results = sweep_rho1(load_archive(base), load_archive(finetuned), cfg, rho1_values, threads=obj["threads"])
    _emit(sweep_pairs(results), fmt)


@cli.command("selftest")
@click.option("--seed", type=int, default=None, help="Override the built-in seed.")
@click.pass_context
def cmd_selftest(ctx, seed):
    """Run the invariant checks on built-in synthetic matrices."""
    results = run_selftest() if seed is None else run_selftest(seed)
    for result in results:
        click.echo(f"{'ok' if result.passed else 'FAIL'}  {result.name}  {result.detail}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        click.echo(f"{len(failed)} of {len(results)} checks failed", err=True)
        ctx.exit(EXIT_NUMERIC)
