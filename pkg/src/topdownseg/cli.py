"""Command-line entry point.

One subcommand per pipeline stage plus a synthetic dataset generator.
Hyper-parameters live in the YAML config; the command line points at
files and may override the seed and the output directory. Stages share
state through artifacts on disk only, so any stage can be rerun alone
and a full run is reproduced by replaying the commands with the same
config and seed.

Exit codes: 0 on success, 2 for an unusable config or bad arguments,
3 for a missing input artifact or unreadable data, 4 for a numeric
failure during training.
"""

from __future__ import annotations

import sys
from pathlib import Path

import click
import torch

from topdownseg.archive import ArchiveError
from topdownseg.config import ConfigError, RunConfig, load_config, override
from topdownseg.datasets import DatasetError, SynthConfig, generate_synthetic
from topdownseg.pipeline import (
    MissingArtifactError,
    run_paths,
    stage_cluster,
    stage_eval,
    stage_mine,
    stage_pseudo,
    stage_train,
    stage_viz,
)
from topdownseg.pseudolabels import BankError
from topdownseg.training import TrainingDivergence

EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_NUMERIC = 4


def _run(action) -> None:
    """Execute a stage and translate failures into exit codes."""
    try:
        action()
    except (ConfigError, ValueError) as err:
        click.echo(f"config error: {err}", err=True)
        sys.exit(EXIT_CONFIG)
    except (MissingArtifactError, DatasetError, BankError, ArchiveError) as err:
        click.echo(f"error: {err}", err=True)
        sys.exit(EXIT_MISSING)
    except TrainingDivergence as err:
        click.echo(f"numeric failure: {err}", err=True)
        sys.exit(EXIT_NUMERIC)


def _config_options(fn):
    fn = click.option("--out", type=click.Path(), default=None,
                      help="Override the config's output directory.")(fn)
    fn = click.option("--seed", type=int, default=None,
                      help="Override the config's seed.")(fn)
    fn = click.option("--config", "config_path", required=True,
                      type=click.Path(), help="YAML run config.")(fn)
    return fn


def _load(config_path: str, seed: int | None, out: str | None) -> RunConfig:
    return override(load_config(config_path), seed=seed, out=out)


@click.group()
def main() -> None:
    """Top-down unsupervised semantic segmentation pipeline."""
    # Single-threaded math keeps every artifact bit-reproducible across
    # machines with different core counts.
    torch.set_num_threads(1)


@main.command()
@_config_options
def mine(config_path: str, seed: int | None, out: str | None) -> None:
    """Sweep crops over the training split and store their features."""

    def action() -> None:
        path = stage_mine(_load(config_path, seed, out))
        click.echo(str(path))

    _run(action)


@main.command()
@_config_options
def cluster(config_path: str, seed: int | None, out: str | None) -> None:
    """Cluster mined crop features into the concept bank."""

    def action() -> None:
        path = stage_cluster(_load(config_path, seed, out))
        click.echo(str(path))

    _run(action)


@main.command()
@_config_options
def pseudo(config_path: str, seed: int | None, out: str | None) -> None:
    """Synthesize pseudo labels for every image into the label bank."""

    def action() -> None:
        path = stage_pseudo(_load(config_path, seed, out))
        click.echo(str(path))

    _run(action)


@main.command()
@_config_options
def train(config_path: str, seed: int | None, out: str | None) -> None:
    """Run the bootstrap training loop and save the decoder."""

    def action() -> None:
        decoder_path, rounds_path = stage_train(_load(config_path, seed, out))
        click.echo(rounds_path.read_text("utf-8"), nl=False)
        click.echo(str(decoder_path))

    _run(action)


@main.command("eval")
@_config_options
@click.option("--pred-dir", type=click.Path(), default=None,
              help="Score PNG masks named <image stem>.png from this "
                   "directory instead of running the decoder.")
def eval_cmd(config_path: str, seed: int | None, out: str | None,
             pred_dir: str | None) -> None:
    """Score the validation split and write metrics.txt."""

    def action() -> None:
        config = _load(config_path, seed, out)
        report = stage_eval(config, pred_dir=pred_dir)
        click.echo(report.to_text(), nl=False)
        click.echo(str(run_paths(config).metrics))

    _run(action)


@main.command()
@_config_options
@click.option("--image", "image_ids", multiple=True,
              help="Bank image id to render; repeatable.")
@click.option("--limit", type=int, default=4, show_default=True,
              help="How many records to render when no ids are given.")
def viz(config_path: str, seed: int | None, out: str | None,
        image_ids: tuple[str, ...], limit: int) -> None:
    """Render bank records as PNG rasters under out/viz."""

    def action() -> None:
        config = _load(config_path, seed, out)
        written = stage_viz(config, image_ids=list(image_ids) or None,
                            limit=limit)
        for path in written:
            click.echo(str(path))

    _run(action)


@main.command()
@click.option("--out", required=True, type=click.Path(),
              help="Directory to render the dataset into.")
@click.option("--count", type=int, default=60, show_default=True)
@click.option("--side", type=int, default=64, show_default=True)
@click.option("--k", type=int, default=3, show_default=True,
              help="Number of foreground shape classes.")
@click.option("--noise", type=float, default=0.04, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
def synth(out: str, count: int, side: int, k: int, noise: float,
          seed: int) -> None:
    """Generate a synthetic shapes dataset plus its manifest."""

    def action() -> None:
        cfg = SynthConfig(count=count, side=side, k_gt=k, noise=noise,
                          seed=seed)
        generate_synthetic(cfg, out)
        click.echo(str(Path(out) / "manifest.tsv"))

    _run(action)


if __name__ == "__main__":
    main()
