"""Command-line surface: one subcommand per pipeline stage plus run/init.

Exit codes: 0 ok, 2 configuration error, 3 missing dependency, 4 stage failure.
"""

from __future__ import annotations

import sys

import click

from .config import load_config, save_config, toy_config
from .errors import ConfigError, MissingDependency, StageFailure
from .pipeline import STAGES, run_pipeline

EXIT_CONFIG = 2
EXIT_DEPENDENCY = 3
EXIT_STAGE = 4


def _run(config_path: str, stage: str, force: bool) -> None:
    try:
        config = load_config(config_path)
        manifests = run_pipeline(config, stage=stage, force=force)
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    except MissingDependency as exc:
        click.echo(f"missing dependency: {exc}", err=True)
        sys.exit(EXIT_DEPENDENCY)
    except StageFailure as exc:
        click.echo(f"stage failure: {exc}", err=True)
        sys.exit(EXIT_STAGE)
    for m in manifests:
        if m.status == "skipped":
            click.echo(f"{m.stage}: skipped, up-to-date")
        else:
            click.echo(f"{m.stage}: ok ({len(m.outputs)} outputs)")


@click.group(help=__doc__)
def main() -> None:
    pass


@main.command(help="Write the bundled desk-scale configuration to PATH.")
@click.argument("path", type=click.Path(dir_okay=False))
@click.option("--workdir", default="runs/toy", show_default=True)
@click.option("--seed", default=0, show_default=True)
def init(path: str, workdir: str, seed: int) -> None:
    save_config(toy_config(workdir=workdir, root_seed=seed), path)
    click.echo(f"wrote {path}")


@main.command(help="Run one stage, or the whole chain with --stage all.")
@click.option("--config", "config_path", required=True, type=click.Path(exists=False))
@click.option("--stage", default="all", show_default=True)
@click.option("--force", is_flag=True, help="Re-run even when inputs are unchanged.")
def run(config_path: str, stage: str, force: bool) -> None:
    _run(config_path, stage, force)


def _stage_command(stage: str):
    @main.command(name=stage, help=f"Run the {stage!r} stage.")
    @click.option("--config", "config_path", required=True, type=click.Path(exists=False))
    @click.option("--force", is_flag=True)
    def _cmd(config_path: str, force: bool, _stage=stage) -> None:
        _run(config_path, _stage, force)

    return _cmd


for _stage in STAGES:
    _stage_command(_stage)


if __name__ == "__main__":
    main()
