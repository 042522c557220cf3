import sys
from pathlib import Path
from typing import Optional, Tuple

import click

from evofed import __version__
from evofed.config import (
    ExperimentConfig,
    findConfigFileException,
    loadConfig,
    prettyValidationError,
)
from evofed.experiment import compare as compare_runs
from evofed.experiment import format_report
from evofed.experiment import run as run_experiment
from evofed.experiment import verify_accounting
from evofed.logger import get_logger

logger = get_logger("evofed")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


def _guarded(action):
    """Runs ``action`` and maps its failure to the exit code of its kind."""
    try:
        return action()
    except (prettyValidationError, findConfigFileException) as exc:
        click.echo(getattr(exc, "message", str(exc)), err=True)
        sys.exit(EXIT_INVALID)
    except Exception as exc:
        logger.exception(f"{type(exc).__name__}: {exc}")
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_RUNTIME)


@click.group()
@click.version_option(__version__)
def main():
    pass


@main.command()
@click.argument("config", required=False, type=click.Path(dir_okay=False, path_type=Path))
@click.option(
    "--output-root",
    envvar="EVOFED_OUTPUT_ROOT",
    type=click.Path(file_okay=False, path_type=Path),
    help="Write the run below this directory instead of 'output.directory'.",
)
@click.option(
    "--workers", type=click.IntRange(min=1), help="Override the number of client threads."
)
def run(config: Optional[Path], output_root: Optional[Path], workers: Optional[int]):
    """Run the experiment described by CONFIG (default: the first config.yml found)."""
    out_dir = _guarded(lambda: run_experiment(config, output_root, workers))
    click.echo(str(out_dir))


@main.command()
@click.argument("dirs", nargs=-1, type=click.Path(file_okay=False, path_type=Path))
@click.option(
    "--out",
    type=click.Path(path_type=Path),
    default=Path("comparison.csv"),
    show_default=True,
    help="File (or directory) the comparison table is written to.",
)
def compare(dirs: Tuple[Path, ...], out: Path):
    """Align finished runs on the round index in one table."""
    _guarded(lambda: compare_runs(list(dirs), out))
    click.echo(str(out))


@main.command("verify-accounting")
@click.argument("config", type=click.Path(exists=True, dir_okay=False, path_type=Path))
def verify_accounting_command(config: Path):
    """Report the per-message compression of CONFIG and of the published configurations."""
    reports = _guarded(lambda: verify_accounting(ExperimentConfig.from_dict(loadConfig(config))))
    for report in reports:
        click.echo(format_report(report))


if __name__ == "__main__":
    main()
