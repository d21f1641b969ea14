import json
import logging
import sys
from typing import Any, Dict, Optional, Tuple

import click

from app.config import load_config, settings
from app.exceptions import SimulationError
from app.pipeline import run_compare, run_pipeline
from app.schemas import STAGE_ORDER, Stage


def _configure_logging(level: str):
    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )


def _emit(manifest: Dict[str, Any]):
    click.echo(json.dumps(manifest, indent=2, sort_keys=True))


def _fail(error: SimulationError):
    click.echo(str(error), err=True)
    sys.exit(1)


def _run(stages: Optional[Tuple[Stage, ...]], config_path, out, threads, force, stokes):
    overrides = {"output_dir": out, "threads": threads, "force": force or None, "stokes_mode": stokes or None}
    if stages is not None:
        overrides["stages"] = [stage.value for stage in stages]
    try:
        config = load_config(config_path, **overrides)
        _emit(run_pipeline(config))
    except SimulationError as e:
        _fail(e)


def _stage_command(stage: Optional[Stage]):
    name = stage.value if stage else "all"
    help_text = f"Run the {name} stage and the stages it depends on." if stage else "Run every configured stage."

    @click.command(name=name, help=help_text)
    @click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), help="YAML/JSON run document.")
    @click.option("--out", type=click.Path(file_okay=False), help="Output directory.")
    @click.option("--threads", type=click.IntRange(min=1), help="Worker threads per stage.")
    @click.option("--force", is_flag=True, help="Write into a non-empty output directory.")
    @click.option("--stokes", is_flag=True, help="Drop inertial terms from the flow solve.")
    def command(config_path, out, threads, force, stokes):
        _run((stage,) if stage else None, config_path, out, threads, force, stokes)

    return command


@click.group(name="cdm-sim")
@click.option("--log-level", default=None, help="Overrides CDM_LOG_LEVEL.")
def cli(log_level):
    """Micromixer flow, tracer, topology and reaction simulation."""
    _configure_logging(log_level or settings.log_level)


for _stage in STAGE_ORDER:
    cli.add_command(_stage_command(_stage))
cli.add_command(_stage_command(None))


@cli.command(name="compare")
@click.argument("run_dirs", nargs=-1, required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", required=True, type=click.Path(file_okay=False), help="Directory for comparison.csv and targets.csv.")
@click.option("--force", is_flag=True, help="Write into a non-empty output directory.")
def compare_command(run_dirs, out, force):
    """Compare finished runs made under identical conditions."""
    try:
        _emit(run_compare(run_dirs, out, force))
    except SimulationError as e:
        _fail(e)
