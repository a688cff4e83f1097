import logging
from enum import Enum
from pathlib import Path
from typing import Annotated, Optional

import typer

from .commands import CliInvocation, CommandModule
from .grlvr_idtfs import CommandIdentifiers

app = typer.Typer(add_completion=False, no_args_is_help=True,
                  help="GRPO sample-reuse lab: train, measure constants, verify bounds, report.")
module = CommandModule()

ConfigOption = Annotated[Optional[Path], typer.Option("--config", "-c", help="Run-config JSON file")]
SetOption = Annotated[Optional[list[str]], typer.Option("--set", help="Dotted override key=value (repeatable)")]
SeedOption = Annotated[Optional[int], typer.Option("--seed", help="Overrides the config seed")]
OutputOption = Annotated[Path, typer.Option("--output-dir", "-o", envvar="GRLVR_OUTPUT_DIR",
                                            help="Artifact directory")]
CheckpointOption = Annotated[Optional[Path], typer.Option("--checkpoint", help="Checkpoint file or run directory")]


class LogLevel(str, Enum):
    DEBUG = "DEBUG"
    INFO = "INFO"
    WARNING = "WARNING"
    ERROR = "ERROR"


@app.callback()
def configure(
    ctx: typer.Context,
    log_level: Annotated[LogLevel, typer.Option("--log-level", case_sensitive=False,
                                                help="Logging level")] = LogLevel.INFO,
    quiet: Annotated[bool, typer.Option("--quiet", "-q", help="Hide progress bars")] = False,
):
    logging.getLogger().setLevel(log_level.value)
    ctx.obj = {"quiet": quiet}


def _dispatch(ctx: typer.Context, invocation: CliInvocation) -> None:
    invocation.quiet = bool((ctx.obj or {}).get("quiet", False))
    result = module.execute(invocation.subcommand, invocation)
    raise typer.Exit(code=int(result))


@app.command(CommandIdentifiers.TRAIN)
def train(ctx: typer.Context, config: ConfigOption = None, overrides: SetOption = None, seed: SeedOption = None,
          output_dir: OutputOption = Path("output")):
    """Run the GRPO training loop."""
    _dispatch(ctx, CliInvocation(CommandIdentifiers.TRAIN, config, overrides or [], output_dir, seed))


@app.command(CommandIdentifiers.MEASURE)
def measure(ctx: typer.Context, checkpoint: CheckpointOption = None, config: ConfigOption = None,
            overrides: SetOption = None, seed: SeedOption = None, output_dir: OutputOption = Path("output")):
    """Measure the architectural constants of a checkpoint."""
    _dispatch(ctx, CliInvocation(CommandIdentifiers.MEASURE, config, overrides or [], output_dir, seed,
                                 checkpoint=checkpoint))


@app.command(CommandIdentifiers.VERIFY)
def verify(ctx: typer.Context, checkpoint: CheckpointOption = None, config: ConfigOption = None,
           overrides: SetOption = None, seed: SeedOption = None, output_dir: OutputOption = Path("output")):
    """Run the inequality suite on live rollout batches."""
    _dispatch(ctx, CliInvocation(CommandIdentifiers.VERIFY, config, overrides or [], output_dir, seed,
                                 checkpoint=checkpoint))


@app.command(CommandIdentifiers.REPORT)
def report(ctx: typer.Context,
           metrics: Annotated[list[Path], typer.Argument(help="metrics.jsonl files, baseline first")],
           output_dir: OutputOption = Path("output")):
    """Build CSVs and summaries from metrics streams."""
    _dispatch(ctx, CliInvocation(CommandIdentifiers.REPORT, output_dir=output_dir, metrics=list(metrics)))
