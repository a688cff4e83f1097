import logging
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path

import typer

from ..config import RunConfig, dump_config, load_config
from ..errors import CheckpointError, ConfigError, DegenerateConstantError, InputError, NumericError

logging.basicConfig(
    level=logging.INFO,
    format="%(asctime)s | %(name)s | %(message)s",
    datefmt="[%d-%b-%y %H:%M:%S]",
)


class RunResult(IntEnum):
    OK = 0
    VIOLATION = 1
    ERROR_INVALID_PARAMS = 2
    NUMERIC_ABORT = 3


@dataclass
class CliInvocation:
    subcommand: str
    config_path: Path | None = None
    overrides: list[str] = field(default_factory=list)
    output_dir: Path = Path("output")
    seed: int | None = None
    quiet: bool = True
    checkpoint: Path | None = None
    metrics: list[Path] = field(default_factory=list)


def emit_error(kind: str, message: str) -> None:
    """One machine-parsable line on stderr."""
    message = " ".join(str(message).split())
    typer.echo(f"grlvr-error kind={kind} message={message}", err=True)


class GrlvrCommand:
    def __init__(self, name: str):
        self.name = name
        self.logger = logging.getLogger(f"grlvr.commands.{name}")

    def execute(self, invocation: CliInvocation) -> RunResult:
        try:
            result = self.run(invocation)
        except ConfigError as e:
            emit_error("config", e)
            result = RunResult.ERROR_INVALID_PARAMS
        except CheckpointError as e:
            emit_error("io", e)
            result = RunResult.ERROR_INVALID_PARAMS
        except InputError as e:
            emit_error("input", e)
            result = RunResult.ERROR_INVALID_PARAMS
        except (NumericError, DegenerateConstantError) as e:
            emit_error("numeric", e)
            result = RunResult.NUMERIC_ABORT
        except OSError as e:
            emit_error("io", e)
            result = RunResult.ERROR_INVALID_PARAMS
        is_successful = result == RunResult.OK
        self.logger.info("Command %s finished %s", self.name, "successfully" if is_successful else "unsuccessfully")
        return result

    def run(self, invocation: CliInvocation) -> RunResult:
        raise NotImplementedError

    def resolve_config(self, invocation: CliInvocation) -> RunConfig:
        """File, then overrides, then --seed; echoed into the output directory before any compute."""
        overrides = list(invocation.overrides)
        if invocation.seed is not None:
            overrides.append(f"seed={invocation.seed}")
        config = load_config(invocation.config_path, overrides)
        dump_config(config, Path(invocation.output_dir) / "resolved_config.json")
        return config
