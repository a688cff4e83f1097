import typer

from ..grlvr_idtfs import CommandIdentifiers
from ..trainer import run
from .command import CliInvocation, GrlvrCommand, RunResult


class TrainCommand(GrlvrCommand):
    def __init__(self):
        super().__init__(CommandIdentifiers.TRAIN)

    def run(self, invocation: CliInvocation) -> RunResult:
        config = self.resolve_config(invocation)
        summary = run(config, invocation.output_dir, quiet=invocation.quiet)
        typer.echo(f"iterations={summary.iterations_completed} optimizer_steps={summary.optimizer_steps} "
                   f"rollouts={summary.rollouts_consumed} gate_fires={summary.gate_fires}")
        return RunResult.OK
