import typer

from ..grlvr_idtfs import CommandIdentifiers
from ..report import build_report
from .command import CliInvocation, GrlvrCommand, RunResult


class ReportCommand(GrlvrCommand):
    def __init__(self):
        super().__init__(CommandIdentifiers.REPORT)

    def run(self, invocation: CliInvocation) -> RunResult:
        summary = build_report(invocation.metrics, invocation.output_dir)
        for row in summary["sample_efficiency"]:
            typer.echo(f"{row['run']}: rollouts_to_reference={row['rollouts_to_reference']} speedup={row['speedup']}")
        return RunResult.OK
