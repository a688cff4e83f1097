from .command import CliInvocation, GrlvrCommand, RunResult
from .measure_command import MeasureCommand
from .report_command import ReportCommand
from .train_command import TrainCommand
from .verify_command import VerifyCommand


class CommandModule:
    def __init__(self, *commands: GrlvrCommand):
        commands = commands or (
            TrainCommand(),
            MeasureCommand(),
            VerifyCommand(),
            ReportCommand(),
        )
        self.commands = {command.name: command for command in commands}

    def execute(self, name: str, invocation: CliInvocation) -> RunResult:
        return self.commands[name].execute(invocation)
