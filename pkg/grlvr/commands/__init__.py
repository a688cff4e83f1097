from grlvr.commands.command import CliInvocation, RunResult
from grlvr.commands.command_module import CommandModule
