from pathlib import Path

import numpy as np
import typer

from ..checkpoint import load_checkpoint
from ..errors import InputError
from ..grlvr_idtfs import CommandIdentifiers
from ..metrics import write_json
from ..model import PolicyParams
from ..verification import GradientFault, run_verification
from .command import CliInvocation, GrlvrCommand, RunResult, emit_error


def resolve_checkpoint(path: Path) -> Path:
    """A checkpoint file, or a run directory whose latest checkpoint is used."""
    path = Path(path)
    if path.is_file():
        return path
    if path.is_dir():
        candidates = sorted(p for p in (path / "checkpoints").glob("iter_*.bin") if not p.name.endswith(".adam.bin"))
        if candidates:
            return candidates[-1]
        if (path / "checkpoints" / "reference.bin").exists():
            return path / "checkpoints" / "reference.bin"
    raise InputError(f"no checkpoint found at {path}")


class VerifyCommand(GrlvrCommand):
    def __init__(self, fault: GradientFault | None = None):
        super().__init__(CommandIdentifiers.VERIFY)
        self.fault = fault

    def run(self, invocation: CliInvocation) -> RunResult:
        config = self.resolve_config(invocation)
        if invocation.checkpoint is not None:
            params = load_checkpoint(resolve_checkpoint(invocation.checkpoint))
            config = config.model_copy(update={"model": params.config})
        else:
            params = PolicyParams.init(config.model, np.random.default_rng(config.seed))

        suite = run_verification(params, config, fault=self.fault)
        report = suite.report()
        write_json(Path(invocation.output_dir) / "verify_report.json", report)
        for check in report["checks"]:
            self.logger.info("%s: %d checked, %d violations", check["name"], check["n_checked"],
                             check["n_violations"])
        if suite.n_violations:
            emit_error("violation", "checks=" + ",".join(suite.violated_checks()))
            return RunResult.VIOLATION
        if suite.unchecked():
            raise InputError("no eligible tokens for checks " + ",".join(suite.unchecked()))
        typer.echo("all checks passed")
        return RunResult.OK
