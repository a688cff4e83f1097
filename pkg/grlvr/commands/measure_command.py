from pathlib import Path

import typer
from tabulate import tabulate

from ..checkpoint import load_checkpoint
from ..env import TaskSampler
from ..errors import InputError
from ..grlvr_idtfs import CommandIdentifiers
from ..grpo import RolloutBatch, compute_traces
from ..metrics import write_json
from ..theory import activation_profile, batch_sites, constant_table
from .command import CliInvocation, GrlvrCommand, RunResult

TABLE_FIELDS = ("alpha_min", "beta_rms", "rho_v", "rho_ffn", "beta_max", "C", "c_struct")


class MeasureCommand(GrlvrCommand):
    def __init__(self):
        super().__init__(CommandIdentifiers.MEASURE)

    def run(self, invocation: CliInvocation) -> RunResult:
        if invocation.checkpoint is None:
            raise InputError("measure needs --checkpoint")
        config = self.resolve_config(invocation)
        params = load_checkpoint(invocation.checkpoint)
        config = config.model_copy(update={"model": params.config})

        seed = config.measure.seed if config.measure.seed is not None else config.seed
        sampler = TaskSampler(config.task, config.model, seed)
        groups = sampler.rollout(params, 0, config.measure.n_prompts, config.trainer.temperature,
                                 config.trainer.rollout_workers)
        batch = RolloutBatch(groups, config.task.group_size)
        traces = compute_traces(params, batch)
        sites = batch_sites(batch, config.theory.max_tokens)
        table = constant_table(params, traces, sites)
        activations = activation_profile(params, traces, sites).summary()

        report = {
            "checkpoint": str(invocation.checkpoint),
            "n_tokens": len(sites),
            "constants": {tag: constants.as_dict() for tag, constants in table.items()},
            "activations": activations,
        }
        write_json(Path(invocation.output_dir) / "measure.json", report)
        rows = [[name] + [getattr(table[tag], name) for tag in table] for name in TABLE_FIELDS]
        typer.echo(tabulate(rows, headers=["constant", *table], floatfmt=".6g"))
        rows = [[name] + [stats[tag] for tag in table] for name, stats in activations.items()]
        typer.echo(tabulate(rows, headers=["activation / d_model", *table], floatfmt=".6g"))
        return RunResult.OK
