"""GRPO training loop with K-step sample reuse and dynamic gradient gating."""
import logging
import math
import sys
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from tqdm import tqdm

from .checkpoint import save_adam, save_checkpoint
from .config import RunConfig, dump_config
from .env import TaskSampler
from .errors import DegenerateConstantError, NumericError
from .gating import GateState, apply_decision, observe
from .grpo import (
    RolloutBatch,
    batch_gradients,
    compute_traces,
    logit_gradients,
    surrogate_value,
    token_records,
)
from .metrics import JsonlWriter, MetricsRecord, component_weight_change, write_json
from .model import LM_HEAD, PolicyParams
from .optimizer import AdamState, adam_step
from .theory import batch_sites, constant_table
from .verification import InequalitySuite
from .warmup import warm_start

logger = logging.getLogger(__name__)

TAIL_PROBABILITY = 0.05
LAST_CHECKPOINTS = 5


@dataclass
class IterationResult:
    params: PolicyParams
    adam: AdamState
    gate_state: GateState
    records: list[MetricsRecord]
    gate_fired: bool = False
    suite: InequalitySuite | None = None


@dataclass
class RunSummary:
    status: str
    iterations_completed: int
    optimizer_steps: int
    rollouts_consumed: int
    gate_fires: int
    params: PolicyParams
    checkpoints: list[str] = field(default_factory=list)
    error: str | None = None


def _gate_config(config: RunConfig):
    # outside the gated regime the detector only monitors
    gate = config.resolved_gate
    if config.gate_enabled:
        return gate
    return gate.model_copy(update={"tau": math.inf})


def _reference_logprobs(params: PolicyParams, batch: RolloutBatch, records) -> list[list[float]]:
    traces = compute_traces(params.reference_params(), batch)
    return [[float(trace.logits[r.position, r.token_id] - np.logaddexp.reduce(trace.logits[r.position]))
             for r in rows] for trace, rows in zip(traces, records)]


def _constants_snapshot(params: PolicyParams, batch: RolloutBatch, traces, max_tokens: int) -> dict | None:
    try:
        table = constant_table(params, traces, batch_sites(batch, max_tokens))
    except DegenerateConstantError as e:
        logger.warning("Constants snapshot skipped: %s", e)
        return None
    return {"median": table["median"].c_struct, "p95": table["p95"].c_struct, "max": table["max"].c_struct}


def train_iteration(params: PolicyParams, adam: AdamState, gate_state: GateState, config: RunConfig,
                    iteration: int, sampler: TaskSampler, previous_weights: dict | None = None,
                    suite: InequalitySuite | None = None) -> IterationResult:
    """One outer iteration: snapshot rollouts, then up to K reuse steps on the same batch.

    Inputs are never mutated, so a ``NumericError`` leaves the caller's state as it was
    at the start of the iteration.
    """
    trainer_cfg = config.trainer
    gate_cfg = _gate_config(config)
    groups = sampler.rollout(params, iteration, trainer_cfg.prompt_batch, trainer_cfg.temperature,
                             trainer_cfg.rollout_workers)
    batch = RolloutBatch(groups, config.task.group_size, behavior_params_step=adam.step)
    mean_reward = batch.mean_reward()
    rollouts_consumed = (iteration + 1) * trainer_cfg.prompt_batch * config.task.group_size
    previous_weights = previous_weights if previous_weights is not None else params.reference
    constants_due = (config.theory.constants_interval > 0
                     and iteration % config.theory.constants_interval == 0)

    current, state, gate = params, adam, gate_state
    records, fired, ref_logprobs = [], False, None
    for k in range(1, config.effective_max_reuse + 1):
        started = time.perf_counter()
        traces = compute_traces(current, batch)
        if suite is not None:
            suite.check_batch(current, batch, traces, trainer_cfg.eps_clip)
        tokens = token_records(batch, traces, trainer_cfg.eps_clip)
        active = [r for rows in tokens for r in rows if r.active]

        loss = surrogate_value(tokens, trainer_cfg.eps_clip)
        if trainer_cfg.kl_coef:
            if ref_logprobs is None:
                ref_logprobs = _reference_logprobs(current, batch, tokens)
            kl = np.mean([r.logprob_new - ref for rows, refs in zip(tokens, ref_logprobs)
                          for r, ref in zip(rows, refs) if r.active])
            loss -= trainer_cfg.kl_coef * float(kl)

        grads = batch_gradients(current, traces, logit_gradients(traces, tokens, trainer_cfg.kl_coef))
        g_t = grads.energy(LM_HEAD)
        decision, gate = observe(gate, gate_cfg, g_t, k)
        c_struct = _constants_snapshot(current, batch, traces, config.theory.max_tokens) \
            if constants_due and k == 1 else None

        step_grads = apply_decision(decision, grads)
        if decision.fired:
            fired = True
        else:
            # the gradient is of an objective; Adam descends
            current, state = adam_step(current, step_grads.scaled(-1.0), state, config.adam)
            current.assert_finite()

        ratios = np.array([r.ratio for r in active])
        pi_old = np.exp([r.logprob_old for r in active])
        records.append(MetricsRecord(
            iteration=iteration,
            k=k,
            optimizer_step=state.step,
            rollouts_consumed=rollouts_consumed,
            is_checkpoint=False,
            mean_reward=mean_reward,
            loss=loss,
            chi2_hat=float(np.mean(ratios ** 2 - 1.0)),
            r2_mean=float(np.mean(ratios ** 2)),
            lm_grad_energy=g_t,
            global_grad_norm=grads.global_norm(),
            clip_fraction=float(np.mean([r.clipped for r in active])),
            approx_kl=float(np.mean((ratios - 1.0) - np.log(ratios))),
            ratio_mean=float(ratios.mean()),
            ratio_max=float(ratios.max()),
            tail_token_count=int(np.sum(pi_old < TAIL_PROBABILITY)),
            min_pi_old=float(pi_old.min()),
            weight_change=component_weight_change(current.weights, previous_weights, params.reference),
            gate=decision.as_event(),
            c_struct=c_struct,
            wall_ms=(time.perf_counter() - started) * 1000.0,
        ))
        if fired:
            logger.info("Iteration %d: reuse stopped at step %d", iteration, k)
            break
    return IterationResult(current, state, gate, records, fired, suite)


def checkpoint_name(iteration: int) -> str:
    return f"iter_{iteration:06d}"


class Trainer:
    def __init__(self, config: RunConfig, output_dir: Path, quiet: bool = True):
        self.config = config
        self.output_dir = Path(output_dir)
        self.quiet = quiet
        self.sampler = TaskSampler(config.task, config.model, config.seed)
        self.params = PolicyParams.init(config.model, np.random.default_rng(config.seed))
        self.adam = AdamState.fresh(self.params)
        self.gate_state = GateState()
        # end-of-iteration weights, oldest first, for the profile-interval weight change
        self.history: deque[dict] = deque([self.params.weights], maxlen=config.trainer.profile_interval)
        self.checkpoints: list[str] = []
        self.checkpoint_rewards: list[float] = []
        self.gate_fires = 0
        self.iterations_completed = 0
        self.warmup_loss: float | None = None

    @property
    def checkpoint_dir(self) -> Path:
        return self.output_dir / "checkpoints"

    def _save_checkpoint(self, iteration: int) -> None:
        name = checkpoint_name(iteration)
        save_checkpoint(self.checkpoint_dir / f"{name}.bin", self.params)
        save_adam(self.checkpoint_dir / f"{name}.adam.bin", self.adam, self.config.model)
        self.checkpoints.append(name)

    def _suite_for(self, iteration: int) -> InequalitySuite | None:
        interval = self.config.theory.verify_interval
        if interval and iteration % interval == 0:
            return InequalitySuite(max_tokens=self.config.theory.max_tokens)
        return None

    def step(self, iteration: int, writer: JsonlWriter) -> IterationResult:
        suite = self._suite_for(iteration)
        try:
            result = train_iteration(self.params, self.adam, self.gate_state, self.config, iteration,
                                     self.sampler, self.history[0], suite)
        except NumericError:
            logger.error("Numeric failure in iteration %d; state rolled back to its start", iteration)
            raise
        self.params, self.adam, self.gate_state = result.params, result.adam, result.gate_state
        self.history.append(self.params.weights)
        self.iterations_completed = iteration + 1
        self.gate_fires += int(result.gate_fired)

        if self.iterations_completed % self.config.trainer.profile_interval == 0:
            self._save_checkpoint(self.iterations_completed)
            self.checkpoint_rewards.append(result.records[-1].mean_reward)
            result.records[-1].is_checkpoint = True
        for record in result.records:
            writer.write(record.as_dict())
        if suite is not None:
            write_json(self.output_dir / "theory" / f"{checkpoint_name(iteration)}.json", suite.report())
            if suite.n_violations:
                logger.warning("Iteration %d: inequality checks violated: %s", iteration, suite.violated_checks())
        return result

    def final_report(self, status: str, error: str | None = None) -> dict:
        rewards = self.checkpoint_rewards[-LAST_CHECKPOINTS:]
        report = {
            "status": status,
            "regime": self.config.regime,
            "seed": self.config.seed,
            "iterations_completed": self.iterations_completed,
            "optimizer_steps": self.adam.step,
            "rollouts_consumed": self.iterations_completed * self.config.trainer.prompt_batch
            * self.config.task.group_size,
            "gate_fires": self.gate_fires,
            "warmup_steps": self.config.warmup.steps,
            "warmup_loss": self.warmup_loss,
            "checkpoints": self.checkpoints,
            "last_checkpoints_mean_reward": float(np.mean(rewards)) if rewards else None,
            "error": error,
        }
        write_json(self.output_dir / "final_report.json", report)
        return report

    def warm_start(self) -> None:
        """Replaces the random init with the warmed policy, which becomes the reference."""
        self.params, self.warmup_loss = warm_start(self.params, self.config)
        self.adam = AdamState.fresh(self.params)
        self.history = deque([self.params.weights], maxlen=self.config.trainer.profile_interval)

    def run(self) -> RunSummary:
        self.output_dir.mkdir(parents=True, exist_ok=True)
        dump_config(self.config, self.output_dir / "resolved_config.json")
        self.warm_start()
        save_checkpoint(self.checkpoint_dir / "reference.bin", self.params)
        total = self.config.trainer.total_iterations
        logger.info("Training %d iterations, regime %s, seed %d", total, self.config.regime, self.config.seed)

        disable = self.quiet or not sys.stderr.isatty()
        with JsonlWriter(self.output_dir / "metrics.jsonl") as writer:
            progress = tqdm(range(total), desc="train", disable=disable)
            try:
                for iteration in progress:
                    result = self.step(iteration, writer)
                    progress.set_postfix(reward=f"{result.records[-1].mean_reward:.3f}",
                                         k=len(result.records))
            except NumericError as e:
                self.final_report("numeric_abort", str(e))
                raise
            finally:
                progress.close()
        self.final_report("ok")
        return RunSummary("ok", self.iterations_completed, self.adam.step,
                          self.iterations_completed * self.config.trainer.prompt_batch * self.config.task.group_size,
                          self.gate_fires, self.params, self.checkpoints)


def run(config: RunConfig, output_dir: Path, quiet: bool = True) -> RunSummary:
    return Trainer(config, output_dir, quiet).run()
