"""Runtime inequality suite: rank-1 closed forms, activation bounds, energy asymmetry,
lm_head energy bounds and the chi-square identity, checked on live batches."""
import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .config import RunConfig
from .env import TaskSampler
from .errors import InputError
from .grlvr_idtfs import CheckIdentifiers
from .grpo import (
    RolloutBatch,
    batch_gradients,
    compute_traces,
    error_signal,
    lm_head_gradient_from_records,
    logit_gradients,
    token_records,
)
from .model import (
    LM_HEAD,
    ForwardTrace,
    LayerGradients,
    PolicyParams,
    backward,
    intermediate_layer_names,
    logit_jacobians,
)
from .optimizer import AdamState, adam_step
from .theory import (
    ADVANTAGE_FLOOR,
    BOUND_SLACK,
    CONFIDENCE_CEILING,
    Site,
    batch_sites,
    c_max,
    check_asymmetry,
    check_divergence_bound,
    constant_table,
)

logger = logging.getLogger(__name__)

CLOSED_FORM_TOLERANCE = 1e-8
IDENTITY_TOLERANCE = 1e-12

GradientFault = Callable[[LayerGradients], LayerGradients]


@dataclass
class CheckResult:
    name: str
    n_checked: int = 0
    n_violations: int = 0
    worst_margin: float = math.inf

    def record(self, margin: float, violated: bool) -> None:
        self.n_checked += 1
        self.n_violations += int(violated)
        self.worst_margin = min(self.worst_margin, margin)

    def as_dict(self) -> dict:
        return {
            "name": self.name,
            "n_checked": self.n_checked,
            "n_violations": self.n_violations,
            "worst_margin": self.worst_margin if self.n_checked else None,
        }


def _relative_slack(lhs: float, rhs: float) -> float:
    """(rhs - lhs) / |rhs|; negative when the inequality lhs <= rhs fails."""
    if rhs == 0.0:
        return 0.0 if lhs <= 0.0 else -math.inf
    return (rhs - lhs) / abs(rhs)


def _relative_error(actual: np.ndarray, expected: np.ndarray) -> float:
    scale = float(np.linalg.norm(expected))
    diff = float(np.linalg.norm(actual - expected))
    return diff / scale if scale > 0.0 else diff


@dataclass
class InequalitySuite:
    max_tokens: int = 256
    fault: GradientFault | None = None
    checks: dict[str, CheckResult] = field(default_factory=dict)

    def __post_init__(self):
        for name in (CheckIdentifiers.PROPOSITION1, CheckIdentifiers.LEMMA1_LOWER, CheckIdentifiers.LEMMA1_UPPER,
                     CheckIdentifiers.THEOREM1, CheckIdentifiers.LEMMA2, CheckIdentifiers.THEOREM2,
                     CheckIdentifiers.CHI2_IDENTITY):
            self.checks.setdefault(name, CheckResult(name))

    @property
    def n_violations(self) -> int:
        return sum(c.n_violations for c in self.checks.values())

    def report(self) -> dict:
        return {
            "passed": self.n_violations == 0 and not self.unchecked(),
            "n_violations": self.n_violations,
            "unchecked": self.unchecked(),
            "checks": [c.as_dict() for c in self.checks.values()],
        }

    def violated_checks(self) -> list[str]:
        return [c.name for c in self.checks.values() if c.n_violations]

    def unchecked(self) -> list[str]:
        """Checks that never saw an input; they prove nothing and do not pass."""
        return [c.name for c in self.checks.values() if not c.n_checked]

    def _token_gradients(self, params: PolicyParams, trace: ForwardTrace, position: int,
                         signal: np.ndarray) -> LayerGradients:
        dz = np.zeros_like(trace.logits)
        dz[position] = signal
        grads = backward(params, trace, dz)
        return self.fault(grads) if self.fault is not None else grads

    def check_batch(self, params: PolicyParams, batch: RolloutBatch, traces: list[ForwardTrace],
                    eps_clip: float) -> None:
        records = token_records(batch, traces, eps_clip)
        sites = batch_sites(batch, self.max_tokens)
        constants = constant_table(params, traces, sites)["max"]
        d_model = params.config.d_model
        eps = params.config.rms_eps
        layers = intermediate_layer_names(params.config)

        lower = self.checks[CheckIdentifiers.LEMMA1_LOWER]
        upper = self.checks[CheckIdentifiers.LEMMA1_UPPER]
        for trace in traces:
            mean_square = trace.final_mean_square()
            for position in range(trace.length):
                if mean_square[position] >= eps:
                    h2 = float(trace.lm_head_input[position] @ trace.lm_head_input[position])
                    margin = _relative_slack(constants.alpha_min * d_model, h2)
                    lower.record(margin, margin < -BOUND_SLACK)
                for name in layers:
                    x = trace.inputs[name][position]
                    margin = _relative_slack(float(x @ x), constants.beta_max * d_model)
                    upper.record(margin, margin < -BOUND_SLACK)

        by_site = {(r_index, r.position): r for r_index, rows in enumerate(records) for r in rows}
        prop1 = self.checks[CheckIdentifiers.PROPOSITION1]
        theorem1 = self.checks[CheckIdentifiers.THEOREM1]
        for site in sites:
            trace = traces[site.trace_index]
            record = by_site[(site.trace_index, site.position)]
            # zero-advantage tokens carry no signal; their closed forms are checked at unit advantage
            advantage = record.advantage if abs(record.advantage) > ADVANTAGE_FLOOR else 1.0
            signal = error_signal(record.ratio, advantage, trace.policy[site.position], site.action)
            grads = self._token_gradients(params, trace, site.position, signal)
            self._check_closed_forms(params, trace, site, signal, grads, prop1)

            confidence = float(trace.policy[site.position, site.action])
            eligible = (record.active and not record.clipped and confidence < CONFIDENCE_CEILING
                        and trace.final_mean_square()[site.position] >= eps)
            if not eligible:
                continue
            check = check_asymmetry(trace, grads, constants, site.position, site.action, advantage, layers)
            theorem1.record(_relative_slack(check.lhs, check.rhs), not check.holds)

        ratios = [r.ratio for rows in records for r in rows if r.active]
        r2_mean = float(np.mean(np.square(ratios)))
        lm_energy = float(np.sum(lm_head_gradient_from_records(traces, records) ** 2))
        margin = _relative_slack(lm_energy, c_max(batch, traces) * r2_mean)
        self.checks[CheckIdentifiers.LEMMA2].record(margin, margin < -BOUND_SLACK)

        divergence = check_divergence_bound(batch, traces, eps_clip)
        self.checks[CheckIdentifiers.THEOREM2].record(_relative_slack(divergence.lm_grad_energy, divergence.bound),
                                                      not divergence.bound_satisfied)
        gap = abs(divergence.r2_mean - 1.0 - divergence.chi2_hat)
        tolerance = IDENTITY_TOLERANCE * max(1.0, divergence.r2_mean)
        self.checks[CheckIdentifiers.CHI2_IDENTITY].record(tolerance - gap, gap > tolerance)

    def _check_closed_forms(self, params: PolicyParams, trace: ForwardTrace, site: Site, signal: np.ndarray,
                            grads: LayerGradients, result: CheckResult) -> None:
        h = trace.lm_head_input[site.position]
        error = _relative_error(grads.weights[LM_HEAD], np.outer(signal, h))
        jacobians = logit_jacobians(params, trace, site.position)
        for name, jacobian in jacobians.items():
            expected = np.outer(jacobian.T @ signal, trace.inputs[name][site.position])
            error = max(error, _relative_error(grads.token_gradient(name, trace, site.position), expected))
        result.record(CLOSED_FORM_TOLERANCE - error, error > CLOSED_FORM_TOLERANCE)


def run_verification(params: PolicyParams, config: RunConfig, fault: GradientFault | None = None,
                     n_batches: int | None = None) -> InequalitySuite:
    """Rollout batches from ``params``, each reused for naive Adam steps, every step checked."""
    n_batches = config.verify.n_batches if n_batches is None else n_batches
    if n_batches < 1 or config.trainer.prompt_batch < 1:
        raise InputError("empty batch")
    suite = InequalitySuite(max_tokens=config.verify.max_tokens, fault=fault)
    seed = config.seed if config.measure.seed is None else config.measure.seed
    sampler = TaskSampler(config.task, config.model, seed)
    for index in range(n_batches):
        groups = sampler.rollout(params, index, config.trainer.prompt_batch, config.trainer.temperature,
                                 config.trainer.rollout_workers)
        batch = RolloutBatch(groups, config.task.group_size)
        current, adam = params, AdamState.fresh(params)
        for k in range(1, config.verify.reuse_steps + 1):
            traces = compute_traces(current, batch)
            suite.check_batch(current, batch, traces, config.trainer.eps_clip)
            logger.debug("Checked batch %d at reuse step %d", index, k)
            if k == config.verify.reuse_steps:
                break
            records = token_records(batch, traces, config.trainer.eps_clip)
            grads = batch_gradients(current, traces, logit_gradients(traces, records))
            current, adam = adam_step(current, grads.scaled(-1.0), adam, config.adam)
    return suite
