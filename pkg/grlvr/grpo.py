"""GRPO objective pieces: group advantages, importance ratios, the clipped surrogate,
the per-token logit error signal and the batch lm_head gradient.

The surrogate is an objective (maximised); the trainer descends on its negation.
"""
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .env import Trajectory
from .errors import InputError, NumericError
from .model import ForwardTrace, LayerGradients, PolicyParams, backward, forward, log_softmax

logger = logging.getLogger(__name__)

ADVANTAGE_EPS = 1e-6


@dataclass
class TokenRecord:
    token_id: int
    logprob_old: float
    logprob_new: float
    ratio: float
    advantage: float
    clipped: bool = False
    active: bool = True
    position: int = 0


@dataclass
class RolloutBatch:
    groups: list[list[Trajectory]]
    group_size: int
    behavior_params_step: int = 0
    advantages: list[list[float]] = field(default_factory=list)

    def __post_init__(self):
        for group in self.groups:
            if len(group) != self.group_size:
                raise InputError(f"group of {len(group)} trajectories, expected {self.group_size}")
            prompts = {tuple(t.instance.prompt) for t in group}
            if len(prompts) != 1:
                raise InputError("trajectories of one group must share a prompt")
            for t in group:
                if t.reward not in (0, 1):
                    raise InputError(f"reward {t.reward!r} is not binary")
        if not self.advantages:
            self.advantages = [group_advantages([t.reward for t in group]) for group in self.groups]

    def trajectories(self) -> list[Trajectory]:
        return [t for group in self.groups for t in group]

    def trajectory_advantages(self) -> list[float]:
        return [a for group in self.advantages for a in group]

    def mean_reward(self) -> float:
        rewards = [t.reward for t in self.trajectories()]
        return float(np.mean(rewards)) if rewards else 0.0

    def n_active_tokens(self) -> int:
        return sum(len(t.response) for t in self.trajectories())


def group_advantages(rewards) -> list[float]:
    rewards = np.asarray(rewards, dtype=np.float64)
    if rewards.size < 2:
        raise InputError("group advantages need at least two rewards")
    std = float(np.std(rewards))
    if std == 0.0:
        return [0.0] * rewards.size
    return list((rewards - rewards.mean()) / (std + ADVANTAGE_EPS))


def importance_ratio(logprob_new: float, logprob_old: float) -> float:
    if not (math.isfinite(logprob_new) and math.isfinite(logprob_old)):
        raise NumericError("non-finite log-probability in importance ratio")
    return math.exp(logprob_new - logprob_old)


def trajectory_trace(params: PolicyParams, trajectory: Trajectory) -> ForwardTrace:
    """Forward over prompt + response[:-1]; positions from len(prompt)-1 predict the response."""
    sequence = list(trajectory.instance.prompt) + list(trajectory.response)
    return forward(params, sequence[:-1])


def active_positions(trajectory: Trajectory) -> range:
    start = len(trajectory.instance.prompt) - 1
    return range(start, start + len(trajectory.response))


def compute_traces(params: PolicyParams, batch: RolloutBatch) -> list[ForwardTrace]:
    traces = []
    for index, trajectory in enumerate(batch.trajectories()):
        trace = trajectory_trace(params, trajectory)
        trace.sequence_index = index
        traces.append(trace)
    return traces


def _check_aligned(batch: RolloutBatch, traces: list[ForwardTrace]) -> list[Trajectory]:
    trajectories = batch.trajectories()
    if len(traces) != len(trajectories):
        raise InputError(f"{len(traces)} traces for {len(trajectories)} trajectories")
    for trajectory, trace in zip(trajectories, traces):
        if trace.length != len(trajectory.instance.prompt) + len(trajectory.response) - 1:
            raise InputError("trace does not cover its trajectory")
    if not any(trajectory.response for trajectory in trajectories):
        raise InputError("empty active set")
    return trajectories


def _is_clipped(ratio: float, advantage: float, eps_clip: float) -> bool:
    clipped_ratio = min(max(ratio, 1.0 - eps_clip), 1.0 + eps_clip)
    # ties take the unclipped branch
    return clipped_ratio * advantage < ratio * advantage


def token_records(batch: RolloutBatch, traces: list[ForwardTrace], eps_clip: float) -> list[list[TokenRecord]]:
    if not 0.0 < eps_clip < 1.0:
        raise InputError("eps_clip must lie in (0, 1)")
    trajectories = _check_aligned(batch, traces)
    records = []
    for trajectory, trace, advantage in zip(trajectories, traces, batch.trajectory_advantages()):
        rows = []
        for position, token_id, logprob_old in zip(active_positions(trajectory), trajectory.response,
                                                    trajectory.logprob_old):
            logprob_new = float(log_softmax(trace.logits[position])[token_id])
            ratio = importance_ratio(logprob_new, logprob_old)
            rows.append(TokenRecord(token_id=int(token_id), logprob_old=float(logprob_old),
                                    logprob_new=logprob_new, ratio=ratio, advantage=float(advantage),
                                    clipped=_is_clipped(ratio, advantage, eps_clip), position=position))
        records.append(rows)
    return records


def _active(records: list[list[TokenRecord]]) -> list[TokenRecord]:
    return [r for rows in records for r in rows if r.active]


def surrogate_value(records: list[list[TokenRecord]], eps_clip: float) -> float:
    active = _active(records)
    if not active:
        raise InputError("empty active set")
    total = 0.0
    for r in active:
        clipped_ratio = min(max(r.ratio, 1.0 - eps_clip), 1.0 + eps_clip)
        total += min(r.ratio * r.advantage, clipped_ratio * r.advantage)
    return total / len(active)


def grpo_loss(batch: RolloutBatch, traces: list[ForwardTrace], eps_clip: float) -> tuple[float, list[list[bool]]]:
    """Clipped surrogate over the active response tokens and the per-token clipped flags."""
    records = token_records(batch, traces, eps_clip)
    return surrogate_value(records, eps_clip), [[r.clipped for r in rows] for rows in records]


def error_signal(ratio: float, advantage: float, policy, token_id: int) -> np.ndarray:
    policy = np.asarray(policy, dtype=np.float64)
    if not 0 <= token_id < policy.size:
        raise InputError(f"token id {token_id} outside vocabulary of {policy.size}")
    one_hot = np.zeros_like(policy)
    one_hot[token_id] = 1.0
    return ratio * advantage * (one_hot - policy)


def logit_gradients(traces: list[ForwardTrace], records: list[list[TokenRecord]],
                    kl_coef: float = 0.0) -> list[np.ndarray]:
    """Per-trajectory (S, V) logit gradients of the batch objective.

    Unclipped tokens carry E_i / T; clipped tokens carry nothing. With ``kl_coef``
    the k1 reference penalty adds -kl_coef / T * (e_a - pi).
    """
    n_active = len(_active(records))
    if n_active == 0:
        raise InputError("empty active set")
    grads = []
    for trace, rows in zip(traces, records):
        dz = np.zeros_like(trace.logits)
        for r in rows:
            if not r.active:
                continue
            policy = trace.policy[r.position]
            if not r.clipped:
                dz[r.position] += error_signal(r.ratio, r.advantage, policy, r.token_id)
            if kl_coef:
                dz[r.position] -= kl_coef * error_signal(1.0, 1.0, policy, r.token_id)
        grads.append(dz / n_active)
    return grads


def batch_gradients(params: PolicyParams, traces: list[ForwardTrace], logit_grads: list[np.ndarray]) -> LayerGradients:
    """Sum of per-trajectory reverse passes, accumulated in trajectory order."""
    total = None
    for trace, dz in zip(traces, logit_grads):
        grads = backward(params, trace, dz)
        if total is None:
            total = {n: g.copy() for n, g in grads.weights.items()}
        else:
            for name, g in grads.weights.items():
                total[name] += g
    if total is None:
        raise InputError("empty batch")
    return LayerGradients(total)


def lm_head_batch_gradient(batch: RolloutBatch, traces: list[ForwardTrace], eps_clip: float = 0.2) -> np.ndarray:
    """(1/T) sum of E_i h_{L,i}^T over active tokens; clipped tokens add zero but count in T."""
    records = token_records(batch, traces, eps_clip)
    return lm_head_gradient_from_records(traces, records)


def lm_head_gradient_from_records(traces: list[ForwardTrace], records: list[list[TokenRecord]]) -> np.ndarray:
    n_active = len(_active(records))
    if n_active == 0:
        raise InputError("empty active set")
    total = np.zeros((traces[0].logits.shape[1], traces[0].lm_head_input.shape[1]))
    c_max, r2_sum = 0.0, 0.0
    for trace, rows in zip(traces, records):
        for r in rows:
            if not r.active:
                continue
            e = error_signal(r.ratio, r.advantage, trace.policy[r.position], r.token_id)
            h = trace.lm_head_input[r.position]
            if not r.clipped:
                total += np.outer(e, h)
            r2_sum += r.ratio ** 2
            if r.ratio > 0:
                c_max = max(c_max, float(np.sum(e ** 2) / r.ratio ** 2 * np.sum(h ** 2)))
    gradient = total / n_active
    # gradient energy is bounded by c_max times the mean squared ratio
    assert np.sum(gradient ** 2) <= c_max * r2_sum / n_active * (1 + 1e-9) + 1e-300
    return gradient
