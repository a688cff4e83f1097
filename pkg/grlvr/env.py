"""Synthetic verifiable-reward tasks and policy rollouts."""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from .config import ModelConfig, TaskConfig
from .errors import InputError
from .grlvr_idtfs import TokenIdentifiers
from .model import PolicyParams, forward, sample_token

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TaskInstance:
    prompt: tuple[int, ...]
    target: tuple[int, ...]
    task_kind: Literal["modsum", "copy"] = "modsum"


@dataclass
class Trajectory:
    instance: TaskInstance
    response: list[int] = field(default_factory=list)
    logprob_old: list[float] = field(default_factory=list)
    reward: int = 0
    terminated: Literal["eos", "max_len"] = "max_len"

    def __post_init__(self):
        if len(self.logprob_old) != len(self.response):
            raise InputError("one behavior log-prob per response token is required")


def generate_instance(kind: str, difficulty: int, rng: np.random.Generator, base: int = 10,
                      max_seq_len: int = 32, vocab_size: int = 64) -> TaskInstance:
    if difficulty < 1:
        raise InputError("difficulty must be at least 1")
    if kind == "modsum":
        target_len = 1
    elif kind == "copy":
        target_len = difficulty
    else:
        raise InputError(f"unknown task kind '{kind}'")
    # prompt, target and EOS must fit in one sequence
    if difficulty + 1 + target_len + 1 > max_seq_len:
        raise InputError(f"difficulty {difficulty} exceeds the sequence budget of {max_seq_len}")

    if kind == "modsum":
        if not 2 <= base <= TokenIdentifiers.DIGIT_LAST - TokenIdentifiers.DIGIT_FIRST + 1:
            raise InputError(f"base {base} has no digit tokens")
        operands = [int(x) for x in rng.integers(0, base, size=difficulty)]
        prompt = tuple(TokenIdentifiers.DIGIT_FIRST + x for x in operands) + (TokenIdentifiers.DELIMITER,)
        return TaskInstance(prompt, (TokenIdentifiers.DIGIT_FIRST + sum(operands) % base,), "modsum")
    if vocab_size <= TokenIdentifiers.SYMBOL_FIRST:
        raise InputError("vocabulary has no room for copy symbols")
    string = [int(x) for x in rng.integers(TokenIdentifiers.SYMBOL_FIRST, vocab_size, size=difficulty)]
    return TaskInstance(tuple(string) + (TokenIdentifiers.DELIMITER,), tuple(string), "copy")


def verify(instance: TaskInstance, response) -> int:
    response = list(response)
    if TokenIdentifiers.EOS in response:
        response = response[:response.index(TokenIdentifiers.EOS)]
    return int(tuple(response) == tuple(instance.target))


def response_budget(instance: TaskInstance, max_seq_len: int, response_slack: int = 2) -> int:
    # the scoring forward pass covers prompt + response[:-1]
    return max(1, min(len(instance.target) + response_slack, max_seq_len - len(instance.prompt) + 1))


def rollout_group(params: PolicyParams, instance: TaskInstance, group_size: int, temperature: float,
                  rng: np.random.Generator, response_slack: int = 2) -> list[Trajectory]:
    if group_size < 2:
        raise InputError("group_size must be at least 2")
    budget = response_budget(instance, params.config.max_seq_len, response_slack)
    group = []
    for _ in range(group_size):
        tokens = list(instance.prompt)
        response, logprobs, terminated = [], [], "max_len"
        while len(response) < budget:
            trace = forward(params, tokens)
            token, logprob = sample_token(trace.logits[-1], temperature, rng)
            response.append(token)
            logprobs.append(logprob)
            tokens.append(token)
            if token == TokenIdentifiers.EOS:
                terminated = "eos"
                break
        group.append(Trajectory(instance, response, logprobs, verify(instance, response), terminated))
    return group


class TaskSampler:
    """Draws per-group instances and rollouts from rng streams keyed by (seed, stream, iteration, group)."""

    def __init__(self, task: TaskConfig, model: ModelConfig, seed: int, stream: int = 0):
        self.task = task
        self.model = model
        self.seed = seed
        # separates the rollout draws from other consumers of the same seed
        self.stream = stream

    def group_rng(self, iteration: int, group_index: int) -> np.random.Generator:
        return np.random.default_rng([self.seed, self.stream, iteration, group_index])

    def instance(self, rng: np.random.Generator) -> TaskInstance:
        difficulty = int(rng.integers(self.task.difficulty_min, self.task.difficulty_max + 1))
        return generate_instance(self.task.kind, difficulty, rng, base=self.task.base,
                                 max_seq_len=self.model.max_seq_len, vocab_size=self.model.vocab_size)

    def instances(self, iteration: int, n_groups: int) -> list[TaskInstance]:
        return [self.instance(self.group_rng(iteration, g)) for g in range(n_groups)]

    def _group(self, params: PolicyParams, iteration: int, group_index: int, temperature: float) -> list[Trajectory]:
        rng = self.group_rng(iteration, group_index)
        instance = self.instance(rng)
        return rollout_group(params, instance, self.task.group_size, temperature, rng, self.task.response_slack)

    def rollout(self, params: PolicyParams, iteration: int, n_groups: int, temperature: float,
                workers: int = 1) -> list[list[Trajectory]]:
        """Groups in group-index order for any worker count."""
        if workers <= 1:
            return [self._group(params, iteration, g, temperature) for g in range(n_groups)]
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(lambda g: self._group(params, iteration, g, temperature), range(n_groups)))
