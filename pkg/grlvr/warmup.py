"""Supervised warm start on task answers.

A random-init policy almost never samples ``target + EOS``, so every GRPO group
would score zero and carry no advantage. A short teacher-forced cross-entropy
phase gives the run a partially trained starting policy; its weights become the
reference W_ref for weight-change profiling and the KL term.
"""
import logging

import numpy as np

from .config import RunConfig
from .env import TaskInstance, TaskSampler
from .errors import InputError
from .grlvr_idtfs import TokenIdentifiers
from .grpo import batch_gradients
from .model import LayerGradients, PolicyParams, forward, log_softmax
from .optimizer import AdamState, adam_step

logger = logging.getLogger(__name__)

WARMUP_STREAM = 1


def answer_log_likelihood(params: PolicyParams,
                          instances: list[TaskInstance]) -> tuple[float, LayerGradients]:
    """Mean log-likelihood of ``target + EOS`` given the prompt, and its gradient."""
    if not instances:
        raise InputError("warm start needs at least one instance")
    n_tokens = sum(len(instance.target) + 1 for instance in instances)
    traces, logit_grads, total = [], [], 0.0
    for instance in instances:
        answer = list(instance.target) + [TokenIdentifiers.EOS]
        sequence = list(instance.prompt) + answer
        trace = forward(params, sequence[:-1])
        dz = np.zeros_like(trace.logits)
        start = len(instance.prompt) - 1
        for offset, token in enumerate(answer):
            position = start + offset
            total += float(log_softmax(trace.logits[position])[token])
            dz[position] = -trace.policy[position]
            dz[position, token] += 1.0
        traces.append(trace)
        logit_grads.append(dz / n_tokens)
    return total / n_tokens, batch_gradients(params, traces, logit_grads)


def warm_start(params: PolicyParams, config: RunConfig) -> tuple[PolicyParams, float | None]:
    """Runs ``config.warmup.steps`` Adam steps; returns fresh-reference params and the last loss."""
    warmup = config.warmup
    if warmup.steps == 0:
        return params, None
    sampler = TaskSampler(config.task, config.model, config.seed, stream=WARMUP_STREAM)
    hyper = config.adam.model_copy(update={"lr": warmup.lr})
    current, state, loss = params, AdamState.fresh(params), None
    for step in range(warmup.steps):
        likelihood, grads = answer_log_likelihood(current, sampler.instances(step, warmup.batch_size))
        loss = -likelihood
        current, state = adam_step(current, grads.scaled(-1.0), state, hyper)
        current.assert_finite()
        if (step + 1) % warmup.log_interval == 0:
            logger.info("Warm start step %d/%d: cross-entropy %.4f", step + 1, warmup.steps, loss)
    logger.info("Warm start done after %d steps, cross-entropy %.4f", warmup.steps, loss)
    return PolicyParams(current.config, current.weights), loss
