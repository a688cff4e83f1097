import numpy as np
import pytest

from grlvr.config import ModelConfig, RunConfig
from grlvr.env import TaskSampler
from grlvr.grpo import RolloutBatch, compute_traces
from grlvr.model import PolicyParams


@pytest.fixture
def tiny_model_config() -> ModelConfig:
    return ModelConfig(d_model=8, n_layers=1, n_heads=2, d_ff=16, vocab_size=16, max_seq_len=16)


@pytest.fixture
def two_layer_config() -> ModelConfig:
    return ModelConfig(d_model=16, n_layers=2, n_heads=4, d_ff=24, vocab_size=16, max_seq_len=12, init_std=0.3)


@pytest.fixture
def random_params(two_layer_config) -> PolicyParams:
    rng = np.random.default_rng(0)
    params = PolicyParams.init(two_layer_config, rng)
    # non-unit norm scales exercise every path of the reverse pass
    weights = {n: (w + rng.normal(0, 0.2, size=w.shape) if w.ndim == 1 else w) for n, w in params.weights.items()}
    return PolicyParams(two_layer_config, weights)


@pytest.fixture
def small_run_config() -> RunConfig:
    return RunConfig.model_validate({
        "seed": 3,
        "model": {"d_model": 8, "n_layers": 1, "n_heads": 2, "d_ff": 16, "vocab_size": 16, "max_seq_len": 16,
                  "init_std": 0.2},
        "task": {"kind": "modsum", "base": 4, "difficulty_min": 2, "difficulty_max": 3, "group_size": 4},
        "adam": {"lr": 0.01},
        "trainer": {"max_reuse": 3, "prompt_batch": 2, "temperature": 1.0, "total_iterations": 4,
                    "profile_interval": 2},
        "theory": {"constants_interval": 2, "max_tokens": 8},
        "measure": {"n_prompts": 2},
        "verify": {"n_batches": 1, "reuse_steps": 2, "max_tokens": 16},
    })


@pytest.fixture
def small_batch(small_run_config):
    config = small_run_config
    params = PolicyParams.init(config.model, np.random.default_rng(config.seed))
    sampler = TaskSampler(config.task, config.model, config.seed)
    batch = RolloutBatch(sampler.rollout(params, 0, config.trainer.prompt_batch, 1.0), config.task.group_size)
    return params, batch, compute_traces(params, batch)
