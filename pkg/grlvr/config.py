"""Run configuration: one JSON file, validated by pydantic, plus dotted overrides."""
import json
import logging
from pathlib import Path
from typing import Any, Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import ConfigError
from .grlvr_idtfs import TokenIdentifiers

logger = logging.getLogger(__name__)


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", ser_json_inf_nan="constants")


class ModelConfig(_Section):
    d_model: int = Field(32, gt=0)
    n_layers: int = Field(2, gt=0)
    n_heads: int = Field(4, gt=0)
    d_ff: int = Field(64, gt=0)
    vocab_size: int = Field(64, ge=2)
    max_seq_len: int = Field(32, gt=0)
    rms_eps: float = Field(1e-5, gt=0)
    activation: Literal["silu", "relu"] = "silu"
    init_std: float = Field(0.02, gt=0)

    @model_validator(mode="after")
    def _heads_divide_width(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        return self

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


class TaskConfig(_Section):
    kind: Literal["modsum", "copy"] = "modsum"
    base: int = Field(10, ge=2, le=10)
    difficulty_min: int = Field(3, ge=1)
    difficulty_max: int = Field(5, ge=1)
    group_size: int = Field(8, ge=2)
    # tokens allowed beyond len(target) before a response is cut at max_len
    response_slack: int = Field(2, ge=1)

    @model_validator(mode="after")
    def _difficulty_range(self):
        if self.difficulty_min > self.difficulty_max:
            raise ValueError("difficulty_min must not exceed difficulty_max")
        return self


class GateConfig(_Section):
    tau: float = 0.5
    window: int = Field(20, ge=2)
    epsilon: float = Field(1e-8, gt=0)
    max_reuse: int | None = Field(None, ge=1)


class AdamConfig(_Section):
    lr: float = Field(1e-4, gt=0)
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    eps: float = Field(1e-8, gt=0)


class TrainerConfig(_Section):
    max_reuse: int = Field(4, ge=1)
    eps_clip: float = Field(0.2, gt=0, lt=1)
    kl_coef: float = Field(0.0, ge=0)
    prompt_batch: int = Field(8, ge=1)
    temperature: float = Field(0.7, gt=0)
    total_iterations: int = Field(200, ge=0)
    profile_interval: int = Field(10, ge=1)
    rollout_workers: int = Field(1, ge=1)


class WarmupConfig(_Section):
    """Supervised cross-entropy on task answers before the first GRPO step; 0 steps skips it."""
    steps: int = Field(0, ge=0)
    batch_size: int = Field(16, ge=1)
    lr: float = Field(3e-3, gt=0)
    log_interval: int = Field(50, ge=1)


class TheoryConfig(_Section):
    # 0 disables the periodic inequality-suite report during training
    verify_interval: int = Field(0, ge=0)
    # 0 disables the C_struct snapshot attached to metrics records
    constants_interval: int = Field(10, ge=0)
    max_tokens: int = Field(64, ge=1)


class MeasureConfig(_Section):
    n_prompts: int = Field(16, ge=1)
    seed: int | None = None


class VerifyConfig(_Section):
    n_batches: int = Field(2, ge=1)
    reuse_steps: int = Field(4, ge=1)
    max_tokens: int = Field(256, ge=1)


class RunConfig(_Section):
    seed: int = 0
    regime: Literal["single_use", "naive_reuse", "dgg"] = "dgg"
    model: ModelConfig = ModelConfig()
    task: TaskConfig = TaskConfig()
    gate: GateConfig = GateConfig()
    adam: AdamConfig = AdamConfig()
    trainer: TrainerConfig = TrainerConfig()
    warmup: WarmupConfig = WarmupConfig()
    theory: TheoryConfig = TheoryConfig()
    measure: MeasureConfig = MeasureConfig()
    verify: VerifyConfig = VerifyConfig()

    @model_validator(mode="after")
    def _check_cross_section(self):
        if self.gate.max_reuse is not None and self.gate.max_reuse != self.trainer.max_reuse:
            raise ValueError(
                f"gate.max_reuse={self.gate.max_reuse} disagrees with trainer.max_reuse={self.trainer.max_reuse}")

        needed = TokenIdentifiers.SYMBOL_FIRST + (2 if self.task.kind == "copy" else 0)
        if self.model.vocab_size < needed:
            raise ValueError(f"vocab_size={self.model.vocab_size} is too small for task '{self.task.kind}'")
        return self

    @property
    def resolved_gate(self) -> GateConfig:
        """Gate settings with K taken from the trainer; the echoed config keeps K unset."""
        return self.gate.model_copy(update={"max_reuse": self.trainer.max_reuse})

    @property
    def effective_max_reuse(self) -> int:
        return 1 if self.regime == "single_use" else self.trainer.max_reuse

    @property
    def gate_enabled(self) -> bool:
        return self.regime == "dgg"


def _decode_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(tree: dict, overrides: list[str]) -> dict:
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"override '{item}' is not of the form key=value")
        node = tree
        *parents, leaf = key.split(".")
        for part in parents:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError(f"override '{key}': '{part}' is not a section")
            node = child
        node[leaf] = _decode_value(raw)
    return tree


def load_config(path: Path | None = None, overrides: list[str] | None = None) -> RunConfig:
    tree: dict = {}
    if path is not None:
        try:
            tree = json.loads(Path(path).read_text())
        except FileNotFoundError as e:
            raise ConfigError(f"config file not found: {path}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
        if not isinstance(tree, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
    apply_overrides(tree, overrides or [])
    try:
        config = RunConfig.model_validate(tree)
    except ValidationError as e:
        raise ConfigError(str(e)) from e
    logger.debug("Resolved config: %s", config.model_dump_json())
    return config


def dump_config(config: RunConfig, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(config.model_dump_json(indent=2) + "\n")
