"""Metrics records, their JSONL stream, and the relative weight-change profile."""
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import InputError
from .grlvr_idtfs import ATTN_LAYERS, MLP_LAYERS, ComponentIdentifiers, LayerIdentifiers, split_weight_name

logger = logging.getLogger(__name__)

# fields excluded when two metric streams are compared for determinism
NONDETERMINISTIC_FIELDS = ("wall_ms",)


@dataclass
class MetricsRecord:
    iteration: int
    k: int
    optimizer_step: int
    rollouts_consumed: int
    is_checkpoint: bool
    mean_reward: float
    loss: float
    chi2_hat: float
    r2_mean: float
    lm_grad_energy: float
    global_grad_norm: float
    clip_fraction: float
    approx_kl: float
    ratio_mean: float
    ratio_max: float
    tail_token_count: int
    min_pi_old: float
    weight_change: dict[str, float] = field(default_factory=dict)
    gate: dict = field(default_factory=dict)
    c_struct: dict[str, float] | None = None
    wall_ms: float = 0.0

    def as_dict(self) -> dict:
        return asdict(self)


def _encode(value) -> str:
    if isinstance(value, (bool, np.bool_)) or value is None:
        return json.dumps(value if value is None else bool(value))
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return format(value, ".17g") if math.isfinite(value) else "null"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, dict):
        return "{" + ", ".join(f"{json.dumps(str(k))}: {_encode(v)}" for k, v in value.items()) + "}"
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_encode(v) for v in value) + "]"
    return json.dumps(str(value))


def encode_line(payload: dict) -> str:
    """One JSON object; floats keep 17 significant digits, non-finite floats become null."""
    return _encode(payload)


class JsonlWriter:
    def __init__(self, path: Path, append: bool = False):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._handle = self.path.open("a" if append else "w", encoding="utf-8")

    def write(self, payload: dict) -> None:
        self._handle.write(encode_line(payload) + "\n")
        self._handle.flush()

    def close(self) -> None:
        self._handle.close()

    def __enter__(self) -> "JsonlWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def read_jsonl(path: Path) -> list[dict]:
    records = []
    with Path(path).open(encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise InputError(f"{path}:{line_no}: malformed JSONL line: {e.msg}") from e
            if not isinstance(record, dict):
                raise InputError(f"{path}:{line_no}: expected a JSON object")
            records.append(record)
    return records


def relative_weight_change(w_t: np.ndarray, w_prev: np.ndarray, w_ref: np.ndarray) -> float:
    if w_t.shape != w_prev.shape or w_t.shape != w_ref.shape:
        raise InputError("weight shapes differ")
    ref_norm = float(np.linalg.norm(w_ref))
    if ref_norm == 0.0:
        raise InputError("reference weight has zero norm")
    return float(np.linalg.norm(w_t - w_prev)) / ref_norm


def component_of(name: str) -> str | None:
    block, layer = split_weight_name(name)
    if name == LayerIdentifiers.LM_HEAD:
        return ComponentIdentifiers.LM_HEAD
    if block is None:
        return None
    if layer in ATTN_LAYERS:
        return ComponentIdentifiers.ATTN
    if layer in MLP_LAYERS:
        return ComponentIdentifiers.MLP
    return None


def component_weight_change(current: dict[str, np.ndarray], previous: dict[str, np.ndarray],
                            reference: dict[str, np.ndarray]) -> dict[str, float]:
    """Mean per-matrix relative change for the lm_head, attention and MLP groups."""
    groups: dict[str, list[float]] = {ComponentIdentifiers.LM_HEAD: [], ComponentIdentifiers.ATTN: [],
                                      ComponentIdentifiers.MLP: []}
    for name, weight in current.items():
        component = component_of(name)
        if component is not None:
            groups[component].append(relative_weight_change(weight, previous[name], reference[name]))
    return {component: float(np.mean(values)) for component, values in groups.items() if values}


def _finite(value):
    if isinstance(value, dict):
        return {str(k): _finite(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_finite(v) for v in value]
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        return float(value) if math.isfinite(value) else None
    return value


def write_json(path: Path, payload: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_finite(payload), indent=2) + "\n")
