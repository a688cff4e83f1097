"""Binary checkpoint codec.

Layout (all little-endian):

    magic        8 bytes   b"GRLVRCP1" (model) / b"GRLVRAS1" (Adam moments)
    config       6 x int64 d_model, n_layers, n_heads, d_ff, vocab_size, max_seq_len
                 1 x f64   rms_eps
                 1 x int64 activation (0 = silu, 1 = relu)
    [Adam only]  1 x int64 optimizer step t
    tensors      every weight in ``weight_shapes`` order, row-major f64
                 (Adam: all first moments, then all second moments)
"""
import json
import logging
import struct
from pathlib import Path

import numpy as np

from .config import ModelConfig
from .errors import CheckpointError
from .model import PolicyParams, weight_shapes
from .optimizer import AdamState

logger = logging.getLogger(__name__)

MODEL_MAGIC = b"GRLVRCP1"
ADAM_MAGIC = b"GRLVRAS1"
_HEADER = struct.Struct("<6qdq")
_STEP = struct.Struct("<q")
_ACTIVATIONS = ("silu", "relu")


def _encode_config(config: ModelConfig) -> bytes:
    return _HEADER.pack(config.d_model, config.n_layers, config.n_heads, config.d_ff,
                        config.vocab_size, config.max_seq_len, config.rms_eps,
                        _ACTIVATIONS.index(config.activation))


def _decode_config(blob: bytes, offset: int) -> ModelConfig:
    try:
        d_model, n_layers, n_heads, d_ff, vocab, max_len, eps, act = _HEADER.unpack_from(blob, offset)
        return ModelConfig(d_model=d_model, n_layers=n_layers, n_heads=n_heads, d_ff=d_ff,
                           vocab_size=vocab, max_seq_len=max_len, rms_eps=eps,
                           activation=_ACTIVATIONS[act])
    except (struct.error, IndexError, ValueError) as e:
        raise CheckpointError(f"corrupt checkpoint header: {e}") from e


def _same_architecture(a: ModelConfig, b: ModelConfig) -> bool:
    return _encode_config(a) == _encode_config(b)


def _read_tensors(blob: bytes, offset: int, shapes: dict[str, tuple[int, ...]]) -> tuple[dict, int]:
    tensors = {}
    for name, shape in shapes.items():
        count = int(np.prod(shape))
        end = offset + 8 * count
        if end > len(blob):
            raise CheckpointError(f"checkpoint truncated while reading {name}")
        tensors[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).astype(np.float64).reshape(shape)
        offset = end
    return tensors, offset


def _tensor_bytes(tensors: dict[str, np.ndarray]) -> bytes:
    return b"".join(np.ascontiguousarray(t, dtype="<f8").tobytes() for t in tensors.values())


def _read(path: Path, magic: bytes) -> bytes:
    try:
        blob = Path(path).read_bytes()
    except FileNotFoundError as e:
        raise CheckpointError(f"checkpoint not found: {path}") from e
    if blob[:8] != magic:
        raise CheckpointError(f"{path}: bad magic {blob[:8]!r}, expected {magic!r}")
    return blob


def save_params(path: Path, weights: dict[str, np.ndarray], config: ModelConfig) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    ordered = {name: weights[name] for name in weight_shapes(config)}
    path.write_bytes(MODEL_MAGIC + _encode_config(config) + _tensor_bytes(ordered))


def save_checkpoint(path: Path, params: PolicyParams) -> None:
    save_params(path, params.weights, params.config)
    logger.debug("Saved checkpoint %s", path)


def load_weights(path: Path, expected: ModelConfig | None = None) -> tuple[ModelConfig, dict[str, np.ndarray]]:
    blob = _read(path, MODEL_MAGIC)
    config = _decode_config(blob, 8)
    if expected is not None and not _same_architecture(config, expected):
        raise CheckpointError(f"{path}: stored model config does not match the run config")
    weights, end = _read_tensors(blob, 8 + _HEADER.size, weight_shapes(config))
    if end != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - end} trailing bytes")
    return config, weights


def load_checkpoint(path: Path, expected: ModelConfig | None = None,
                    reference_path: Path | None = None) -> PolicyParams:
    config, weights = load_weights(path, expected)
    if expected is not None:
        # keep init_std and other non-architectural fields of the run config
        config = expected
    reference = {}
    if reference_path is not None and Path(reference_path).exists():
        _, reference = load_weights(reference_path, config)
    return PolicyParams(config, weights, reference)


def save_adam(path: Path, state: AdamState, config: ModelConfig) -> None:
    """Moments to ``path`` and a JSON sidecar with step and tensor shapes."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = list(weight_shapes(config))
    body = (ADAM_MAGIC + _encode_config(config) + _STEP.pack(state.step)
            + _tensor_bytes({n: state.m[n] for n in names}) + _tensor_bytes({n: state.v[n] for n in names}))
    path.write_bytes(body)
    sidecar = {
        "format": ADAM_MAGIC.decode(),
        "step": state.step,
        "weights": [{"name": n, "shape": list(state.m[n].shape)} for n in names],
    }
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2) + "\n")


def load_adam(path: Path, config: ModelConfig) -> AdamState:
    blob = _read(path, ADAM_MAGIC)
    stored = _decode_config(blob, 8)
    if not _same_architecture(stored, config):
        raise CheckpointError(f"{path}: stored model config does not match the run config")
    offset = 8 + _HEADER.size
    (step,) = _STEP.unpack_from(blob, offset)
    shapes = weight_shapes(config)
    m, offset = _read_tensors(blob, offset + _STEP.size, shapes)
    v, offset = _read_tensors(blob, offset, shapes)
    if offset != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - offset} trailing bytes")
    return AdamState(m=m, v=v, step=step)
