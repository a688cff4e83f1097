"""Pre-norm transformer policy with exact analytic forward and reverse passes.

Everything is float64 numpy. A forward pass keeps every intermediate quantity the
gradient analysis needs (layer inputs, lm_head input, logits, policy) in a
``ForwardTrace``; the reverse pass works on a leading batch of logit cotangents,
so Jacobians of the logits come out of a single pass with the vocabulary rows
as the batch axis.
"""
import logging
from dataclasses import dataclass, field

import numpy as np

from .config import ModelConfig
from .errors import InputError, NumericError
from .grlvr_idtfs import (
    INTERMEDIATE_LAYERS,
    LayerIdentifiers,
    block_weight_name,
    split_weight_name,
)

logger = logging.getLogger(__name__)

LM_HEAD = LayerIdentifiers.LM_HEAD


def weight_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Weight names in the fixed order used by checkpoints, mapped to shapes."""
    d, f, v = config.d_model, config.d_ff, config.vocab_size
    shapes = {
        LayerIdentifiers.TOKEN_EMBEDDING: (v, d),
        LayerIdentifiers.POSITION_EMBEDDING: (config.max_seq_len, d),
    }
    for b in range(config.n_layers):
        shapes[block_weight_name(b, LayerIdentifiers.RMSNORM_ATTN)] = (d,)
        for layer in (LayerIdentifiers.W_Q, LayerIdentifiers.W_K, LayerIdentifiers.W_V, LayerIdentifiers.W_O):
            shapes[block_weight_name(b, layer)] = (d, d)
        shapes[block_weight_name(b, LayerIdentifiers.RMSNORM_FFN)] = (d,)
        shapes[block_weight_name(b, LayerIdentifiers.W_GATE)] = (f, d)
        shapes[block_weight_name(b, LayerIdentifiers.W_UP)] = (f, d)
        shapes[block_weight_name(b, LayerIdentifiers.W_DOWN)] = (d, f)
    shapes[LayerIdentifiers.FINAL_RMSNORM] = (d,)
    shapes[LM_HEAD] = (v, d)
    return shapes


def intermediate_layer_names(config: ModelConfig) -> list[str]:
    return [block_weight_name(b, layer) for b in range(config.n_layers) for layer in INTERMEDIATE_LAYERS]


def is_intermediate(name: str) -> bool:
    block, layer = split_weight_name(name)
    return block is not None and layer in INTERMEDIATE_LAYERS


@dataclass
class PolicyParams:
    config: ModelConfig
    weights: dict[str, np.ndarray]
    reference: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        shapes = weight_shapes(self.config)
        missing = set(shapes) - set(self.weights)
        if missing:
            raise InputError(f"missing weights: {sorted(missing)}")
        if list(self.weights) != list(shapes):
            self.weights = {name: self.weights[name] for name in shapes}
        for name, shape in shapes.items():
            if self.weights[name].shape != shape:
                raise InputError(f"weight {name} has shape {self.weights[name].shape}, expected {shape}")
        if not self.reference:
            self.reference = {name: w.copy() for name, w in self.weights.items()}

    @classmethod
    def init(cls, config: ModelConfig, rng: np.random.Generator) -> "PolicyParams":
        weights = {}
        for name, shape in weight_shapes(config).items():
            if len(shape) == 1:
                weights[name] = np.ones(shape)
            else:
                weights[name] = rng.normal(0.0, config.init_std, size=shape)
        return cls(config, weights)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.weights[name]

    def names(self) -> list[str]:
        return list(self.weights)

    def copy(self) -> "PolicyParams":
        # the reference snapshot is never mutated, so it is shared
        return PolicyParams(self.config, {n: w.copy() for n, w in self.weights.items()}, self.reference)

    def with_weights(self, weights: dict[str, np.ndarray]) -> "PolicyParams":
        return PolicyParams(self.config, weights, self.reference)

    def reference_params(self) -> "PolicyParams":
        return PolicyParams(self.config, {n: w.copy() for n, w in self.reference.items()}, self.reference)

    def assert_finite(self) -> None:
        for name, w in self.weights.items():
            if not np.all(np.isfinite(w)):
                raise NumericError("non-finite parameter", layer=name)


@dataclass
class _BlockCache:
    attn_normalized: np.ndarray
    attn_scale: np.ndarray
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    probs: np.ndarray
    ffn_normalized: np.ndarray
    ffn_scale: np.ndarray
    gate_pre: np.ndarray
    up: np.ndarray


@dataclass
class ForwardTrace:
    """Per-position record of one forward pass over a token sequence.

    ``inputs`` maps every block-qualified intermediate layer name to the matrix of
    its inputs x^int, one row per position. Row p of ``logits``/``policy`` is the
    next-token distribution after reading ``tokens[:p + 1]``.
    """
    tokens: np.ndarray
    inputs: dict[str, np.ndarray]
    lm_head_input: np.ndarray
    logits: np.ndarray
    policy: np.ndarray
    final_residual: np.ndarray
    final_scale: np.ndarray
    blocks: list[_BlockCache]
    sequence_index: int = 0

    @property
    def length(self) -> int:
        return len(self.tokens)

    def final_mean_square(self) -> np.ndarray:
        return np.mean(self.final_residual ** 2, axis=-1)


@dataclass
class LayerGradients:
    """Gradients of a scalar of the logits w.r.t. every weight.

    ``outputs`` holds, for every intermediate layer (and for ``W_lm``, whose output
    is the logits), the gradient w.r.t. the layer output y at each position.
    """
    weights: dict[str, np.ndarray]
    outputs: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def lm_head_grad(self) -> np.ndarray:
        return self.weights[LM_HEAD]

    def energy(self, name: str) -> float:
        return float(np.sum(self.weights[name] ** 2))

    def global_norm(self) -> float:
        return float(np.sqrt(sum(np.sum(g ** 2) for g in self.weights.values())))

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(g)) for g in self.weights.values())

    def zeros_like(self) -> "LayerGradients":
        return LayerGradients({n: np.zeros_like(g) for n, g in self.weights.items()},
                              {n: np.zeros_like(g) for n, g in self.outputs.items()})

    def scaled(self, factor: float) -> "LayerGradients":
        return LayerGradients({n: g * factor for n, g in self.weights.items()},
                              {n: g * factor for n, g in self.outputs.items()})

    def token_gradient(self, name: str, trace: ForwardTrace, position: int) -> np.ndarray:
        """Own-position contribution (dL/dy_p)(x_p)^T of ``position`` to the weight gradient."""
        if name == LM_HEAD:
            return np.outer(self.outputs[LM_HEAD][position], trace.lm_head_input[position])
        return np.outer(self.outputs[name][position], trace.inputs[name][position])


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _activation(x: np.ndarray, kind: str) -> np.ndarray:
    if kind == "silu":
        return x * _sigmoid(x)
    return np.maximum(x, 0.0)


def _activation_grad(x: np.ndarray, kind: str) -> np.ndarray:
    if kind == "silu":
        s = _sigmoid(x)
        return s * (1.0 + x * (1.0 - s))
    return (x > 0.0).astype(np.float64)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - np.max(x, axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def _rmsnorm_parts(v: np.ndarray, eps: float) -> tuple[np.ndarray, np.ndarray]:
    scale = 1.0 / np.sqrt(np.mean(v ** 2, axis=-1) + eps)
    return v * scale[..., None], scale


def rmsnorm(v: np.ndarray, w: np.ndarray, eps: float) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if v.shape[-1] != w.shape[-1]:
        raise InputError(f"rmsnorm length mismatch: {v.shape[-1]} vs {w.shape[-1]}")
    if eps <= 0:
        raise InputError("rmsnorm eps must be positive")
    normalized, _ = _rmsnorm_parts(v, eps)
    return normalized * w


def _rmsnorm_backward(dout, normalized, scale, w):
    """Reverse of out = normalized * w with normalized = v * scale."""
    dw = np.einsum("bsd,sd->d", dout, normalized)
    dn = dout * w
    dv = scale[None, :, None] * (dn - normalized[None] * np.mean(dn * normalized[None], axis=-1, keepdims=True))
    return dv, dw


def _check_finite(x: np.ndarray, layer: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericError("non-finite value in forward pass", layer=layer)


def _split_heads(x: np.ndarray, n_heads: int) -> np.ndarray:
    # (..., S, d) -> (..., H, S, d/H)
    *lead, s, d = x.shape
    return np.moveaxis(x.reshape(*lead, s, n_heads, d // n_heads), -2, -3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    *lead, h, s, dh = x.shape
    return np.moveaxis(x, -3, -2).reshape(*lead, s, h * dh)


def forward(params: PolicyParams, tokens) -> ForwardTrace:
    cfg = params.config
    tokens = np.asarray(tokens, dtype=np.int64).reshape(-1)
    if tokens.size == 0:
        raise InputError("forward needs at least one token")
    if tokens.size > cfg.max_seq_len:
        raise InputError(f"sequence length {tokens.size} exceeds max_seq_len={cfg.max_seq_len}")
    if np.any(tokens < 0) or np.any(tokens >= cfg.vocab_size):
        raise InputError(f"token id out of range [0, {cfg.vocab_size})")

    s = tokens.size
    w = params.weights
    eps = cfg.rms_eps
    scale_qk = 1.0 / np.sqrt(cfg.head_dim)
    causal = np.triu(np.ones((s, s), dtype=bool), k=1)

    h = w[LayerIdentifiers.TOKEN_EMBEDDING][tokens] + w[LayerIdentifiers.POSITION_EMBEDDING][:s]
    inputs: dict[str, np.ndarray] = {}
    blocks: list[_BlockCache] = []
    for b in range(cfg.n_layers):
        name = lambda layer: block_weight_name(b, layer)  # noqa: E731

        attn_normalized, attn_scale = _rmsnorm_parts(h, eps)
        xa = attn_normalized * w[name(LayerIdentifiers.RMSNORM_ATTN)]
        q = xa @ w[name(LayerIdentifiers.W_Q)].T
        k = xa @ w[name(LayerIdentifiers.W_K)].T
        v = xa @ w[name(LayerIdentifiers.W_V)].T
        scores = _split_heads(q, cfg.n_heads) @ np.swapaxes(_split_heads(k, cfg.n_heads), -1, -2) * scale_qk
        scores = np.where(causal, -np.inf, scores)
        probs = softmax(scores)
        o = _merge_heads(probs @ _split_heads(v, cfg.n_heads))
        h = h + o @ w[name(LayerIdentifiers.W_O)].T
        _check_finite(h, name(LayerIdentifiers.W_O))

        ffn_normalized, ffn_scale = _rmsnorm_parts(h, eps)
        xf = ffn_normalized * w[name(LayerIdentifiers.RMSNORM_FFN)]
        gate_pre = xf @ w[name(LayerIdentifiers.W_GATE)].T
        up = xf @ w[name(LayerIdentifiers.W_UP)].T
        act = _activation(gate_pre, cfg.activation) * up
        h = h + act @ w[name(LayerIdentifiers.W_DOWN)].T
        _check_finite(h, name(LayerIdentifiers.W_DOWN))

        for layer in (LayerIdentifiers.W_Q, LayerIdentifiers.W_K, LayerIdentifiers.W_V):
            inputs[name(layer)] = xa
        inputs[name(LayerIdentifiers.W_O)] = o
        inputs[name(LayerIdentifiers.W_GATE)] = xf
        inputs[name(LayerIdentifiers.W_UP)] = xf
        inputs[name(LayerIdentifiers.W_DOWN)] = act
        blocks.append(_BlockCache(attn_normalized, attn_scale, q, k, v, probs,
                                  ffn_normalized, ffn_scale, gate_pre, up))

    final_normalized, final_scale = _rmsnorm_parts(h, eps)
    h_lm = final_normalized * w[LayerIdentifiers.FINAL_RMSNORM]
    logits = h_lm @ w[LM_HEAD].T
    _check_finite(logits, LM_HEAD)
    return ForwardTrace(
        tokens=tokens,
        inputs=inputs,
        lm_head_input=h_lm,
        logits=logits,
        policy=softmax(logits),
        final_residual=h,
        final_scale=final_scale,
        blocks=blocks,
    )


def _check_alignment(params: PolicyParams, trace: ForwardTrace) -> None:
    cfg = params.config
    if (trace.logits.shape[1] != cfg.vocab_size or trace.lm_head_input.shape[1] != cfg.d_model
            or len(trace.blocks) != cfg.n_layers):
        raise InputError("trace was not produced by a model with these parameters' config")


def _reverse(params: PolicyParams, trace: ForwardTrace, dz: np.ndarray, need_weights: bool):
    """Reverse pass for a batch of logit cotangents ``dz`` of shape (B, S, V).

    Returns weight gradients summed over the batch (empty unless ``need_weights``)
    and per-layer output gradients of shape (B, S, out).
    """
    cfg = params.config
    w = params.weights
    grads: dict[str, np.ndarray] = {}
    outputs: dict[str, np.ndarray] = {LM_HEAD: dz}
    scale_qk = 1.0 / np.sqrt(cfg.head_dim)

    def weight_grad(name: str, dy: np.ndarray, x: np.ndarray) -> None:
        if need_weights:
            grads[name] = np.einsum("bso,si->oi", dy, x)

    weight_grad(LM_HEAD, dz, trace.lm_head_input)
    dh = dz @ w[LM_HEAD]
    final_normalized = trace.final_residual * trace.final_scale[:, None]
    dh, dw = _rmsnorm_backward(dh, final_normalized, trace.final_scale, w[LayerIdentifiers.FINAL_RMSNORM])
    if need_weights:
        grads[LayerIdentifiers.FINAL_RMSNORM] = dw

    for b in reversed(range(cfg.n_layers)):
        name = lambda layer: block_weight_name(b, layer)  # noqa: E731
        cache = trace.blocks[b]

        # feed-forward sub-block
        outputs[name(LayerIdentifiers.W_DOWN)] = dh
        weight_grad(name(LayerIdentifiers.W_DOWN), dh, trace.inputs[name(LayerIdentifiers.W_DOWN)])
        dact = dh @ w[name(LayerIdentifiers.W_DOWN)]
        du = dact * _activation(cache.gate_pre, cfg.activation)
        dg = dact * cache.up * _activation_grad(cache.gate_pre, cfg.activation)
        outputs[name(LayerIdentifiers.W_GATE)] = dg
        outputs[name(LayerIdentifiers.W_UP)] = du
        xf = trace.inputs[name(LayerIdentifiers.W_GATE)]
        weight_grad(name(LayerIdentifiers.W_GATE), dg, xf)
        weight_grad(name(LayerIdentifiers.W_UP), du, xf)
        dxf = dg @ w[name(LayerIdentifiers.W_GATE)] + du @ w[name(LayerIdentifiers.W_UP)]
        dres, dw = _rmsnorm_backward(dxf, cache.ffn_normalized, cache.ffn_scale,
                                     w[name(LayerIdentifiers.RMSNORM_FFN)])
        if need_weights:
            grads[name(LayerIdentifiers.RMSNORM_FFN)] = dw
        dh = dh + dres

        # attention sub-block
        outputs[name(LayerIdentifiers.W_O)] = dh
        weight_grad(name(LayerIdentifiers.W_O), dh, trace.inputs[name(LayerIdentifiers.W_O)])
        do = _split_heads(dh @ w[name(LayerIdentifiers.W_O)], cfg.n_heads)
        q_h = _split_heads(cache.q, cfg.n_heads)
        k_h = _split_heads(cache.k, cfg.n_heads)
        v_h = _split_heads(cache.v, cfg.n_heads)
        dprobs = do @ np.swapaxes(v_h, -1, -2)
        dv = _merge_heads(np.swapaxes(cache.probs, -1, -2) @ do)
        dscores = cache.probs * (dprobs - np.sum(dprobs * cache.probs, axis=-1, keepdims=True))
        dq = _merge_heads(dscores @ k_h) * scale_qk
        dk = _merge_heads(np.swapaxes(dscores, -1, -2) @ q_h) * scale_qk
        xa = trace.inputs[name(LayerIdentifiers.W_Q)]
        dxa = np.zeros_like(dh)
        for layer, dy in ((LayerIdentifiers.W_Q, dq), (LayerIdentifiers.W_K, dk), (LayerIdentifiers.W_V, dv)):
            outputs[name(layer)] = dy
            weight_grad(name(layer), dy, xa)
            dxa = dxa + dy @ w[name(layer)]
        dres, dw = _rmsnorm_backward(dxa, cache.attn_normalized, cache.attn_scale,
                                     w[name(LayerIdentifiers.RMSNORM_ATTN)])
        if need_weights:
            grads[name(LayerIdentifiers.RMSNORM_ATTN)] = dw
        dh = dh + dres

    if need_weights:
        dh_total = dh.sum(axis=0)
        tok_grad = np.zeros_like(w[LayerIdentifiers.TOKEN_EMBEDDING])
        np.add.at(tok_grad, trace.tokens, dh_total)
        pos_grad = np.zeros_like(w[LayerIdentifiers.POSITION_EMBEDDING])
        pos_grad[:trace.length] = dh_total
        grads[LayerIdentifiers.TOKEN_EMBEDDING] = tok_grad
        grads[LayerIdentifiers.POSITION_EMBEDDING] = pos_grad
        grads = {n: grads[n] for n in params.names()}
    return grads, outputs


def backward(params: PolicyParams, trace: ForwardTrace, logit_grads) -> LayerGradients:
    """Gradient of sum_p <logit_grads[p], z_p> w.r.t. every weight.

    ``logit_grads`` has one row per position of the trace; rows of inactive
    positions are zero.
    """
    _check_alignment(params, trace)
    logit_grads = np.asarray(logit_grads, dtype=np.float64)
    if logit_grads.shape != trace.logits.shape:
        raise InputError(f"logit_grads shape {logit_grads.shape} does not match trace {trace.logits.shape}")
    grads, outputs = _reverse(params, trace, logit_grads[None], need_weights=True)
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient", layer=name)
    return LayerGradients(grads, {n: y[0] for n, y in outputs.items()})


def logit_jacobians(params: PolicyParams, trace: ForwardTrace, token: int) -> dict[str, np.ndarray]:
    """Exact dz_p/dy_p for every intermediate layer at position ``token``, shape (V, out)."""
    _check_alignment(params, trace)
    if not 0 <= token < trace.length:
        raise InputError(f"position {token} outside trace of length {trace.length}")
    vocab = params.config.vocab_size
    seeds = np.zeros((vocab, trace.length, vocab))
    seeds[np.arange(vocab), token, np.arange(vocab)] = 1.0
    _, outputs = _reverse(params, trace, seeds, need_weights=False)
    return {name: outputs[name][:, token, :] for name in intermediate_layer_names(params.config)}


def logit_jacobian(params: PolicyParams, trace: ForwardTrace, layer_name: str, token: int) -> np.ndarray:
    if split_weight_name(layer_name)[1] == LM_HEAD:
        raise InputError("Jacobian defined only for intermediate layers")
    if not is_intermediate(layer_name):
        raise InputError(f"'{layer_name}' is not an intermediate linear layer")
    return logit_jacobians(params, trace, token)[layer_name]


def sample_token(logits, temperature: float, rng: np.random.Generator) -> tuple[int, float]:
    """Draw from softmax(logits / temperature); the returned log-prob is at temperature 1."""
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise NumericError("non-finite logits passed to sampler")
    if temperature <= 0:
        raise InputError("temperature must be positive")
    probs = softmax(logits / temperature)
    u = rng.random()
    token = min(int(np.searchsorted(np.cumsum(probs), u, side="right")), logits.size - 1)
    return token, float(log_softmax(logits)[token])
