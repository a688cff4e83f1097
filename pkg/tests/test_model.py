import numpy as np
import pytest

from grlvr.config import ModelConfig
from grlvr.errors import InputError, NumericError
from grlvr.grlvr_idtfs import LayerIdentifiers, block_weight_name
from grlvr.model import (
    LM_HEAD,
    PolicyParams,
    backward,
    forward,
    intermediate_layer_names,
    logit_jacobian,
    logit_jacobians,
    rmsnorm,
    sample_token,
    softmax,
)


def _straight_line_logits(params: PolicyParams, tokens) -> np.ndarray:
    """Position-by-position re-implementation of the same architecture."""
    cfg = params.config
    w = params.weights
    dh = cfg.head_dim

    def norm(v, g):
        return v / np.sqrt(np.mean(v * v) + cfg.rms_eps) * g

    h = [w[LayerIdentifiers.TOKEN_EMBEDDING][t] + w[LayerIdentifiers.POSITION_EMBEDDING][i]
         for i, t in enumerate(tokens)]
    for b in range(cfg.n_layers):
        W = {layer: w[block_weight_name(b, layer)] for layer in (
            LayerIdentifiers.W_Q, LayerIdentifiers.W_K, LayerIdentifiers.W_V, LayerIdentifiers.W_O,
            LayerIdentifiers.W_GATE, LayerIdentifiers.W_UP, LayerIdentifiers.W_DOWN,
            LayerIdentifiers.RMSNORM_ATTN, LayerIdentifiers.RMSNORM_FFN)}
        xs = [norm(v, W[LayerIdentifiers.RMSNORM_ATTN]) for v in h]
        q = [W[LayerIdentifiers.W_Q] @ x for x in xs]
        k = [W[LayerIdentifiers.W_K] @ x for x in xs]
        v = [W[LayerIdentifiers.W_V] @ x for x in xs]
        attended = []
        for i in range(len(tokens)):
            o = np.zeros(cfg.d_model)
            for head in range(cfg.n_heads):
                sl = slice(head * dh, (head + 1) * dh)
                scores = np.array([q[i][sl] @ k[j][sl] / np.sqrt(dh) for j in range(i + 1)])
                p = np.exp(scores - scores.max())
                p /= p.sum()
                o[sl] = sum(p[j] * v[j][sl] for j in range(i + 1))
            attended.append(o)
        h = [h[i] + W[LayerIdentifiers.W_O] @ attended[i] for i in range(len(tokens))]
        for i in range(len(tokens)):
            x = norm(h[i], W[LayerIdentifiers.RMSNORM_FFN])
            g = W[LayerIdentifiers.W_GATE] @ x
            a = g / (1.0 + np.exp(-g)) * (W[LayerIdentifiers.W_UP] @ x)
            h[i] = h[i] + W[LayerIdentifiers.W_DOWN] @ a
    return np.array([w[LM_HEAD] @ norm(v, w[LayerIdentifiers.FINAL_RMSNORM]) for v in h])


def test_rmsnorm_direct_evaluation():
    out = rmsnorm(np.array([3.0, 4.0]), np.array([1.0, 2.0]), 1e-5)
    np.testing.assert_allclose(out, [0.848528, 2.262741], atol=1e-6)


def test_rmsnorm_zero_and_constant_vectors():
    assert np.all(rmsnorm(np.zeros(4), np.ones(4), 1e-5) == 0.0)
    out = rmsnorm(np.full(4, -10.0), np.ones(4), 1e-5)
    np.testing.assert_allclose(out, -np.ones(4), rtol=1e-7)


def test_rmsnorm_rejects_length_mismatch():
    with pytest.raises(InputError):
        rmsnorm(np.ones(3), np.ones(2), 1e-5)


def test_zero_weights_give_uniform_policy(tiny_model_config):
    params = PolicyParams.init(tiny_model_config, np.random.default_rng(0))
    weights = {n: (w if n in (LayerIdentifiers.TOKEN_EMBEDDING, LayerIdentifiers.POSITION_EMBEDDING)
                   else np.zeros_like(w)) for n, w in params.weights.items()}
    trace = forward(PolicyParams(tiny_model_config, weights), [5])
    assert np.all(trace.logits == 0.0)
    np.testing.assert_allclose(trace.policy, np.full((1, 16), 1 / 16), rtol=0, atol=1e-15)


def test_forward_is_bit_reproducible(random_params):
    a = forward(random_params, [1, 2, 3, 4])
    b = forward(random_params, [1, 2, 3, 4])
    assert np.array_equal(a.logits, b.logits)
    for name in a.inputs:
        assert np.array_equal(a.inputs[name], b.inputs[name])


def test_forward_matches_straight_line_implementation():
    config = ModelConfig(d_model=8, n_layers=1, n_heads=2, d_ff=16, vocab_size=16, max_seq_len=8, init_std=0.5)
    params = PolicyParams.init(config, np.random.default_rng(0))
    trace = forward(params, [1, 2, 3])
    np.testing.assert_allclose(np.sum(trace.policy, axis=1), 1.0, atol=1e-10)
    np.testing.assert_allclose(trace.logits, _straight_line_logits(params, [1, 2, 3]), rtol=0, atol=1e-12)


def test_forward_two_layers_matches_straight_line_implementation(random_params):
    tokens = [3, 0, 7, 7, 1]
    np.testing.assert_allclose(forward(random_params, tokens).logits,
                               _straight_line_logits(random_params, tokens), rtol=0, atol=1e-11)


def test_forward_rejects_bad_tokens(tiny_model_config):
    params = PolicyParams.init(tiny_model_config, np.random.default_rng(0))
    with pytest.raises(InputError):
        forward(params, [16])
    with pytest.raises(InputError):
        forward(params, [0] * 17)


def test_forward_names_the_layer_on_overflow(tiny_model_config):
    params = PolicyParams.init(tiny_model_config, np.random.default_rng(0))
    weights = dict(params.weights)
    weights[LM_HEAD] = np.full_like(weights[LM_HEAD], np.inf)
    with pytest.raises(NumericError) as info:
        forward(PolicyParams(tiny_model_config, weights), [1, 2])
    assert info.value.layer == LM_HEAD


def test_backward_zero_logit_grads_give_zero_gradients(random_params):
    trace = forward(random_params, [1, 2, 3])
    grads = backward(random_params, trace, np.zeros_like(trace.logits))
    assert all(not np.any(g) for g in grads.weights.values())
    assert set(grads.weights) == set(random_params.weights)


def _objective(params, tokens, dz):
    return float(np.sum(forward(params, tokens).logits * dz))


@pytest.mark.slow
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_backward_matches_central_finite_differences(random_params, seed):
    rng = np.random.default_rng(seed)
    tokens = list(rng.integers(0, 16, size=4))
    trace = forward(random_params, tokens)
    dz = rng.normal(size=trace.logits.shape)
    grads = backward(random_params, trace, dz)
    step = 1e-5
    for name, weight in random_params.weights.items():
        flat = weight.reshape(-1)
        for index in rng.choice(flat.size, size=min(flat.size, 12), replace=False):
            analytic = grads.weights[name].reshape(-1)[index]
            if abs(analytic) <= 1e-8:
                continue
            plus = {n: w.copy() for n, w in random_params.weights.items()}
            minus = {n: w.copy() for n, w in random_params.weights.items()}
            plus[name].reshape(-1)[index] += step
            minus[name].reshape(-1)[index] -= step
            numeric = (_objective(random_params.with_weights(plus), tokens, dz)
                       - _objective(random_params.with_weights(minus), tokens, dz)) / (2 * step)
            assert numeric == pytest.approx(analytic, rel=1e-4, abs=1e-9), name


def _single_token_setup(params, token=4):
    trace = forward(params, [token])
    rng = np.random.default_rng(7)
    policy = trace.policy[0]
    action = 2
    signal = 1.7 * -0.8 * (np.eye(params.config.vocab_size)[action] - policy)
    return trace, signal[None, :] * rng.uniform(0.5, 1.5)


def test_lm_head_gradient_is_rank_one(random_params):
    trace, dz = _single_token_setup(random_params)
    grads = backward(random_params, trace, dz)
    np.testing.assert_allclose(grads.lm_head_grad, np.outer(dz[0], trace.lm_head_input[0]), rtol=0, atol=1e-12)


def test_intermediate_gradients_match_jacobian_closed_form(random_params):
    trace, dz = _single_token_setup(random_params)
    grads = backward(random_params, trace, dz)
    jacobians = logit_jacobians(random_params, trace, 0)
    for name in intermediate_layer_names(random_params.config):
        expected = np.outer(jacobians[name].T @ dz[0], trace.inputs[name][0])
        actual = grads.weights[name]
        assert np.linalg.norm(actual - expected) <= 1e-8 * np.linalg.norm(expected), name
        np.testing.assert_allclose(grads.token_gradient(name, trace, 0), actual, rtol=1e-10, atol=1e-14)


def test_own_position_gradient_matches_jacobian_in_longer_sequences(random_params):
    trace = forward(random_params, [1, 5, 9, 2])
    position = 2
    dz = np.zeros_like(trace.logits)
    dz[position] = np.random.default_rng(3).normal(size=trace.logits.shape[1])
    grads = backward(random_params, trace, dz)
    jacobians = logit_jacobians(random_params, trace, position)
    for name in intermediate_layer_names(random_params.config):
        expected = np.outer(jacobians[name].T @ dz[position], trace.inputs[name][position])
        np.testing.assert_allclose(grads.token_gradient(name, trace, position), expected, rtol=1e-8, atol=1e-13)


@pytest.mark.parametrize("layer", [LayerIdentifiers.W_Q, LayerIdentifiers.W_O, LayerIdentifiers.W_UP,
                                   LayerIdentifiers.W_DOWN])
def test_jacobian_matches_output_perturbation(random_params, layer):
    name = block_weight_name(0, layer)
    trace = forward(random_params, [6])
    jacobian = logit_jacobian(random_params, trace, name, 0)
    x = trace.inputs[name][0]
    direction = np.random.default_rng(11).normal(size=random_params[name].shape[0])
    step = 1e-5
    # moving W along u x^T / |x|^2 moves the layer output by exactly u
    delta = np.outer(direction, x) / (x @ x) * step
    plus = dict(random_params.weights)
    minus = dict(random_params.weights)
    plus[name] = random_params[name] + delta
    minus[name] = random_params[name] - delta
    numeric = (forward(random_params.with_weights(plus), [6]).logits[0]
               - forward(random_params.with_weights(minus), [6]).logits[0]) / (2 * step)
    np.testing.assert_allclose(jacobian @ direction, numeric, rtol=1e-4, atol=1e-8)


def test_jacobian_is_zero_without_lm_head(random_params):
    weights = dict(random_params.weights)
    weights[LM_HEAD] = np.zeros_like(weights[LM_HEAD])
    params = random_params.with_weights(weights)
    trace = forward(params, [1, 2])
    jacobian = logit_jacobian(params, trace, block_weight_name(1, LayerIdentifiers.W_DOWN), 1)
    assert not np.any(jacobian)


def test_jacobian_of_lm_head_is_rejected(random_params):
    trace = forward(random_params, [1])
    with pytest.raises(InputError, match="intermediate"):
        logit_jacobian(random_params, trace, LM_HEAD, 0)


def test_rank_one_frobenius_identity():
    rng = np.random.default_rng(5)
    for _ in range(20):
        u, v = rng.normal(size=7), rng.normal(size=5)
        assert np.sum(np.outer(u, v) ** 2) == pytest.approx(np.sum(u ** 2) * np.sum(v ** 2), rel=1e-15)


def test_sample_token_near_deterministic():
    logits = np.zeros(8)
    logits[3] = 50.0
    rng = np.random.default_rng(0)
    assert all(sample_token(logits, 0.7, rng)[0] == 3 for _ in range(200))


def test_sample_token_uniform_frequencies():
    rng = np.random.default_rng(0)
    draws = np.array([sample_token(np.zeros(4), 1.0, rng)[0] for _ in range(100_000)])
    frequencies = np.bincount(draws, minlength=4) / draws.size
    assert np.all((frequencies >= 0.24) & (frequencies <= 0.26))


def test_sample_token_logprob_is_temperature_one():
    logits = np.array([0.5, -1.0, 2.0])
    token, logprob = sample_token(logits, 0.3, np.random.default_rng(1))
    assert logprob == pytest.approx(np.log(softmax(logits)[token]), rel=1e-12)


def test_sample_token_is_seeded():
    a = [sample_token(np.arange(6.0), 1.0, rng)[0] for rng in [np.random.default_rng(9)] for _ in range(50)]
    b = [sample_token(np.arange(6.0), 1.0, rng)[0] for rng in [np.random.default_rng(9)] for _ in range(50)]
    assert a == b


def test_sample_token_rejects_non_finite_logits():
    with pytest.raises(NumericError):
        sample_token(np.array([0.0, np.nan]), 1.0, np.random.default_rng(0))
